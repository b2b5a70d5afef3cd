use std::path::PathBuf;

use flowspan::basis::{camera_basis, embedding_basis};
use flowspan::geometry::make_grid;
use flowspan::io::{read_disparity, read_flo};
use flowspan::motion::{gauge_for, recover_camera_motion, recover_object_matrix, RecoveredMotion};
use flowspan::projection::project_onto;
use serde::Serialize;

use crate::common::{
    ensure_dir, read_embedding, usage, CameraArgs, Ctx, InputContext, ThresholdArgs,
};
use crate::manifest::{write_record, RunManifest};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Observed flow (.flo).
    #[arg(long)]
    pub flow: PathBuf,

    /// Disparity map (PFM) the basis is built from.
    #[arg(long)]
    pub disparity: PathBuf,

    #[command(flatten)]
    pub camera: CameraArgs,

    /// Embedding stack; adds the object-motion matrix to the report.
    #[arg(long)]
    pub embedding: Option<PathBuf>,

    /// Rescale embedding vectors to unit length on load.
    #[arg(long)]
    pub renormalize: bool,

    #[command(flatten)]
    pub threshold: ThresholdArgs,

    /// Directory for `analysis.json` and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Report {
    camera_loss: f64,
    motion: RecoveredMotion,
    embedding_loss: Option<f64>,
}

fn fmt3(v: [f64; 3]) -> String {
    format!("{:+.6e} {:+.6e} {:+.6e}", v[0], v[1], v[2])
}

pub fn run(ctx: &Ctx, args: Args) -> anyhow::Result<()> {
    let threshold = args.threshold.threshold()?;
    let flow = read_flo(&args.flow).input(args.flow.display())?;
    let d = read_disparity(&args.disparity).input(args.disparity.display())?;
    if d.shape() != flow.shape() {
        return Err(usage(format!(
            "flow is {} but disparity is {}",
            flow.shape(),
            d.shape()
        )));
    }
    let model = args.camera.require(d.shape())?;
    let grid = make_grid(d.shape());
    let gauge = gauge_for(&d);
    let cam = camera_basis(&grid, &model, &d).input("basis inputs")?;
    let r = project_onto(&cam, &flow, threshold)?;
    let mut motion = recover_camera_motion(&r, gauge)?;
    let mut embedding_loss = None;
    if let Some(p) = &args.embedding {
        let phi = read_embedding(p, args.renormalize)?;
        let b = embedding_basis(&grid, &model, &d, &phi).input("embedding")?;
        let re = project_onto(&b, &flow, threshold)?;
        let om = recover_object_matrix(&re, &phi, gauge)?;
        embedding_loss = Some(re.residual_norm);
        motion.object_motion_matrix = Some(om.matrix);
        motion.degenerate |= om.degenerate;
    }
    let report = Report {
        camera_loss: r.residual_norm,
        motion,
        embedding_loss,
    };

    let m = &report.motion;
    ctx.say(format!("camera loss      {:e}", report.camera_loss));
    ctx.say(format!("gauge (median d) {:e}", m.gauge));
    ctx.say(format!("translation      {}", fmt3(m.camera.translation)));
    if let Some(dir) = m.translation_direction {
        ctx.say(format!("direction        {}", fmt3(dir)));
    }
    ctx.say(format!("rotation         {}", fmt3(m.camera.rotation)));
    match m.focal_estimate {
        Some(f) => ctx.say(format!(
            "focal            {:.6e} (x {:?}, y {:?}, ratio {:?})",
            f.focal, f.from_x, f.from_y, f.consistency_ratio
        )),
        None if args.camera.unknown_focal => {
            ctx.say("focal            not observable (no rotation about x or y)")
        }
        None => {}
    }
    if let Some(l) = report.embedding_loss {
        ctx.say(format!("embedding loss   {l:e}"));
    }
    if let Some(mat) = &m.object_motion_matrix {
        for (axis, row) in ["x", "y", "z"].iter().zip(mat) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:+.4e}")).collect();
            ctx.say(format!("M[{axis}]             {}", cells.join(" ")));
        }
    }
    if m.translation_in_focal_units {
        ctx.say("note: x and y translation are scaled by the unknown focal length");
    }
    if m.degenerate {
        ctx.say("warning: rank-deficient basis, coefficients are the minimum-norm choice");
    }

    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let rec = write_record(&out.join("analysis.json"), &report)?;
        let mut man = RunManifest::new(ctx, "analyze");
        man.input(&args.flow).input(&args.disparity);
        if let Some(p) = &args.embedding {
            man.input(p);
        }
        man.param("eps", threshold.epsilon)
            .param("threshold_mode", threshold.mode)
            .param("camera", args.camera.describe())
            .output(rec);
        man.write_in(out)?;
    }
    Ok(())
}
