use std::path::PathBuf;

use flowspan::basis::{camera_basis, BasisSpec, FieldLabel, FlowBasis};
use flowspan::geometry::make_grid;
use flowspan::io::{read_basis_stack, read_disparity, read_flo, write_flo, write_pfm};
use flowspan::projection::{dual_solve_loss, project_onto, DualLoss, LossWeights};
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

    /// Basis stack directory written by `basis`.
    #[arg(long, conflicts_with_all = ["disparity", "embedding"])]
    pub basis: Option<PathBuf>,

    /// Build the basis inline from this disparity map (PFM).
    #[arg(long)]
    pub disparity: Option<PathBuf>,

    #[command(flatten)]
    pub camera: CameraArgs,

    /// Embedding stack for an inline embedding basis; also reports the
    /// weighted camera plus full loss.
    #[arg(long)]
    pub embedding: Option<PathBuf>,

    /// Rescale embedding vectors to unit length on load.
    #[arg(long)]
    pub renormalize: bool,

    #[command(flatten)]
    pub threshold: ThresholdArgs,

    /// Weight of the camera-only loss in the dual loss.
    #[arg(long, default_value_t = flowspan::projection::DEFAULT_CAMERA_LOSS_WEIGHT)]
    pub camera_weight: f64,

    /// Weight of the full-basis loss in the dual loss.
    #[arg(long, default_value_t = flowspan::projection::DEFAULT_FULL_LOSS_WEIGHT)]
    pub full_weight: f64,

    /// Output directory for the reconstruction, residual and report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Report {
    loss: f64,
    flow_norm: f64,
    n_fields: usize,
    rank: usize,
    degenerate: bool,
    coefficients: Vec<(FieldLabel, f64)>,
    singular_values: Vec<f64>,
    dual: Option<DualLoss>,
}

pub fn run(ctx: &Ctx, args: Args) -> anyhow::Result<()> {
    let threshold = args.threshold.threshold()?;
    let flow = read_flo(&args.flow).input(args.flow.display())?;
    let mut dual = None;
    let basis: FlowBasis = match (&args.basis, &args.disparity) {
        (Some(dir), _) => read_basis_stack(dir).input(dir.display())?.0,
        (None, Some(dp)) => {
            let d = read_disparity(dp).input(dp.display())?;
            let model = args.camera.require(d.shape())?;
            let phi = args
                .embedding
                .as_deref()
                .map(|p| read_embedding(p, args.renormalize))
                .transpose()?;
            let grid = make_grid(d.shape());
            let spec = BasisSpec {
                model,
                embedding_dim: phi.as_ref().map(|p| p.dim()),
                object_rotation: false,
            };
            let full = spec.build(&grid, &d, phi.as_ref()).input("basis inputs")?;
            if phi.is_some() {
                shape_check(&full, &flow)?;
                let cam = camera_basis(&grid, &model, &d).input("basis inputs")?;
                let weights = LossWeights {
                    camera: args.camera_weight,
                    full: args.full_weight,
                };
                dual = Some(dual_solve_loss(&cam, &full, &flow, threshold, weights)?);
            }
            full
        }
        (None, None) => return Err(usage("one of --basis or --disparity is required")),
    };
    shape_check(&basis, &flow)?;
    let r = project_onto(&basis, &flow, threshold)?;
    let report = Report {
        loss: r.residual_norm,
        flow_norm: flow.norm(),
        n_fields: r.labels.len(),
        rank: r.rank,
        degenerate: r.is_degenerate(),
        coefficients: r
            .labels
            .iter()
            .copied()
            .zip(r.coefficients.iter().copied())
            .collect(),
        singular_values: r.singular_values.clone(),
        dual,
    };

    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let recon = out.join("reconstructed.flo");
        write_flo(&recon, &r.reconstructed)?;
        let resid = out.join("residual.pfm");
        write_pfm(&resid, &flow.sub(&r.reconstructed)?.magnitude())?;
        let rec = write_record(&out.join("projection.json"), &report)?;
        let mut m = RunManifest::new(ctx, "project");
        m.input(&args.flow);
        for p in [&args.basis, &args.disparity, &args.embedding]
            .into_iter()
            .flatten()
        {
            m.input(p);
        }
        if args.disparity.is_some() {
            m.param("camera", args.camera.describe());
        }
        m.param("eps", threshold.epsilon)
            .param("threshold_mode", threshold.mode)
            .param("loss_weights", [args.camera_weight, args.full_weight])
            .outputs([recon, resid, rec]);
        m.write_in(out)?;
    }
    ctx.say(format!("loss {:e}", report.loss));
    ctx.say(format!("rank {} of {}", report.rank, report.n_fields));
    if let Some(d) = dual {
        ctx.say(format!(
            "dual camera {:e} full {:e} total {:e}",
            d.camera_loss, d.full_loss, d.total
        ));
    }
    Ok(())
}

fn shape_check(basis: &FlowBasis, flow: &flowspan::geometry::FlowField) -> anyhow::Result<()> {
    if basis.shape() != flow.shape() {
        return Err(usage(format!(
            "flow is {} but the basis is {}",
            flow.shape(),
            basis.shape()
        )));
    }
    Ok(())
}
