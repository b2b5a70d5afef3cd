use std::path::PathBuf;

use clap::ValueEnum;
use flowspan::geometry::{CameraMotion, ImageShape, Intrinsics};
use flowspan::io::{colorize_flow, write_flo, write_png, write_scene};
use flowspan::scenes::{instantaneous_flow, reproject_flow, ScenePreset, DEFAULT_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::common::{ensure_dir, parse_list, usage, Ctx, InputContext};
use crate::manifest::{write_record, RunManifest};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SceneArg {
    Cube,
    Plane,
    TwoObjects,
}

impl From<SceneArg> for ScenePreset {
    fn from(s: SceneArg) -> Self {
        match s {
            SceneArg::Cube => ScenePreset::Cube,
            SceneArg::Plane => ScenePreset::Plane,
            SceneArg::TwoObjects => ScenePreset::TwoObjects,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Scene layout.
    #[arg(long, value_enum, default_value = "cube")]
    pub scene: SceneArg,

    /// Image height in pixels.
    #[arg(long, default_value_t = 64)]
    pub height: usize,

    /// Image width in pixels.
    #[arg(long, default_value_t = 64)]
    pub width: usize,

    /// Focal length in pixels; defaults to the image width.
    #[arg(long)]
    pub focal: Option<f64>,

    /// Camera velocity `tx,ty,tz,wx,wy,wz`.
    #[arg(long, value_parser = parse_list::<6>, conflicts_with = "random_motion")]
    pub motion: Option<[f64; 6]>,

    /// Draw every camera velocity component uniformly from [-s, s] using --seed.
    #[arg(long, value_name = "S")]
    pub random_motion: Option<f64>,

    /// Object velocity `index:tx,ty,tz,wx,wy,wz`; repeatable.
    #[arg(long = "object-motion", value_name = "SPEC")]
    pub object_motion: Vec<String>,

    /// Motion step used for the exact reprojected flow.
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub step: f64,

    /// Output directory for the scene, flows and previews.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Record {
    scene: ScenePreset,
    shape: ImageShape,
    intrinsics: Intrinsics,
    step: f64,
    camera_motion: CameraMotion,
    object_motions: Vec<(usize, CameraMotion)>,
    exact_norm: f64,
    instantaneous_norm: f64,
    /// `|exact - step * instantaneous|`.
    linearization_error: f64,
}

fn motion(v: [f64; 6]) -> anyhow::Result<CameraMotion> {
    CameraMotion::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]).input("motion")
}

fn parse_object_motion(spec: &str) -> anyhow::Result<(usize, CameraMotion)> {
    let (idx, rest) = spec.split_once(':').ok_or_else(|| {
        usage(format!(
            "object motion {spec:?}: expected `index:tx,ty,tz,wx,wy,wz`"
        ))
    })?;
    let idx = idx
        .trim()
        .parse()
        .map_err(|_| usage(format!("object motion {spec:?}: bad index")))?;
    let v = parse_list::<6>(rest).map_err(|e| usage(format!("object motion {spec:?}: {e}")))?;
    Ok((idx, motion(v)?))
}

pub fn run(ctx: &Ctx, args: Args) -> anyhow::Result<()> {
    if !(args.step.is_finite() && args.step > 0.0) {
        return Err(usage("--step must be positive"));
    }
    let shape = ImageShape::new(args.height, args.width).input("image size")?;
    let focal = args.focal.unwrap_or(args.width as f64);
    let k = Intrinsics::centered(shape, focal).input("--focal")?;
    let camera = match (args.motion, args.random_motion) {
        (Some(v), _) => motion(v)?,
        (None, Some(s)) => {
            if !(s.is_finite() && s >= 0.0) {
                return Err(usage("--random-motion must be non-negative"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            motion(std::array::from_fn(|_| rng.gen_range(-s..=s)))?
        }
        (None, None) => CameraMotion::default(),
    };
    let preset: ScenePreset = args.scene.into();
    let mut scene = preset
        .build(shape, k)
        .input("scene")?
        .with_camera_motion(camera);
    let mut object_motions = Vec::new();
    for spec in &args.object_motion {
        let (i, m) = parse_object_motion(spec)?;
        scene = scene
            .with_object_motion(i, m)
            .input(format!("object motion {spec:?}"))?;
        object_motions.push((i, m));
    }

    let exact = reproject_flow(&scene, args.step).input("motion")?;
    let inst = instantaneous_flow(&scene)?;
    let lin = exact.sub(&inst.scaled(args.step))?.norm();

    ensure_dir(&args.out)?;
    let mut written = write_scene(&args.out, &scene)?;
    let exact_path = args.out.join("exact.flo");
    let inst_path = args.out.join("instantaneous.flo");
    write_flo(&exact_path, &exact)?;
    write_flo(&inst_path, &inst)?;
    let png = args.out.join("exact.png");
    write_png(&png, shape, &colorize_flow(&exact, None))?;
    let png2 = args.out.join("instantaneous.png");
    write_png(&png2, shape, &colorize_flow(&inst, None))?;
    let record = Record {
        scene: preset,
        shape,
        intrinsics: k,
        step: args.step,
        camera_motion: camera,
        object_motions,
        exact_norm: exact.norm(),
        instantaneous_norm: inst.norm(),
        linearization_error: lin,
    };
    let rec = write_record(&args.out.join("synth.json"), &record)?;
    written.extend([exact_path, inst_path, png, png2, rec]);

    let mut m = RunManifest::new(ctx, "synth");
    m.param("scene", preset)
        .param("shape", shape)
        .param("focal", focal)
        .param("camera_motion", camera)
        .param("object_motion", &args.object_motion)
        .param("random_motion", args.random_motion)
        .param("step", args.step)
        .outputs(written);
    m.write_in(&args.out)?;
    ctx.say(format!("scene {:?} {}", preset, shape));
    ctx.say(format!(
        "|exact| {:e}  |instantaneous| {:e}",
        record.exact_norm, record.instantaneous_norm
    ));
    ctx.say(format!("|exact - step * instantaneous| {lin:e}"));
    Ok(())
}
