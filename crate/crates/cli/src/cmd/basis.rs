use std::path::PathBuf;

use flowspan::basis::BasisSpec;
use flowspan::geometry::make_grid;
use flowspan::io::{read_disparity, write_basis_stack};

use crate::common::{ensure_dir, read_embedding, usage, CameraArgs, Ctx, InputContext};
use crate::manifest::RunManifest;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Disparity map (PFM).
    #[arg(long)]
    pub disparity: PathBuf,

    #[command(flatten)]
    pub camera: CameraArgs,

    /// Embedding stack directory; replaces the camera translation fields
    /// with per-channel weighted copies.
    #[arg(long)]
    pub embedding: Option<PathBuf>,

    /// Expected embedding dimension; checked against the stack.
    #[arg(long = "A", value_name = "N", requires = "embedding")]
    pub dim: Option<usize>,

    /// Rescale embedding vectors to unit length on load.
    #[arg(long)]
    pub renormalize: bool,

    /// Append per-channel object rotation fields.
    #[arg(long, requires = "embedding")]
    pub object_rotation: bool,

    /// Output directory for the basis stack.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(ctx: &Ctx, args: Args) -> anyhow::Result<()> {
    let d = read_disparity(&args.disparity).input(args.disparity.display())?;
    let shape = d.shape();
    let model = args.camera.require(shape)?;
    let phi = args
        .embedding
        .as_deref()
        .map(|p| read_embedding(p, args.renormalize))
        .transpose()?;
    if let (Some(want), Some(phi)) = (args.dim, &phi) {
        if want != phi.dim() {
            return Err(usage(format!(
                "--A {want} but the embedding has {} channels",
                phi.dim()
            )));
        }
    }
    let spec = BasisSpec {
        model,
        embedding_dim: phi.as_ref().map(|p| p.dim()),
        object_rotation: args.object_rotation,
    };
    let basis = spec
        .build(&make_grid(shape), &d, phi.as_ref())
        .input("basis inputs")?;
    ensure_dir(&args.out)?;
    let written = write_basis_stack(&args.out, &basis, Some(spec))?;

    let mut m = RunManifest::new(ctx, "basis");
    m.input(&args.disparity);
    if let Some(p) = &args.embedding {
        m.input(p);
    }
    m.param("camera", args.camera.describe())
        .param("A", spec.embedding_dim)
        .param("object_rotation", args.object_rotation)
        .param("renormalize", args.renormalize)
        .param("cardinality", basis.len())
        .outputs(written);
    m.write_in(&args.out)?;
    ctx.say(format!("cardinality {}", basis.len()));
    for l in basis.labels() {
        ctx.say(format!("  {l}"));
    }
    Ok(())
}
