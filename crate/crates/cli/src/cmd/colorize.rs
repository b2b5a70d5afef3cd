use std::path::PathBuf;

use flowspan::embedding::{embedding_gradient_magnitude, embedding_pca};
use flowspan::io::{colorize_flow, read_flo, read_pfm, render_scalar, write_png};

use crate::common::{read_embedding, usage, Ctx, InputContext};
use crate::manifest::{beside, RunManifest};

#[derive(Debug, clap::Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["flow", "embedding", "scalar"]))]
pub struct Args {
    /// Flow (.flo), rendered with the Middlebury colour wheel.
    #[arg(long)]
    pub flow: Option<PathBuf>,

    /// Embedding stack: first three principal components as RGB, plus a
    /// gradient-magnitude image next to the output.
    #[arg(long)]
    pub embedding: Option<PathBuf>,

    /// Scalar map (PFM) rendered in grayscale.
    #[arg(long)]
    pub scalar: Option<PathBuf>,

    /// Flow magnitude mapped to full saturation; defaults to the field maximum.
    #[arg(long)]
    pub max_magnitude: Option<f64>,

    /// Rescale embedding vectors to unit length on load.
    #[arg(long)]
    pub renormalize: bool,

    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(ctx: &Ctx, args: Args) -> anyhow::Result<()> {
    if let Some(m) = args.max_magnitude {
        if !(m > 0.0 && m.is_finite()) {
            return Err(usage("--max-magnitude must be positive"));
        }
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        crate::common::ensure_dir(parent)?;
    }
    let mut man = RunManifest::new(ctx, "colorize");
    let mut outputs = vec![args.out.clone()];
    if let Some(p) = &args.flow {
        let flow = read_flo(p).input(p.display())?;
        write_png(
            &args.out,
            flow.shape(),
            &colorize_flow(&flow, args.max_magnitude),
        )?;
        man.input(p).param("max_magnitude", args.max_magnitude);
    } else if let Some(p) = &args.embedding {
        let phi = read_embedding(p, args.renormalize)?;
        let k = phi.dim().min(3);
        let pca = embedding_pca(&phi, k)?;
        let rgb: Vec<[u8; 3]> = pca
            .channels
            .chunks_exact(k)
            .map(|px| {
                std::array::from_fn(|c| (255.0 * px.get(c).copied().unwrap_or(0.5)).round() as u8)
            })
            .collect();
        write_png(&args.out, phi.shape(), &rgb)?;
        let grad = args.out.with_file_name(format!(
            "{}_gradient.png",
            args.out.file_stem().unwrap_or_default().to_string_lossy()
        ));
        write_png(
            &grad,
            phi.shape(),
            &render_scalar(&embedding_gradient_magnitude(&phi)),
        )?;
        outputs.push(grad);
        man.input(p)
            .param("pca_components", k)
            .param("explained_variance", &pca.explained_variance);
        for (c, flat) in pca.zero_variance.iter().enumerate() {
            if *flat {
                ctx.say(format!("component {c} has zero variance"));
            }
        }
    } else if let Some(p) = &args.scalar {
        let f = read_pfm(p).input(p.display())?;
        write_png(&args.out, f.shape(), &render_scalar(&f))?;
        man.input(p);
    }
    man.outputs(outputs.clone());
    man.write(&beside(&args.out))?;
    for o in outputs {
        ctx.say(format!("wrote {}", o.display()));
    }
    Ok(())
}
