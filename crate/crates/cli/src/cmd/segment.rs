use std::collections::BTreeMap;
use std::path::PathBuf;

use flowspan::embedding::{parse_seeds, segment_from_seeds, BilateralConfig};
use flowspan::io::{render_labels, write_labels_pgm, write_png};

use crate::common::{ensure_dir, read_embedding, usage, Ctx, InputContext};
use crate::manifest::{write_record, RunManifest};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Embedding stack directory.
    #[arg(long)]
    pub embedding: PathBuf,

    /// Rescale embedding vectors to unit length on load.
    #[arg(long)]
    pub renormalize: bool,

    /// Seed list, one `label u v` per line.
    #[arg(long)]
    pub seeds: PathBuf,

    /// Weight on squared pixel distance, in image diagonals.
    #[arg(long, default_value_t = 1.0)]
    pub lambda_spatial: f64,

    /// Weight on squared embedding distance.
    #[arg(long, default_value_t = 10.0)]
    pub lambda_embed: f64,

    /// Output directory for the label map, preview and report.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(ctx: &Ctx, args: Args) -> anyhow::Result<()> {
    let phi = read_embedding(&args.embedding, args.renormalize)?;
    let text = std::fs::read_to_string(&args.seeds)
        .map_err(|e| usage(format!("{}: {e}", args.seeds.display())))?;
    let seeds = parse_seeds(&text).input(args.seeds.display())?;
    let config =
        BilateralConfig::new(args.lambda_spatial, args.lambda_embed).input("bilateral weights")?;
    let labels = segment_from_seeds(&phi, &seeds, config).input("segmentation")?;

    let mut counts = BTreeMap::new();
    for &l in &labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    ensure_dir(&args.out)?;
    let pgm = args.out.join("labels.pgm");
    write_labels_pgm(&pgm, phi.shape(), &labels).input("labels")?;
    let png = args.out.join("labels.png");
    write_png(&png, phi.shape(), &render_labels(&labels))?;
    let rec = write_record(&args.out.join("segment.json"), &counts)?;
    let mut m = RunManifest::new(ctx, "segment");
    m.input(&args.embedding)
        .input(&args.seeds)
        .param("bilateral", config)
        .param("seeds", &seeds)
        .param("renormalize", args.renormalize)
        .outputs([pgm, png, rec]);
    m.write_in(&args.out)?;
    for (l, n) in &counts {
        ctx.say(format!("label {l}: {n} pixels"));
    }
    Ok(())
}
