use std::path::{Path, PathBuf};

use clap::ValueEnum;
use flowspan::geometry::{DisparityMap, ScalarField};
use flowspan::io::{read_mask, read_pfm};
use flowspan::metrics::{disparity_to_depth, evaluate_depth, Alignment};

use crate::common::{ensure_dir, Ctx, InputContext};
use crate::manifest::{write_record, RunManifest};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlignArg {
    None,
    MedianRatio,
}

impl From<AlignArg> for Alignment {
    fn from(a: AlignArg) -> Self {
        match a {
            AlignArg::None => Alignment::None,
            AlignArg::MedianRatio => Alignment::MedianRatio,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Predicted depth (PFM).
    #[arg(long)]
    pub pred: PathBuf,

    /// Ground-truth depth (PFM).
    #[arg(long)]
    pub gt: PathBuf,

    /// The prediction holds disparity; invert it to depth first.
    #[arg(long)]
    pub pred_disparity: bool,

    /// Valid-pixel mask (PGM, nonzero = valid).
    #[arg(long)]
    pub mask: Option<PathBuf>,

    /// Scale applied to the prediction before scoring.
    #[arg(long, value_enum, default_value = "median-ratio")]
    pub alignment: AlignArg,

    /// Directory for the report and run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load(path: &Path, disparity: bool) -> anyhow::Result<ScalarField> {
    let f = read_pfm(path).input(path.display())?;
    if !disparity {
        return Ok(f);
    }
    let d = DisparityMap::new(f.shape(), f.into_vec()).input(path.display())?;
    Ok(disparity_to_depth(&d))
}

pub fn run(ctx: &Ctx, args: Args) -> anyhow::Result<()> {
    let pred = load(&args.pred, args.pred_disparity)?;
    let gt = load(&args.gt, false)?;
    let mask = args
        .mask
        .as_deref()
        .map(|p| read_mask(p).input(p.display()))
        .transpose()?;
    let alignment: Alignment = args.alignment.into();
    let r = evaluate_depth(&pred, &gt, mask.as_ref(), alignment).input("depth evaluation")?;

    let cols = r.columns();
    ctx.say(
        cols.iter()
            .map(|(n, _)| format!("{n:>10}"))
            .collect::<String>(),
    );
    ctx.say(
        cols.iter()
            .map(|(_, v)| format!("{v:>10.4}"))
            .collect::<String>(),
    );
    ctx.say(format!(
        "pixels {}  scale {:e}",
        r.n_pixels, r.scale_applied
    ));

    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let rec = write_record(&out.join("metrics.json"), &r)?;
        let mut m = RunManifest::new(ctx, "metrics");
        m.input(&args.pred).input(&args.gt);
        if let Some(p) = &args.mask {
            m.input(p);
        }
        m.param("alignment", alignment)
            .param("pred_disparity", args.pred_disparity)
            .output(rec);
        m.write_in(out)?;
    }
    Ok(())
}
