use std::path::PathBuf;

use flowspan::geometry::ImageShape;
use flowspan::gradients::{gradcheck, synthetic_problem, GradCheckReport, ProblemKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::common::{ensure_dir, usage, Ctx, NumericFailure, ThresholdArgs};
use crate::manifest::{write_record, RunManifest};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Number of random problems.
    #[arg(long, default_value_t = 20)]
    pub problems: usize,

    /// Smallest image side.
    #[arg(long, default_value_t = 4)]
    pub min_size: usize,

    /// Largest image side.
    #[arg(long, default_value_t = 12)]
    pub max_size: usize,

    /// Pass when every relative error is at or below this.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,

    #[command(flatten)]
    pub threshold: ThresholdArgs,

    /// Directory for the report and run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Case {
    index: usize,
    kind: ProblemKind,
    shape: ImageShape,
    report: Option<GradCheckReport>,
    skipped: Option<String>,
}

#[derive(Debug, Serialize)]
struct Summary {
    max_rel_error: f64,
    tolerance: f64,
    checked: usize,
    skipped: usize,
    passed: bool,
    cases: Vec<Case>,
}

pub fn run(ctx: &Ctx, args: Args) -> anyhow::Result<()> {
    let threshold = args.threshold.threshold()?;
    if args.min_size == 0 || args.min_size > args.max_size {
        return Err(usage("need 0 < --min-size <= --max-size"));
    }
    if args.problems == 0 {
        return Err(usage("--problems must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut cases = Vec::with_capacity(args.problems);
    let mut worst = 0.0f64;
    for index in 0..args.problems {
        let h = rng.gen_range(args.min_size..=args.max_size);
        let w = rng.gen_range(args.min_size..=args.max_size);
        let shape = ImageShape::new(h, w)?;
        let kind = ProblemKind::ALL[index % ProblemKind::ALL.len()];
        let mut uniform = || rng.gen::<f64>();
        let mut p = synthetic_problem(shape, kind, &mut uniform)?;
        p.problem.threshold = threshold;
        let case = match gradcheck(&p.problem, &p.disparity, p.embedding.as_deref()) {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                ctx.say(format!(
                    "{index:3} {kind:?} {shape}: {:.3e}",
                    r.max_rel_error
                ));
                Case {
                    index,
                    kind,
                    shape,
                    report: Some(r),
                    skipped: None,
                }
            }
            Err(e @ flowspan::Error::NearThresholdSingularValue { .. }) => {
                ctx.say(format!("{index:3} {kind:?} {shape}: skipped ({e})"));
                Case {
                    index,
                    kind,
                    shape,
                    report: None,
                    skipped: Some(e.to_string()),
                }
            }
            Err(e) => return Err(e.into()),
        };
        cases.push(case);
    }
    let checked = cases.iter().filter(|c| c.report.is_some()).count();
    let summary = Summary {
        max_rel_error: worst,
        tolerance: args.tolerance,
        checked,
        skipped: cases.len() - checked,
        passed: worst <= args.tolerance && checked > 0,
        cases,
    };
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let rec = write_record(&out.join("gradcheck.json"), &summary)?;
        let mut m = RunManifest::new(ctx, "gradcheck");
        m.param("problems", args.problems)
            .param("size", [args.min_size, args.max_size])
            .param("tolerance", args.tolerance)
            .param("eps", threshold.epsilon)
            .param("threshold_mode", threshold.mode)
            .output(rec);
        m.write_in(out)?;
    }
    ctx.say(format!(
        "max relative error {:e} over {} problems ({} skipped)",
        summary.max_rel_error, summary.checked, summary.skipped
    ));
    if !summary.passed {
        return Err(NumericFailure(format!(
            "gradient check failed: {:e} > {:e} or nothing checked",
            summary.max_rel_error, args.tolerance
        ))
        .into());
    }
    Ok(())
}
