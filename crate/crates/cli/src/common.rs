use std::fmt;
use std::path::Path;

use clap::Args;
use flowspan::basis::{CameraModel, ObjectEmbedding};
use flowspan::geometry::{ImageShape, Intrinsics, PrincipalPoint};
use flowspan::projection::{Threshold, ThresholdMode};

/// Bad flags or unreadable input; exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check that ran but did not meet its tolerance; exit code 1.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

pub trait InputContext<T> {
    /// Marks a failure while reading or validating user input.
    fn input(self, what: impl fmt::Display) -> anyhow::Result<T>;
}

impl<T> InputContext<T> for flowspan::Result<T> {
    fn input(self, what: impl fmt::Display) -> anyhow::Result<T> {
        self.map_err(|e| usage(format!("{what}: {e}")))
    }
}

pub struct Ctx {
    pub seed: u64,
    pub threads: Option<usize>,
    pub quiet: bool,
}

impl Ctx {
    pub fn say(&self, line: impl fmt::Display) {
        if !self.quiet {
            println!("{line}");
        }
    }
}

/// Comma-separated list of exactly `N` finite numbers.
pub fn parse_list<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!(
            "expected {N} comma-separated numbers, got {}",
            parts.len()
        ));
    }
    let mut out = [0.0f64; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("not a number: {p:?}"))?;
        if !o.is_finite() {
            return Err(format!("not finite: {p:?}"));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Args)]
pub struct CameraArgs {
    /// Known intrinsics as `fx,fy,cx,cy`.
    #[arg(long, value_parser = parse_list::<4>, conflicts_with = "unknown_focal")]
    pub intrinsics: Option<[f64; 4]>,

    /// Use the 8-field basis that does not need the focal length.
    #[arg(long)]
    pub unknown_focal: bool,

    /// Principal point `cx,cy` for --unknown-focal; defaults to the image centre.
    #[arg(long, value_parser = parse_list::<2>, requires = "unknown_focal")]
    pub pp: Option<[f64; 2]>,
}

impl CameraArgs {
    pub fn model(&self, shape: ImageShape) -> anyhow::Result<Option<CameraModel>> {
        if let Some([fx, fy, cx, cy]) = self.intrinsics {
            return Ok(Some(CameraModel::Known(
                Intrinsics::new(fx, fy, cx, cy).input("--intrinsics")?,
            )));
        }
        if self.unknown_focal {
            let pp = match self.pp {
                Some([cx, cy]) => PrincipalPoint::new(cx, cy).input("--pp")?,
                None => PrincipalPoint::centered(shape),
            };
            return Ok(Some(CameraModel::UnknownFocal(pp)));
        }
        Ok(None)
    }

    pub fn require(&self, shape: ImageShape) -> anyhow::Result<CameraModel> {
        self.model(shape)?
            .ok_or_else(|| usage("one of --intrinsics or --unknown-focal is required"))
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "focal_mode": if self.unknown_focal { "unknown" } else { "known" },
            "intrinsics": self.intrinsics,
            "principal_point": self.pp,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct ThresholdArgs {
    /// Singular values at or below this cutoff are dropped.
    #[arg(long, default_value_t = flowspan::projection::DEFAULT_EPSILON)]
    pub eps: f64,

    /// Scale the cutoff by the largest singular value.
    #[arg(long)]
    pub relative: bool,
}

impl ThresholdArgs {
    pub fn threshold(&self) -> anyhow::Result<Threshold> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(usage(format!("--eps must be positive, got {}", self.eps)));
        }
        Ok(Threshold {
            epsilon: self.eps,
            mode: if self.relative {
                ThresholdMode::Relative
            } else {
                ThresholdMode::Absolute
            },
        })
    }
}

pub fn read_embedding(dir: &Path, renormalize: bool) -> anyhow::Result<ObjectEmbedding> {
    flowspan::io::read_embedding_stack(dir, renormalize)
        .input(format!("embedding {}", dir.display()))
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list::<2>("1.5, -2").unwrap(), [1.5, -2.0]);
        assert!(parse_list::<2>("1").is_err());
        assert!(parse_list::<2>("1,x").is_err());
        assert!(parse_list::<1>("inf").is_err());
    }
}
