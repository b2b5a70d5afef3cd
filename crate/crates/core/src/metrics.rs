//! Monocular depth evaluation: rel, log10, RMS and the three threshold accuracies.

use serde::{Deserialize, Serialize};

use crate::basis::ObjectMask;
use crate::geometry::{median, DisparityMap, ScalarField};
use crate::{Error, Result};

/// Disparities below this are clamped before inversion.
pub const DISPARITY_FLOOR: f64 = 1e-6;
/// Base of the accuracy thresholds `1.25^i`.
pub const SIGMA_BASE: f64 = 1.25;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    None,
    /// Scale the prediction by `median(gt / pred)` over valid pixels.
    #[default]
    MedianRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEvalReport {
    pub rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub sigma: [f64; 3],
    pub n_pixels: usize,
    pub scale_applied: f64,
}

impl DepthEvalReport {
    /// Column order: rel, log10, rms, sigma1, sigma2, sigma3.
    pub fn columns(&self) -> [(&'static str, f64); 6] {
        [
            ("rel", self.rel),
            ("log10", self.log10),
            ("rms", self.rms),
            ("sigma1", self.sigma[0]),
            ("sigma2", self.sigma[1]),
            ("sigma3", self.sigma[2]),
        ]
    }
}

/// `1 / max(d, DISPARITY_FLOOR)` per pixel.
pub fn disparity_to_depth(d: &DisparityMap) -> ScalarField {
    ScalarField::new(
        d.shape(),
        d.as_slice()
            .iter()
            .map(|&x| 1.0 / x.max(DISPARITY_FLOOR))
            .collect(),
    )
    .expect("positive finite depth")
}

pub fn evaluate_depth(
    pred: &ScalarField,
    gt: &ScalarField,
    mask: Option<&ObjectMask>,
    alignment: Alignment,
) -> Result<DepthEvalReport> {
    gt.shape().check(pred.shape())?;
    if let Some(m) = mask {
        gt.shape().check(m.shape())?;
    }
    let mut pairs = Vec::new();
    for (i, (&p, &g)) in pred.as_slice().iter().zip(gt.as_slice()).enumerate() {
        if mask.is_some_and(|m| !m.contains(i)) {
            continue;
        }
        for (name, x) in [("prediction", p), ("ground truth", g)] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::NonPositiveDepth(format!(
                    "{name} depth {x} at pixel {i}"
                )));
            }
        }
        pairs.push((p, g));
    }
    if pairs.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let scale = match alignment {
        Alignment::None => 1.0,
        Alignment::MedianRatio => {
            let ratios: Vec<f64> = pairs.iter().map(|(p, g)| g / p).collect();
            median(&ratios)
        }
    };
    let n = pairs.len() as f64;
    let (mut rel, mut log10, mut sq) = (0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for &(p, g) in &pairs {
        let p = p * scale;
        rel += (p - g).abs() / g;
        log10 += (p / g).log10().abs();
        sq += (p - g) * (p - g);
        let worst = (p / g).max(g / p);
        for (i, h) in hits.iter_mut().enumerate() {
            if worst < SIGMA_BASE.powi(i as i32 + 1) {
                *h += 1;
            }
        }
    }
    Ok(DepthEvalReport {
        rel: rel / n,
        log10: log10 / n,
        rms: (sq / n).sqrt(),
        sigma: hits.map(|h| h as f64 / n),
        n_pixels: pairs.len(),
        scale_applied: scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageShape;
    use proptest::prelude::*;

    fn field(values: Vec<f64>) -> ScalarField {
        ScalarField::new(ImageShape::new(1, values.len()).unwrap(), values).unwrap()
    }

    fn gt() -> ScalarField {
        field(vec![1.0, 2.5, 3.0, 7.25, 0.4, 12.0])
    }

    #[test]
    fn identical_prediction() {
        let r = evaluate_depth(&gt(), &gt(), None, Alignment::None).unwrap();
        assert_eq!((r.rel, r.log10, r.rms), (0.0, 0.0, 0.0));
        assert_eq!(r.sigma, [1.0; 3]);
        assert_eq!(r.n_pixels, 6);
    }

    #[test]
    fn doubled_prediction_unaligned() {
        let g = gt();
        let r = evaluate_depth(&g.map(|x| 2.0 * x), &g, None, Alignment::None).unwrap();
        assert!((r.rel - 1.0).abs() < 1e-12);
        assert!((r.log10 - 2f64.log10()).abs() < 1e-12);
        assert_eq!(r.sigma, [0.0; 3]);
        assert_eq!(r.scale_applied, 1.0);
    }

    #[test]
    fn doubled_prediction_aligned() {
        let g = gt();
        let r = evaluate_depth(&g.map(|x| 2.0 * x), &g, None, Alignment::MedianRatio).unwrap();
        assert_eq!((r.rel, r.log10, r.rms), (0.0, 0.0, 0.0));
        assert_eq!(r.sigma, [1.0; 3]);
        assert_eq!(r.scale_applied, 0.5);
    }

    #[test]
    fn threshold_boundaries() {
        // ratios 1.2, 1.5, 1.9, 2.5
        let g = field(vec![1.0; 4]);
        let p = field(vec![1.2, 1.5, 1.9, 2.5]);
        let r = evaluate_depth(&p, &g, None, Alignment::None).unwrap();
        assert_eq!(r.sigma, [0.25, 0.5, 0.75]);
    }

    #[test]
    fn mask_selects_pixels() {
        let g = gt();
        let mut p = g.as_slice().to_vec();
        p[0] = 100.0;
        let shape = g.shape();
        let m = ObjectMask::from_fn(shape, |_, c| c != 0);
        let r = evaluate_depth(&field(p), &g, Some(&m), Alignment::None).unwrap();
        assert_eq!(r.rel, 0.0);
        assert_eq!(r.n_pixels, 5);
    }

    #[test]
    fn errors() {
        let g = gt();
        let empty = ObjectMask::from_fn(g.shape(), |_, _| false);
        assert!(matches!(
            evaluate_depth(&g, &g, Some(&empty), Alignment::None),
            Err(Error::NoValidPixels)
        ));
        let mut bad = g.as_slice().to_vec();
        bad[2] = 0.0;
        assert!(matches!(
            evaluate_depth(&field(bad), &g, None, Alignment::None),
            Err(Error::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn disparity_floor() {
        let d = DisparityMap::new(ImageShape::new(1, 3).unwrap(), vec![0.0, 0.5, 4.0]).unwrap();
        assert_eq!(disparity_to_depth(&d).as_slice(), &[1e6, 2.0, 0.25]);
    }

    proptest! {
        #[test]
        fn aligned_metrics_ignore_global_scale(
            vals in prop::collection::vec((0.1f64..50.0, 0.1f64..50.0), 1..40),
            k in 0.01f64..100.0,
        ) {
            let p = field(vals.iter().map(|v| v.0).collect());
            let g = field(vals.iter().map(|v| v.1).collect());
            let a = evaluate_depth(&p, &g, None, Alignment::MedianRatio).unwrap();
            let b = evaluate_depth(&p.map(|x| k * x), &g, None, Alignment::MedianRatio).unwrap();
            prop_assert!((a.rel - b.rel).abs() < 1e-9);
            prop_assert!((a.log10 - b.log10).abs() < 1e-9);
            prop_assert!((a.rms - b.rms).abs() < 1e-9 * (1.0 + a.rms));
            prop_assert!(a.sigma[0] <= a.sigma[1] && a.sigma[1] <= a.sigma[2]);
        }

        #[test]
        fn metrics_ignore_pixel_order(
            vals in prop::collection::vec((0.1f64..50.0, 0.1f64..50.0), 1..40),
        ) {
            let p = field(vals.iter().map(|v| v.0).collect());
            let g = field(vals.iter().map(|v| v.1).collect());
            let pr = field(vals.iter().rev().map(|v| v.0).collect());
            let gr = field(vals.iter().rev().map(|v| v.1).collect());
            let a = evaluate_depth(&p, &g, None, Alignment::None).unwrap();
            let b = evaluate_depth(&pr, &gr, None, Alignment::None).unwrap();
            prop_assert!((a.rel - b.rel).abs() < 1e-12);
            prop_assert_eq!(a.sigma, b.sigma);
        }
    }
}
