//! Embedding visualizations and nearest-seed segmentation.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::ObjectEmbedding;
use crate::geometry::{ImageShape, ScalarField};
use crate::{Error, Result};

/// Components with variance at or below this are flagged as degenerate.
pub const ZERO_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPca {
    pub shape: ImageShape,
    pub k: usize,
    /// Per-pixel component scores, pixel-major, `n * k`.
    pub scores: Vec<f64>,
    /// Scores mapped affinely to `[0, 1]` per channel; flat channels become 0.5.
    pub channels: Vec<f64>,
    /// Variance along each component, descending.
    pub explained_variance: Vec<f64>,
    pub zero_variance: Vec<bool>,
}

impl EmbeddingPca {
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.channels.chunks_exact(self.k).map(|px| px[c]).collect()
    }
}

/// Principal components of the pixel population of `phi`.
pub fn embedding_pca(phi: &ObjectEmbedding, k: usize) -> Result<EmbeddingPca> {
    let a = phi.dim();
    if k == 0 || k > a {
        return Err(Error::InvalidArgument(format!(
            "PCA output dimension {k} must lie in 1..={a}"
        )));
    }
    let n = phi.shape().num_pixels();
    let x = DMatrix::from_row_slice(n, a, phi.as_slice());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, a, |r, c| x[(r, c)] - mean[c]);
    let cov = centered.tr_mul(&centered) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..a).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let mut axes = DMatrix::zeros(a, k);
    let mut explained_variance = Vec::with_capacity(k);
    for (out, &i) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        // fix the sign so the largest entry is positive
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.neg_mut();
        }
        axes.set_column(out, &v);
        explained_variance.push(eig.eigenvalues[i].max(0.0));
    }
    let proj = &centered * &axes;
    let mut scores = vec![0.0; n * k];
    for r in 0..n {
        for c in 0..k {
            scores[r * k + c] = proj[(r, c)];
        }
    }
    let zero_variance: Vec<bool> = explained_variance
        .iter()
        .map(|&v| v <= ZERO_VARIANCE)
        .collect();
    let mut channels = vec![0.5; n * k];
    for c in 0..k {
        if zero_variance[c] {
            continue;
        }
        let col = proj.column(c);
        let (lo, hi) = (col.min(), col.max());
        for r in 0..n {
            channels[r * k + c] = (proj[(r, c)] - lo) / (hi - lo);
        }
    }
    Ok(EmbeddingPca {
        shape: phi.shape(),
        k,
        scores,
        channels,
        explained_variance,
        zero_variance,
    })
}

/// Frobenius norm of the finite-difference spatial Jacobian of `phi`.
/// Central differences inside, one-sided at the border.
pub fn embedding_gradient_magnitude(phi: &ObjectEmbedding) -> ScalarField {
    let shape = phi.shape();
    let (h, w) = (shape.height, shape.width);
    let diff = |a: usize, b: usize, span: f64, c: usize| (phi.at(a)[c] - phi.at(b)[c]) / span;
    let neighbours = |i: usize, len: usize| -> Option<(usize, usize, f64)> {
        match len {
            1 => None,
            _ if i == 0 => Some((1, 0, 1.0)),
            _ if i == len - 1 => Some((i, i - 1, 1.0)),
            _ => Some((i + 1, i - 1, 2.0)),
        }
    };
    let data = (0..shape.num_pixels())
        .map(|p| {
            let (row, col) = (p / w, p % w);
            let mut sum = 0.0;
            for c in 0..phi.dim() {
                if let Some((a, b, s)) = neighbours(col, w) {
                    sum += diff(row * w + a, row * w + b, s, c).powi(2);
                }
                if let Some((a, b, s)) = neighbours(row, h) {
                    sum += diff(a * w + col, b * w + col, s, c).powi(2);
                }
            }
            sum.sqrt()
        })
        .collect();
    ScalarField::new(shape, data).expect("finite gradient")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedPoint {
    /// Pixel coordinates; the seed samples the pixel containing `(u, v)`.
    pub u: f64,
    pub v: f64,
    pub label: u32,
}

impl SeedPoint {
    pub fn new(u: f64, v: f64, label: u32) -> Self {
        Self { u, v, label }
    }

    fn pixel(&self, shape: ImageShape) -> Result<usize> {
        let (u, v) = (self.u, self.v);
        if !(u >= 0.0 && v >= 0.0 && u < shape.width as f64 && v < shape.height as f64) {
            return Err(Error::InvalidArgument(format!(
                "seed ({u}, {v}) lies outside the {}x{} image",
                shape.height, shape.width
            )));
        }
        Ok(v as usize * shape.width + u as usize)
    }
}

/// Parses `label u v` lines. Blank lines and `#` comments are skipped.
pub fn parse_seeds(text: &str) -> Result<Vec<SeedPoint>> {
    let mut seeds = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::InvalidArgument(format!("seed line {}: expected `label u v`", n + 1));
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [label, u, v] = parts.as_slice() else {
            return Err(bad());
        };
        let label = label.parse().map_err(|_| bad())?;
        let u: f64 = u.parse().map_err(|_| bad())?;
        let v: f64 = v.parse().map_err(|_| bad())?;
        if !(u.is_finite() && v.is_finite()) {
            return Err(bad());
        }
        seeds.push(SeedPoint::new(u, v, label));
    }
    Ok(seeds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilateralConfig {
    /// Weight on squared pixel distance, measured in image diagonals.
    pub lambda_spatial: f64,
    pub lambda_embed: f64,
}

impl Default for BilateralConfig {
    fn default() -> Self {
        Self {
            lambda_spatial: 1.0,
            lambda_embed: 10.0,
        }
    }
}

impl BilateralConfig {
    pub fn new(lambda_spatial: f64, lambda_embed: f64) -> Result<Self> {
        let ok = |x: f64| x >= 0.0 && x.is_finite();
        if !ok(lambda_spatial) || !ok(lambda_embed) || lambda_spatial + lambda_embed == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bilateral weights ({lambda_spatial}, {lambda_embed}) must be non-negative and not both zero"
            )));
        }
        Ok(Self {
            lambda_spatial,
            lambda_embed,
        })
    }
}

/// Assigns each pixel the label of its nearest seed in bilateral space.
/// Ties go to the seed listed first.
pub fn segment_from_seeds(
    phi: &ObjectEmbedding,
    seeds: &[SeedPoint],
    config: BilateralConfig,
) -> Result<Vec<u32>> {
    let config = BilateralConfig::new(config.lambda_spatial, config.lambda_embed)?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one seed is required".into(),
        ));
    }
    let shape = phi.shape();
    let w = shape.width;
    let diag2 = shape.diagonal().powi(2);
    let anchors = seeds
        .iter()
        .map(|s| Ok((s, phi.at(s.pixel(shape)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..shape.num_pixels())
        .into_par_iter()
        .map(|p| {
            let (u, v) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            let e = phi.at(p);
            let mut best = (f64::INFINITY, 0u32);
            for (s, se) in &anchors {
                let spatial = ((u - s.u).powi(2) + (v - s.v).powi(2)) / diag2;
                let embed: f64 = e.iter().zip(*se).map(|(a, b)| (a - b).powi(2)).sum();
                let dist = config.lambda_spatial * spatial + config.lambda_embed * embed;
                if dist < best.0 {
                    best = (dist, s.label);
                }
            }
            best.1
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape() -> ImageShape {
        ImageShape::new(8, 10).unwrap()
    }

    fn split_labels(s: ImageShape) -> Vec<usize> {
        (0..s.num_pixels())
            .map(|p| usize::from(p % s.width >= s.width / 2))
            .collect()
    }

    fn constant(s: ImageShape) -> ObjectEmbedding {
        let v = [0.6, 0.0, 0.8];
        ObjectEmbedding::new(
            s,
            3,
            v.iter().cycle().take(3 * s.num_pixels()).copied().collect(),
        )
        .unwrap()
    }

    #[test]
    fn pca_of_constant_is_flagged() {
        let pca = embedding_pca(&constant(shape()), 2).unwrap();
        assert_eq!(pca.zero_variance, vec![true, true]);
        assert!(pca.explained_variance.iter().all(|&v| v <= ZERO_VARIANCE));
        assert!(pca.channels.iter().all(|&c| c == 0.5));
    }

    #[test]
    fn pca_two_regions_sign_split() {
        let s = shape();
        let labels = split_labels(s);
        let phi = ObjectEmbedding::from_labels(s, 6, &labels).unwrap();
        let pca = embedding_pca(&phi, 3).unwrap();
        assert!(pca.explained_variance[0] > 0.1);
        assert!(pca.zero_variance[1] && pca.zero_variance[2]);
        let sign0 = pca.scores[0] > 0.0;
        for (p, &l) in labels.iter().enumerate() {
            assert_eq!(pca.scores[p * 3] > 0.0, (l == labels[0]) == sign0);
        }
        assert_eq!(pca.channels.len(), 3 * s.num_pixels());
        let ch = pca.channel(0);
        assert!(ch.iter().all(|&c| c == 0.0 || c == 1.0));
    }

    #[test]
    fn pca_rejects_bad_k() {
        let phi = constant(shape());
        assert!(embedding_pca(&phi, 0).is_err());
        assert!(embedding_pca(&phi, 4).is_err());
    }

    #[test]
    fn pca_permutation_invariant_up_to_sign() {
        let s = shape();
        let n = s.num_pixels();
        let raw: Vec<f64> = (0..n * 4)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) + 0.1)
            .collect();
        let phi = ObjectEmbedding::renormalize(s, 4, raw.clone()).unwrap();
        let perm = [2, 0, 3, 1];
        let permuted: Vec<f64> = raw
            .chunks_exact(4)
            .flat_map(|px| perm.map(|j| px[j]))
            .collect();
        let phi2 = ObjectEmbedding::renormalize(s, 4, permuted).unwrap();
        let a = embedding_pca(&phi, 2).unwrap();
        let b = embedding_pca(&phi2, 2).unwrap();
        for c in 0..2 {
            assert!((a.explained_variance[c] - b.explained_variance[c]).abs() < 1e-12);
            let same = (0..n).all(|p| (a.scores[p * 2 + c] - b.scores[p * 2 + c]).abs() < 1e-9);
            let flip = (0..n).all(|p| (a.scores[p * 2 + c] + b.scores[p * 2 + c]).abs() < 1e-9);
            assert!(same || flip);
        }
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = embedding_gradient_magnitude(&constant(shape()));
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_two_regions_only_on_boundary() {
        let s = shape();
        let phi = ObjectEmbedding::from_labels(s, 2, &split_labels(s)).unwrap();
        let g = embedding_gradient_magnitude(&phi);
        for (p, &x) in g.as_slice().iter().enumerate() {
            let col = p % s.width;
            if col == 4 || col == 5 {
                assert!(x > 0.0);
            } else {
                assert_eq!(x, 0.0);
            }
        }
    }

    #[test]
    fn gradient_of_smooth_rotation_is_uniform_rate() {
        let s = ImageShape::new(6, 40).unwrap();
        let rate = 0.01;
        let data: Vec<f64> = (0..s.num_pixels())
            .flat_map(|p| {
                let t = rate * (p % s.width) as f64;
                [t.cos(), t.sin()]
            })
            .collect();
        let g = embedding_gradient_magnitude(&ObjectEmbedding::new(s, 2, data).unwrap());
        for &x in g.as_slice() {
            // central chord gives sin(rate), off by rate^2 / 6 relative
            assert!((x - rate).abs() < 1e-4 * rate);
        }
    }

    #[test]
    fn single_seed_labels_everything() {
        let s = shape();
        let phi = ObjectEmbedding::from_labels(s, 2, &split_labels(s)).unwrap();
        let labels = segment_from_seeds(
            &phi,
            &[SeedPoint::new(1.5, 2.5, 7)],
            BilateralConfig::default(),
        )
        .unwrap();
        assert!(labels.iter().all(|&l| l == 7));
    }

    #[test]
    fn embedding_only_recovers_regions() {
        let s = shape();
        let truth = split_labels(s);
        let phi = ObjectEmbedding::from_labels(s, 2, &truth).unwrap();
        let seeds = [SeedPoint::new(0.5, 0.5, 0), SeedPoint::new(9.5, 7.5, 1)];
        let labels =
            segment_from_seeds(&phi, &seeds, BilateralConfig::new(0.0, 1.0).unwrap()).unwrap();
        assert!(labels.iter().zip(&truth).all(|(&a, &b)| a as usize == b));
    }

    #[test]
    fn spatial_only_is_voronoi() {
        let s = shape();
        let phi = constant(s);
        let seeds = [SeedPoint::new(0.5, 0.5, 3), SeedPoint::new(9.5, 0.5, 4)];
        let labels =
            segment_from_seeds(&phi, &seeds, BilateralConfig::new(1.0, 0.0).unwrap()).unwrap();
        for (p, &l) in labels.iter().enumerate() {
            assert_eq!(l, if p % s.width < 5 { 3 } else { 4 });
        }
    }

    #[test]
    fn ties_go_to_first_seed() {
        let s = shape();
        let phi = constant(s);
        let seeds = [SeedPoint::new(2.5, 2.5, 9), SeedPoint::new(2.5, 2.5, 1)];
        let labels = segment_from_seeds(&phi, &seeds, BilateralConfig::default()).unwrap();
        assert!(labels.iter().all(|&l| l == 9));
    }

    #[test]
    fn segment_errors() {
        let phi = constant(shape());
        assert!(segment_from_seeds(&phi, &[], BilateralConfig::default()).is_err());
        assert!(segment_from_seeds(
            &phi,
            &[SeedPoint::new(10.0, 0.0, 0)],
            BilateralConfig::default()
        )
        .is_err());
        assert!(BilateralConfig::new(0.0, 0.0).is_err());
        assert!(BilateralConfig::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn seed_file_parsing() {
        let seeds = parse_seeds("# label u v\n0 1.5 2\n\n3 4 5.25 # car\n").unwrap();
        assert_eq!(
            seeds,
            vec![SeedPoint::new(1.5, 2.0, 0), SeedPoint::new(4.0, 5.25, 3)]
        );
        assert!(parse_seeds("1 2").is_err());
        assert!(parse_seeds("a 1 2").is_err());
        assert!(parse_seeds("1 nan 2").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn segmentation_invariant_to_orthogonal_transform(
            raw in prop::collection::vec(-1.0f64..1.0, 6 * 20 * 3),
            angles in prop::collection::vec(-3.0f64..3.0, 3),
            seeds in prop::collection::vec((0.0f64..20.0, 0.0f64..6.0), 1..5),
        ) {
            let s = ImageShape::new(6, 20).unwrap();
            let raw: Vec<f64> = raw.iter().map(|x| x + 1e-3).collect();
            let phi = ObjectEmbedding::renormalize(s, 3, raw).unwrap();
            let rot = nalgebra::Rotation3::from_euler_angles(angles[0], angles[1], angles[2]);
            let rotated: Vec<f64> = phi
                .as_slice()
                .chunks_exact(3)
                .flat_map(|px| {
                    let r = rot * nalgebra::Vector3::new(px[0], px[1], px[2]);
                    [r.x, r.y, r.z]
                })
                .collect();
            let phi2 = ObjectEmbedding::renormalize(s, 3, rotated).unwrap();
            let seeds: Vec<SeedPoint> = seeds
                .iter()
                .enumerate()
                .map(|(i, &(u, v))| SeedPoint::new(u, v, i as u32))
                .collect();
            let a = segment_from_seeds(&phi, &seeds, BilateralConfig::default()).unwrap();
            let b = segment_from_seeds(&phi2, &seeds, BilateralConfig::default()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
