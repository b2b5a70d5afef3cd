//! Projection of observed flow onto the span of a basis.
//!
//! The basis fields are normalized, stacked as the columns of a `2HW x n`
//! matrix `M`, and decomposed with a thin SVD `M = U S V^T`. Left singular
//! vectors whose singular value exceeds the threshold form `U_s`, and the
//! reconstruction is `U_s U_s^T flow`. The flow reconstruction loss is the
//! Euclidean norm of the residual.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{FieldLabel, FlowBasis};
use crate::geometry::{FlowField, ImageShape};
use crate::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Weight of the camera-only solve when both solves are combined.
pub const DEFAULT_CAMERA_LOSS_WEIGHT: f64 = 0.5;
/// Weight of the full (embedding) solve when both solves are combined.
pub const DEFAULT_FULL_LOSS_WEIGHT: f64 = 1.0;

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Keep `sigma > epsilon`.
    #[default]
    Absolute,
    /// Keep `sigma > epsilon * sigma_max`.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub epsilon: f64,
    pub mode: ThresholdMode,
}

impl Default for Threshold {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            mode: ThresholdMode::Absolute,
        }
    }
}

impl Threshold {
    pub fn absolute(epsilon: f64) -> Self {
        Self {
            epsilon,
            mode: ThresholdMode::Absolute,
        }
    }

    pub fn cutoff(&self, sigma_max: f64) -> f64 {
        match self.mode {
            ThresholdMode::Absolute => self.epsilon,
            ThresholdMode::Relative => self.epsilon * sigma_max,
        }
    }
}

/// Normalized basis columns plus the scale applied to each.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    shape: ImageShape,
    matrix: DMatrix<f64>,
    labels: Vec<FieldLabel>,
    scales: Vec<f64>,
}

impl BasisMatrix {
    /// Builds a matrix from already-normalized columns.
    pub fn from_columns(
        shape: ImageShape,
        matrix: DMatrix<f64>,
        labels: Vec<FieldLabel>,
        scales: Vec<f64>,
    ) -> Result<Self> {
        if matrix.ncols() == 0 {
            return Err(Error::EmptyBasis);
        }
        if matrix.nrows() != shape.flow_len() {
            return Err(Error::LengthMismatch {
                expected: shape.flow_len(),
                actual: matrix.nrows(),
            });
        }
        if labels.len() != matrix.ncols() || scales.len() != matrix.ncols() {
            return Err(Error::LengthMismatch {
                expected: matrix.ncols(),
                actual: labels.len().min(scales.len()),
            });
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("basis matrix"));
        }
        Ok(Self {
            shape,
            matrix,
            labels,
            scales,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn labels(&self) -> &[FieldLabel] {
        &self.labels
    }

    /// Normalization multiplier of each column.
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Stacks the normalized fields of `basis` as matrix columns, in basis order.
pub fn assemble(basis: &FlowBasis) -> Result<BasisMatrix> {
    if basis.is_empty() {
        return Err(Error::EmptyBasis);
    }
    let shape = basis.shape();
    let mut m = DMatrix::zeros(shape.flow_len(), basis.len());
    for (j, f) in basis.fields().iter().enumerate() {
        for (dst, src) in m.column_mut(j).iter_mut().zip(f.field.as_slice()) {
            *dst = f.scale * src;
        }
    }
    BasisMatrix::from_columns(
        shape,
        m,
        basis.labels(),
        basis.fields().iter().map(|f| f.scale).collect(),
    )
}

/// Thin SVD of a basis matrix with the retained / dropped split.
#[derive(Debug, Clone)]
pub struct Orthonormalized {
    shape: ImageShape,
    labels: Vec<FieldLabel>,
    scales: Vec<f64>,
    /// All `n` left singular vectors, singular values descending.
    u: DMatrix<f64>,
    singular_values: DVector<f64>,
    /// `n x n`, columns are right singular vectors.
    v: DMatrix<f64>,
    rank: usize,
    cutoff: f64,
}

/// Decomposes `m` and keeps the singular directions above the threshold.
pub fn orthonormalize(m: &BasisMatrix, threshold: Threshold) -> Result<Orthonormalized> {
    let n = m.ncols();
    let svd = m
        .matrix
        .clone()
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or(Error::SvdNonConvergence)?;
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::SvdNonConvergence),
    };
    // nalgebra returns at most min(rows, cols) singular values; pad for 2HW < n.
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma = DVector::from_iterator(k, order.iter().map(|&i| svd.singular_values[i]));
    let u = DMatrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let v = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| v_t.row(i).transpose())
            .collect::<Vec<_>>(),
    );
    debug_assert_eq!(v.nrows(), n);
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let cutoff = threshold.cutoff(sigma_max);
    let rank = sigma.iter().filter(|&&s| s > cutoff).count();
    Ok(Orthonormalized {
        shape: m.shape,
        labels: m.labels.clone(),
        scales: m.scales.clone(),
        u,
        singular_values: sigma,
        v,
        rank,
        cutoff,
    })
}

impl Orthonormalized {
    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn labels(&self) -> &[FieldLabel] {
        &self.labels
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Number of basis columns `n`.
    pub fn ncols(&self) -> usize {
        self.labels.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Absolute singular-value cutoff that was applied.
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// All singular values, descending.
    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    /// Singular values at or below the cutoff.
    pub fn dropped(&self) -> &[f64] {
        &self.singular_values.as_slice()[self.rank..]
    }

    /// The retained left singular vectors `U_s`.
    pub fn retained_u(&self) -> DMatrix<f64> {
        self.u.columns(0, self.rank).into_owned()
    }

    pub(crate) fn u_all(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub(crate) fn v_all(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// `U_s U_s^T x` for a flattened flow column.
    pub fn project_column(&self, x: &DVector<f64>) -> DVector<f64> {
        let us = self.u.columns(0, self.rank);
        us * (us.transpose() * x)
    }

    pub fn project(&self, flow: &FlowField) -> Result<ProjectionResult> {
        project(self, flow)
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub reconstructed: FlowField,
    /// `|flow - reconstructed|`, the flow reconstruction loss in pixels.
    pub residual_norm: f64,
    /// Minimum-norm least-squares coefficients of the unnormalized basis fields.
    pub coefficients: Vec<f64>,
    pub labels: Vec<FieldLabel>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

impl ProjectionResult {
    /// True when the basis was rank deficient, so coefficients are not unique.
    pub fn is_degenerate(&self) -> bool {
        self.rank < self.labels.len()
    }

    pub fn coefficient(&self, label: FieldLabel) -> Option<f64> {
        self.labels
            .iter()
            .position(|&l| l == label)
            .map(|i| self.coefficients[i])
    }
}

/// Projects `flow` onto the retained subspace.
pub fn project(orth: &Orthonormalized, flow: &FlowField) -> Result<ProjectionResult> {
    orth.shape.check(flow.shape())?;
    let x = flow.flatten();
    let us = orth.u.columns(0, orth.rank);
    let a = us.transpose() * &x;
    let recon = us * &a;
    let residual_norm = (&x - &recon).norm();

    let mut coefficients = vec![0.0; orth.ncols()];
    for (i, ai) in a.iter().enumerate() {
        let w = ai / orth.singular_values[i];
        for (j, c) in coefficients.iter_mut().enumerate() {
            *c += orth.v[(j, i)] * w;
        }
    }
    for (c, s) in coefficients.iter_mut().zip(&orth.scales) {
        *c *= s;
    }

    Ok(ProjectionResult {
        reconstructed: FlowField::unflatten(orth.shape, &recon)?,
        residual_norm,
        coefficients,
        labels: orth.labels.clone(),
        rank: orth.rank,
        singular_values: orth.singular_values.iter().copied().collect(),
    })
}

/// Assemble, orthonormalize and project in one call.
pub fn project_onto(
    basis: &FlowBasis,
    flow: &FlowField,
    threshold: Threshold,
) -> Result<ProjectionResult> {
    basis.shape().check(flow.shape())?;
    let orth = orthonormalize(&assemble(basis)?, threshold)?;
    project(&orth, flow)
}

/// `|flow - U_s U_s^T flow|`.
pub fn flow_reconstruction_loss(
    basis: &FlowBasis,
    flow: &FlowField,
    threshold: Threshold,
) -> Result<f64> {
    Ok(project_onto(basis, flow, threshold)?.residual_norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub camera: f64,
    pub full: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            camera: DEFAULT_CAMERA_LOSS_WEIGHT,
            full: DEFAULT_FULL_LOSS_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualLoss {
    pub camera_loss: f64,
    pub full_loss: f64,
    pub total: f64,
}

/// Projects the same flow onto a camera-only basis and a full basis and
/// combines the two reconstruction losses.
pub fn dual_solve_loss(
    camera: &FlowBasis,
    full: &FlowBasis,
    flow: &FlowField,
    threshold: Threshold,
    weights: LossWeights,
) -> Result<DualLoss> {
    let camera_loss = flow_reconstruction_loss(camera, flow, threshold)?;
    let full_loss = flow_reconstruction_loss(full, flow, threshold)?;
    Ok(DualLoss {
        camera_loss,
        full_loss,
        total: weights.camera * camera_loss + weights.full * full_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{camera_basis, rotation_basis_unknown_focal, Axis, BasisField, CameraModel};
    use crate::geometry::{make_grid, DisparityMap, Intrinsics, PrincipalPoint};

    fn setup(h: usize, w: usize) -> (ImageShape, FlowBasis) {
        let s = ImageShape::new(h, w).unwrap();
        let grid = make_grid(s);
        let k = Intrinsics::centered(s, 1.2 * w as f64).unwrap();
        let d = DisparityMap::new(
            s,
            (0..s.num_pixels())
                .map(|i| 0.2 + 0.5 * ((i * 7919) % 13) as f64 / 13.0)
                .collect(),
        )
        .unwrap();
        (s, camera_basis(&grid, &CameraModel::Known(k), &d).unwrap())
    }

    #[test]
    fn assemble_dimensions() {
        let (_, b) = setup(8, 8);
        let m = assemble(&b).unwrap();
        assert_eq!((m.matrix().nrows(), m.matrix().ncols()), (128, 6));
        assert!(matches!(
            assemble(&FlowBasis::new(b.shape())),
            Err(Error::EmptyBasis)
        ));
    }

    #[test]
    fn unknown_focal_qvga_matrix() {
        let s = ImageShape::new(240, 320).unwrap();
        let grid = make_grid(s);
        let d = DisparityMap::constant(s, 0.25).unwrap();
        let b = camera_basis(
            &grid,
            &CameraModel::UnknownFocal(PrincipalPoint::centered(s)),
            &d,
        )
        .unwrap();
        let m = assemble(&b).unwrap();
        assert_eq!((m.matrix().nrows(), m.matrix().ncols()), (153600, 8));
    }

    #[test]
    fn zero_column_preserved_and_dropped() {
        let (s, b) = setup(6, 6);
        let mut fields = b.fields().to_vec();
        fields[0].field = FlowField::zeros(s);
        let b = FlowBasis::from_fields(s, fields).unwrap();
        let m = assemble(&b).unwrap();
        assert!(m.matrix().column(0).iter().all(|&x| x == 0.0));
        let o = orthonormalize(&m, Threshold::default()).unwrap();
        assert_eq!(o.rank(), 5);
        assert_eq!(o.dropped().len(), 1);
    }

    #[test]
    fn orthonormal_retained_vectors() {
        let (_, b) = setup(9, 7);
        let o = orthonormalize(&assemble(&b).unwrap(), Threshold::default()).unwrap();
        let us = o.retained_u();
        let g = us.transpose() * &us;
        let err = (g - DMatrix::identity(o.rank(), o.rank())).abs().max();
        assert!(err < 1e-8, "{err}");
        assert!(o.singular_values().iter().take(o.rank()).all(|&s| s > 1e-5));
    }

    #[test]
    fn duplicate_column_drops_rank_by_one() {
        let (s, b) = setup(8, 8);
        let mut fields = b.fields().to_vec();
        let mut dup = fields[0].clone();
        dup.label = crate::basis::FieldLabel::Masked {
            object: 0,
            axis: Axis::Tx,
        };
        fields.push(dup);
        let b = FlowBasis::from_fields(s, fields).unwrap();
        let o = orthonormalize(&assemble(&b).unwrap(), Threshold::default()).unwrap();
        assert_eq!(o.rank(), 6);
        assert!(o.dropped()[0] <= 1e-5);
    }

    #[test]
    fn orthogonal_two_columns_keep_plane() {
        let s = ImageShape::new(2, 2).unwrap();
        let e = |i: usize| {
            let mut v = vec![0.0; 8];
            v[i] = 1.0;
            FlowField::new(s, v).unwrap()
        };
        let b = FlowBasis::from_fields(
            s,
            vec![
                BasisField {
                    label: FieldLabel::Camera(Axis::Rx),
                    field: e(1),
                    scale: 1.0,
                },
                BasisField {
                    label: FieldLabel::Camera(Axis::Ry),
                    field: e(4),
                    scale: 1.0,
                },
            ],
        )
        .unwrap();
        let o = orthonormalize(&assemble(&b).unwrap(), Threshold::default()).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let p = o.project_column(&x);
        let mut want = DVector::zeros(8);
        want[1] = 2.0;
        want[4] = 5.0;
        assert!((p - want).norm() < 1e-14);
    }

    #[test]
    fn in_span_flow_recovers_coefficients() {
        let (_, b) = setup(8, 10);
        let tx = &b.fields()[0].field;
        let rz = &b.fields()[5].field;
        let flow = tx.scaled(3.0).axpy(-0.2, rz).unwrap();
        let r = project_onto(&b, &flow, Threshold::default()).unwrap();
        assert!(r.residual_norm <= 1e-8 * flow.norm());
        let want = [3.0, 0.0, 0.0, 0.0, 0.0, -0.2];
        for (c, w) in r.coefficients.iter().zip(want) {
            assert!((c - w).abs() < 1e-9, "{c} vs {w}");
        }
    }

    #[test]
    fn orthogonal_flow_projects_to_zero() {
        let s = ImageShape::new(4, 4).unwrap();
        let grid = make_grid(s);
        let r1y =
            rotation_basis_unknown_focal(&grid, &PrincipalPoint::centered(s)).unwrap()[2].clone();
        let b = FlowBasis::from_fields(s, vec![r1y]).unwrap();
        let flow = FlowField::from_fn(s, |_| [0.0, 1.5]);
        let r = project_onto(&b, &flow, Threshold::default()).unwrap();
        assert!(r.reconstructed.norm() < 1e-15);
        assert!((r.residual_norm - flow.norm()).abs() < 1e-14);
    }

    #[test]
    fn zero_flow_and_zero_basis() {
        let (s, b) = setup(5, 5);
        let r = project_onto(&b, &FlowField::zeros(s), Threshold::default()).unwrap();
        assert_eq!(r.residual_norm, 0.0);
        assert!(r.coefficients.iter().all(|&c| c == 0.0));

        let mut fields = b.fields().to_vec();
        for f in &mut fields {
            f.field = FlowField::zeros(s);
        }
        let zb = FlowBasis::from_fields(s, fields).unwrap();
        let flow = FlowField::from_fn(s, |i| [i as f64, 1.0]);
        let loss = flow_reconstruction_loss(&zb, &flow, Threshold::default()).unwrap();
        assert_eq!(loss, flow.norm());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (_, b) = setup(4, 4);
        let other = FlowField::zeros(ImageShape::new(4, 5).unwrap());
        assert!(matches!(
            project_onto(&b, &other, Threshold::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relative_threshold_mode() {
        let (_, b) = setup(6, 6);
        let m = assemble(&b).unwrap();
        let abs = orthonormalize(&m, Threshold::default()).unwrap();
        let rel = orthonormalize(
            &m,
            Threshold {
                epsilon: 0.5,
                mode: ThresholdMode::Relative,
            },
        )
        .unwrap();
        let smax = abs.singular_values()[0];
        assert_eq!(rel.cutoff(), 0.5 * smax);
        assert!(rel.rank() < abs.rank());
    }

    #[test]
    fn dual_loss_weights() {
        let (s, b) = setup(6, 6);
        let flow = FlowField::from_fn(s, |i| [(i % 3) as f64, (i % 5) as f64]);
        let l = flow_reconstruction_loss(&b, &flow, Threshold::default()).unwrap();
        let dual =
            dual_solve_loss(&b, &b, &flow, Threshold::default(), LossWeights::default()).unwrap();
        assert!((dual.total - 1.5 * l).abs() < 1e-12);
    }
}
