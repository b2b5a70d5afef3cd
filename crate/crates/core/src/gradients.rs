//! Gradients of the flow reconstruction loss with respect to disparity and
//! instance embedding, plus the two training regularizers.
//!
//! Every basis column is linear in `d` and in each embedding channel, so the
//! loss gradient factors into `dL/dM` (the derivative with respect to the
//! assembled matrix) followed by a per-pixel contraction with the column
//! templates. `dL/dM` comes from the derivative of the truncated projector
//! `U_s U_s^T`; when no singular direction is dropped it reduces to the
//! variable-projection form `-r c^T / L`, with `r` the residual and `c` the
//! least-squares coefficients of the normalized columns.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, ColumnRecipe, ObjectEmbedding, Weight};
use crate::geometry::{DisparityMap, FlowField, ImageShape, PixelGrid};
use crate::projection::{orthonormalize, BasisMatrix, LossWeights, Orthonormalized, Threshold};
use crate::{Error, Result};

/// Guard band around the singular-value cutoff, as a multiple of epsilon.
pub const DEFAULT_GUARD_FACTOR: f64 = 10.0;
/// Weight of both regularizers in training.
pub const REGULARIZER_WEIGHT: f64 = 1e-6;
/// Pre-activation disparity above which the disparity regularizer is active.
pub const DISPARITY_ACTIVATION_LIMIT: f64 = 5.0;
/// Relative step of the central-difference oracle.
pub const FD_RELATIVE_STEP: f64 = 1e-4;

/// Loss definition: which basis, which observed flow, which threshold.
#[derive(Debug, Clone)]
pub struct LossProblem {
    pub spec: BasisSpec,
    pub grid: PixelGrid,
    pub target: FlowField,
    pub threshold: Threshold,
    pub guard_factor: f64,
    /// When set and `spec` carries an embedding, the loss is
    /// `camera * L(camera basis) + full * L(full basis)`.
    pub dual: Option<LossWeights>,
}

impl LossProblem {
    pub fn new(spec: BasisSpec, grid: PixelGrid, target: FlowField) -> Result<Self> {
        grid.shape().check(target.shape())?;
        Ok(Self {
            spec,
            grid,
            target,
            threshold: Threshold::default(),
            guard_factor: DEFAULT_GUARD_FACTOR,
            dual: None,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.grid.shape()
    }

    fn embedding_dim(&self) -> Option<usize> {
        self.spec.embedding_dim
    }

    fn check_raw(&self, d: &[f64], phi: Option<&[f64]>) -> Result<()> {
        let n = self.shape().num_pixels();
        if d.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: d.len(),
            });
        }
        match (self.embedding_dim(), phi) {
            (Some(dim), Some(phi)) if phi.len() != n * dim => Err(Error::LengthMismatch {
                expected: n * dim,
                actual: phi.len(),
            }),
            (Some(_), None) => Err(Error::InvalidArgument(
                "embedding basis requires an embedding".into(),
            )),
            _ => Ok(()),
        }
    }

    fn solves(&self) -> Vec<(f64, BasisSpec)> {
        match (self.spec.embedding_dim, self.dual) {
            (Some(_), Some(w)) => vec![
                (w.camera, BasisSpec::camera(self.spec.model)),
                (w.full, self.spec),
            ],
            _ => vec![(1.0, self.spec)],
        }
    }

    /// Loss on raw parameter arrays. No unit-norm check on `phi`, so the
    /// finite-difference oracle can perturb individual entries.
    pub fn loss_raw(&self, d: &[f64], phi: Option<&[f64]>) -> Result<f64> {
        self.check_raw(d, phi)?;
        let mut total = 0.0;
        for (w, spec) in self.solves() {
            let recipes = spec.recipes(&self.grid);
            let orth = decompose(
                &recipes,
                self.shape(),
                d,
                phi,
                spec.embedding_dim,
                self.threshold,
            )?;
            let x = self.target.flatten();
            total += w * (&x - orth.project_column(&x)).norm();
        }
        Ok(total)
    }

    /// Analytic gradient on raw parameter arrays.
    pub fn grad_raw(&self, d: &[f64], phi: Option<&[f64]>) -> Result<LossGradients> {
        self.check_raw(d, phi)?;
        let n = self.shape().num_pixels();
        let mut grad_d = vec![0.0; n];
        let mut grad_phi = self.embedding_dim().map(|dim| vec![0.0; n * dim]);
        let mut loss = 0.0;
        let x = self.target.flatten();
        for (w, spec) in self.solves() {
            let recipes = spec.recipes(&self.grid);
            let orth = decompose(
                &recipes,
                self.shape(),
                d,
                phi,
                spec.embedding_dim,
                self.threshold,
            )?;
            check_guard_band(&orth, self.guard_factor)?;
            let (l, g) = matrix_gradient(&orth, &x);
            loss += w * l;
            if l == 0.0 {
                continue;
            }
            contract(
                &recipes,
                &g,
                w,
                d,
                phi.zip(spec.embedding_dim),
                &mut grad_d,
                grad_phi.as_deref_mut(),
            );
        }
        Ok(LossGradients {
            shape: self.shape(),
            d_disparity: grad_d,
            d_embedding: grad_phi,
            loss_value: loss,
        })
    }

    pub fn loss(&self, d: &DisparityMap, phi: Option<&ObjectEmbedding>) -> Result<f64> {
        self.check_inputs(d, phi)?;
        self.loss_raw(d.as_slice(), phi.map(|p| p.as_slice()))
    }

    fn check_inputs(&self, d: &DisparityMap, phi: Option<&ObjectEmbedding>) -> Result<()> {
        self.shape().check(d.shape())?;
        if let Some(p) = phi {
            self.shape().check(p.shape())?;
            if Some(p.dim()) != self.embedding_dim() {
                return Err(Error::InvalidArgument(format!(
                    "embedding dimension {} does not match basis",
                    p.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Loss value and its gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGradients {
    pub shape: ImageShape,
    /// `dL/dd`, one entry per pixel.
    pub d_disparity: Vec<f64>,
    /// `dL/dphi`, pixel-major with `A` entries per pixel.
    pub d_embedding: Option<Vec<f64>>,
    pub loss_value: f64,
}

/// Gradient of the flow reconstruction loss at `(d, phi)`.
///
/// Fails with [`Error::NearThresholdSingularValue`] when a singular value is
/// within the guard band of the cutoff, where the retained rank (and with it
/// the loss) can jump.
pub fn loss_grad(
    d: &DisparityMap,
    phi: Option<&ObjectEmbedding>,
    problem: &LossProblem,
) -> Result<LossGradients> {
    problem.check_inputs(d, phi)?;
    problem.grad_raw(d.as_slice(), phi.map(|p| p.as_slice()))
}

fn decompose(
    recipes: &[ColumnRecipe],
    shape: ImageShape,
    d: &[f64],
    phi: Option<&[f64]>,
    dim: Option<usize>,
    threshold: Threshold,
) -> Result<Orthonormalized> {
    let rows = shape.flow_len();
    let mut m = DMatrix::zeros(rows, recipes.len());
    let phi = phi.zip(dim);
    for (j, r) in recipes.iter().enumerate() {
        let col = r.render(d, phi);
        for (dst, src) in m.column_mut(j).iter_mut().zip(&col) {
            *dst = r.scale * src;
        }
    }
    let bm = BasisMatrix::from_columns(
        shape,
        m,
        recipes.iter().map(|r| r.label).collect(),
        recipes.iter().map(|r| r.scale).collect(),
    )?;
    orthonormalize(&bm, threshold)
}

fn check_guard_band(orth: &Orthonormalized, factor: f64) -> Result<()> {
    let cutoff = orth.cutoff();
    let guard = factor * cutoff;
    if let Some(&sigma) = orth
        .singular_values()
        .iter()
        .find(|&&s| (s - cutoff).abs() <= guard)
    {
        return Err(Error::NearThresholdSingularValue {
            sigma,
            threshold: cutoff,
            guard,
        });
    }
    Ok(())
}

/// Loss and `dL/dM` for the normalized matrix behind `orth`.
fn matrix_gradient(orth: &Orthonormalized, x: &DVector<f64>) -> (f64, DMatrix<f64>) {
    let u = orth.u_all();
    let v = orth.v_all();
    let sigma = orth.singular_values();
    let rank = orth.rank();
    let k = sigma.len();
    let n = orth.ncols();

    let us = u.columns(0, rank);
    let recon = us * (us.transpose() * x);
    let r = x - recon;
    let loss = r.norm();
    let mut g = DMatrix::zeros(x.len(), n);
    if loss == 0.0 {
        return (0.0, g);
    }

    let proj = u.transpose() * x; // a_i for retained, b_j for dropped
    let r_perp = x - u * &proj;

    let mut c = DVector::zeros(n);
    for i in 0..rank {
        c += v.column(i) * (proj[i] / sigma[i]);
    }
    g.ger(1.0, &r_perp, &c, 0.0);

    for i in 0..rank {
        for j in rank..k {
            let (si, sj) = (sigma[i], sigma[j]);
            let w = proj[i] * proj[j] / (si * si - sj * sj);
            if w == 0.0 {
                continue;
            }
            g.ger(w * si, &u.column(j), &v.column(i), 1.0);
            if sj != 0.0 {
                g.ger(w * sj, &u.column(i), &v.column(j), 1.0);
            }
        }
    }
    g *= -1.0 / loss;
    (loss, g)
}

/// Chain rule from `dL/dM` to per-pixel disparity and embedding gradients.
fn contract(
    recipes: &[ColumnRecipe],
    g: &DMatrix<f64>,
    weight: f64,
    d: &[f64],
    phi: Option<(&[f64], usize)>,
    grad_d: &mut [f64],
    mut grad_phi: Option<&mut [f64]>,
) {
    for (k, r) in recipes.iter().enumerate() {
        let col = g.column(k);
        for p in 0..grad_d.len() {
            let gt = col[2 * p] * r.template[2 * p] + col[2 * p + 1] * r.template[2 * p + 1];
            if gt == 0.0 {
                continue;
            }
            let base = weight * r.scale * gt;
            let channel = match r.weight {
                Weight::None => None,
                Weight::Channel(c) => Some(c),
            };
            let phi_val = match (channel, phi) {
                (Some(c), Some((phi, dim))) => phi[p * dim + c],
                _ => 1.0,
            };
            if r.uses_disparity {
                grad_d[p] += base * phi_val;
            }
            if let (Some(c), Some((_, dim)), Some(gp)) = (channel, phi, grad_phi.as_deref_mut()) {
                let dfac = if r.uses_disparity { d[p] } else { 1.0 };
                gp[p * dim + c] += base * dfac;
            }
        }
    }
}

/// Central differences of [`LossProblem::loss_raw`] over every disparity
/// and embedding entry. Steps are `FD_RELATIVE_STEP` times the largest
/// magnitude of each parameter array.
pub fn numerical_gradient(
    problem: &LossProblem,
    d: &[f64],
    phi: Option<&[f64]>,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let step =
        |v: &[f64]| FD_RELATIVE_STEP * v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    let hd = step(d);
    let gd = (0..d.len())
        .into_par_iter()
        .map(|i| {
            let mut p = d.to_vec();
            p[i] = d[i] + hd;
            let lp = problem.loss_raw(&p, phi)?;
            p[i] = d[i] - hd;
            let lm = problem.loss_raw(&p, phi)?;
            Ok((lp - lm) / (2.0 * hd))
        })
        .collect::<Result<Vec<_>>>()?;
    let gphi = match phi {
        None => None,
        Some(phi) => {
            let hp = step(phi);
            Some(
                (0..phi.len())
                    .into_par_iter()
                    .map(|i| {
                        let mut p = phi.to_vec();
                        p[i] = phi[i] + hp;
                        let lp = problem.loss_raw(d, Some(&p))?;
                        p[i] = phi[i] - hp;
                        let lm = problem.loss_raw(d, Some(&p))?;
                        Ok((lp - lm) / (2.0 * hp))
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };
    Ok((gd, gphi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    Disparity,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    /// `max |analytic - numeric| / max |numeric|` over both parameter arrays.
    pub max_rel_error: f64,
    pub disparity_error: f64,
    pub embedding_error: Option<f64>,
    /// Parameter array and flat index of the largest discrepancy.
    pub worst: (Parameter, usize),
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let scale = numeric
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| ((a - n).abs() / scale, i))
        .fold(
            (0.0, 0),
            |best, cur| if cur.0 > best.0 { cur } else { best },
        )
}

/// Compares analytic gradients against central differences.
pub fn gradcheck(problem: &LossProblem, d: &[f64], phi: Option<&[f64]>) -> Result<GradCheckReport> {
    let analytic = problem.grad_raw(d, phi)?;
    let (nd, nphi) = numerical_gradient(problem, d, phi)?;
    let (ed, id) = rel_error(&analytic.d_disparity, &nd);
    let mut report = GradCheckReport {
        loss: analytic.loss_value,
        max_rel_error: ed,
        disparity_error: ed,
        embedding_error: None,
        worst: (Parameter::Disparity, id),
    };
    if let (Some(a), Some(n)) = (analytic.d_embedding.as_deref(), nphi.as_deref()) {
        let (ep, ip) = rel_error(a, n);
        report.embedding_error = Some(ep);
        if ep > report.max_rel_error {
            report.max_rel_error = ep;
            report.worst = (Parameter::Embedding, ip);
        }
    }
    Ok(report)
}

/// Families of random problems used for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    KnownCamera,
    UnknownCamera,
    Embedding,
    /// Embedding basis with the camera and full losses combined.
    EmbeddingDual,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] = [
        ProblemKind::KnownCamera,
        ProblemKind::UnknownCamera,
        ProblemKind::Embedding,
        ProblemKind::EmbeddingDual,
    ];
}

#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    pub kind: ProblemKind,
    pub problem: LossProblem,
    pub disparity: Vec<f64>,
    pub embedding: Option<Vec<f64>>,
}

/// Draws a random problem. `uniform` must yield samples in `[0, 1)`.
///
/// Disparity lies in `[0.2, 1.2)`, focal length in `[0.8, 1.6)` times the
/// larger image side, embeddings are normalized random vectors of dimension
/// 2 or 3, and the target flow is uniform noise in `[-1, 1)`.
pub fn synthetic_problem(
    shape: ImageShape,
    kind: ProblemKind,
    uniform: &mut impl FnMut() -> f64,
) -> Result<SyntheticProblem> {
    use crate::basis::CameraModel;
    use crate::geometry::{make_grid, Intrinsics, PrincipalPoint};

    let n = shape.num_pixels();
    let side = shape.height.max(shape.width) as f64;
    let focal = (0.8 + 0.8 * uniform()) * side;
    let model = match kind {
        ProblemKind::UnknownCamera | ProblemKind::EmbeddingDual => {
            CameraModel::UnknownFocal(PrincipalPoint::centered(shape))
        }
        _ => CameraModel::Known(Intrinsics::centered(shape, focal)?),
    };
    let disparity: Vec<f64> = (0..n).map(|_| 0.2 + uniform()).collect();
    let (spec, embedding) = match kind {
        ProblemKind::KnownCamera | ProblemKind::UnknownCamera => (BasisSpec::camera(model), None),
        ProblemKind::Embedding | ProblemKind::EmbeddingDual => {
            let dim = 2 + usize::from(uniform() < 0.5);
            let raw: Vec<f64> = (0..n * dim).map(|_| 2.0 * uniform() - 1.0).collect();
            let phi = ObjectEmbedding::renormalize(shape, dim, raw)?;
            (
                BasisSpec::embedding(model, dim),
                Some(phi.as_slice().to_vec()),
            )
        }
    };
    let target = FlowField::new(
        shape,
        (0..shape.flow_len())
            .map(|_| 2.0 * uniform() - 1.0)
            .collect(),
    )?;
    let mut problem = LossProblem::new(spec, make_grid(shape), target)?;
    if kind == ProblemKind::EmbeddingDual {
        problem.dual = Some(LossWeights::default());
    }
    Ok(SyntheticProblem {
        kind,
        problem,
        disparity,
        embedding,
    })
}

/// Output of a regularizer: unweighted mean, weighted loss, and the
/// gradient of the weighted loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    pub value: f64,
    pub weighted: f64,
    pub gradient: Vec<f64>,
}

/// `mean(max(0, z - 5))` over pre-activation disparity. The subgradient at
/// `z = 5` is 0.
pub fn disparity_regularizer(z: &[f64], weight: f64) -> Result<Regularizer> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("empty field".into()));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("regularizer input"));
    }
    let n = z.len() as f64;
    let value = z
        .iter()
        .map(|&x| (x - DISPARITY_ACTIVATION_LIMIT).max(0.0))
        .sum::<f64>()
        / n;
    let gradient = z
        .iter()
        .map(|&x| {
            if x > DISPARITY_ACTIVATION_LIMIT {
                weight / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(Regularizer {
        value,
        weighted: weight * value,
        gradient,
    })
}

/// `mean(max(0, |z|^2 - 1))` over pre-normalization embedding vectors
/// (pixel-major, `dim` per pixel). Gradient `2 z / N` where active.
pub fn embedding_regularizer(z: &[f64], dim: usize, weight: f64) -> Result<Regularizer> {
    if dim == 0 || z.is_empty() || !z.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "embedding of length {} does not split into vectors of {dim}",
            z.len()
        )));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("regularizer input"));
    }
    let n = (z.len() / dim) as f64;
    let mut value = 0.0;
    let mut gradient = vec![0.0; z.len()];
    for (px, g) in z.chunks_exact(dim).zip(gradient.chunks_exact_mut(dim)) {
        let sq: f64 = px.iter().map(|x| x * x).sum();
        if sq > 1.0 {
            value += sq - 1.0;
            for (gi, xi) in g.iter_mut().zip(px) {
                *gi = weight * 2.0 * xi / n;
            }
        }
    }
    value /= n;
    Ok(Regularizer {
        value,
        weighted: weight * value,
        gradient,
    })
}
