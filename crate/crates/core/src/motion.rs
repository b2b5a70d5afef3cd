//! Reading motion off projection coefficients.
//!
//! Translation and disparity are only observable through their product, so
//! recovered translations are reported in a gauge: coefficients are
//! multiplied by the median of the disparity map the basis was built with,
//! which is what they would be had that disparity been normalized to a
//! median of 1. Pass a gauge of 1 to get raw coefficients.

use serde::{Deserialize, Serialize};

use crate::basis::{Axis, FieldLabel, ObjectEmbedding};
use crate::geometry::{CameraMotion, DisparityMap};
use crate::projection::ProjectionResult;
use crate::{Error, Result};

/// Coefficients smaller than this fraction of the largest coefficient are
/// treated as zero when estimating focal length.
pub const FOCAL_COEFFICIENT_TOLERANCE: f64 = 1e-9;

/// Translation gauge for a disparity map: its median.
pub fn gauge_for(d: &DisparityMap) -> f64 {
    d.median()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalEstimate {
    pub focal: f64,
    /// `sqrt(c(R1x) / c(R2x))`, from rotation about x.
    pub from_x: Option<f64>,
    /// `sqrt(c(R1y) / c(R2y))`, from rotation about y.
    pub from_y: Option<f64>,
    /// `from_x / from_y` when both are available; 1 when `fx = fy` holds.
    pub consistency_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredMotion {
    /// Rotation is exact; translation is in the gauge below.
    pub camera: CameraMotion,
    pub gauge: f64,
    pub translation_direction: Option<[f64; 3]>,
    pub focal_estimate: Option<FocalEstimate>,
    /// The x and y translation are still multiplied by the focal length:
    /// the basis did not know it and no estimate was available.
    pub translation_in_focal_units: bool,
    /// Rows are x, y, z translation; columns are embedding channels.
    pub object_motion_matrix: Option<Vec<Vec<f64>>>,
    /// The basis was rank deficient; coefficients are the minimum-norm choice.
    pub degenerate: bool,
}

fn coeff(result: &ProjectionResult, axis: Axis) -> Option<f64> {
    result.coefficient(FieldLabel::Camera(axis))
}

fn pair_focal(c1: f64, c2: f64, tol: f64) -> Option<f64> {
    (c1.abs() > tol && c2.abs() > tol && c1 * c2 > 0.0).then(|| (c1 / c2).sqrt())
}

/// Rotation rate from a `(R1, R2)` coefficient pair: `c1 = f w`, `c2 = w / f`.
fn pair_rate(c1: f64, c2: f64, tol: f64) -> f64 {
    if c1.abs() > tol && c2.abs() > tol && c1 * c2 > 0.0 {
        c1.signum() * (c1 * c2).sqrt()
    } else {
        0.0
    }
}

fn tolerance(result: &ProjectionResult) -> f64 {
    let max = result
        .coefficients
        .iter()
        .fold(0.0f64, |m, c| m.max(c.abs()));
    FOCAL_COEFFICIENT_TOLERANCE * max
}

/// Focal length from the split rotation coefficients. `None` when neither
/// pair has two significant coefficients of the same sign.
pub fn recover_focal(
    r1x: f64,
    r2x: f64,
    r1y: f64,
    r2y: f64,
    tolerance: f64,
) -> Option<FocalEstimate> {
    let from_x = pair_focal(r1x, r2x, tolerance);
    let from_y = pair_focal(r1y, r2y, tolerance);
    let focal = match (from_x, from_y) {
        (Some(a), Some(b)) => (a * b).sqrt(),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return None,
    };
    Some(FocalEstimate {
        focal,
        from_x,
        from_y,
        consistency_ratio: from_x.zip(from_y).map(|(a, b)| a / b),
    })
}

/// Camera velocities from a projection onto a 6- or 8-field camera basis.
pub fn recover_camera_motion(result: &ProjectionResult, gauge: f64) -> Result<RecoveredMotion> {
    let mut translation = [0.0; 3];
    for (t, axis) in translation.iter_mut().zip(Axis::TRANSLATION) {
        *t = gauge
            * coeff(result, axis).ok_or_else(|| {
                Error::InvalidArgument(format!("projection basis has no camera {axis} field"))
            })?;
    }
    let tol = tolerance(result);
    let (rotation, focal_estimate): ([f64; 3], Option<FocalEstimate>) =
        if let (Some(rx), Some(ry)) = (coeff(result, Axis::Rx), coeff(result, Axis::Ry)) {
            let rz = coeff(result, Axis::Rz).unwrap_or(0.0);
            ([rx, ry, rz], None)
        } else {
            let get = |a| {
                coeff(result, a).ok_or_else(|| {
                    Error::InvalidArgument(format!("projection basis has no {a} field"))
                })
            };
            let (r1x, r2x, r1y, r2y) = (
                get(Axis::R1x)?,
                get(Axis::R2x)?,
                get(Axis::R1y)?,
                get(Axis::R2y)?,
            );
            let rz = get(Axis::Rz)?;
            (
                [pair_rate(r1x, r2x, tol), pair_rate(r1y, r2y, tol), rz],
                recover_focal(r1x, r2x, r1y, r2y, tol),
            )
        };
    let unknown_focal = coeff(result, Axis::Rx).is_none();
    if let (true, Some(f)) = (unknown_focal, focal_estimate) {
        // the unknown-focal translation templates omit the focal factor
        translation[0] /= f.focal;
        translation[1] /= f.focal;
    }
    let norm = translation.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(RecoveredMotion {
        camera: CameraMotion {
            translation,
            rotation,
        },
        gauge,
        translation_direction: (norm > 0.0).then(|| translation.map(|x| x / norm)),
        focal_estimate,
        translation_in_focal_units: unknown_focal && focal_estimate.is_none(),
        object_motion_matrix: None,
        degenerate: result.is_degenerate(),
    })
}

/// The implicit object-motion matrix and the per-pixel translations it gives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMotion {
    /// `3 x A`, rows are x, y, z.
    pub matrix: Vec<Vec<f64>>,
    /// `M phi(p)` for every pixel.
    pub per_pixel: Vec<[f64; 3]>,
    pub gauge: f64,
    pub degenerate: bool,
}

/// Reads `M` from the coefficients of the `phi_i T*` fields.
pub fn recover_object_matrix(
    result: &ProjectionResult,
    phi: &ObjectEmbedding,
    gauge: f64,
) -> Result<ObjectMotion> {
    let dim = phi.dim();
    let mut matrix = vec![vec![0.0; dim]; 3];
    for (row, axis) in Axis::TRANSLATION.into_iter().enumerate() {
        for (i, m) in matrix[row].iter_mut().enumerate() {
            let c = result
                .coefficient(FieldLabel::Embedded { index: i, axis })
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("projection basis has no Emb({i},{axis}) field"))
                })?;
            *m = gauge * c;
        }
    }
    let n = phi.shape().num_pixels();
    if result.reconstructed.shape().num_pixels() != n {
        return Err(Error::ShapeMismatch {
            expected: result.reconstructed.shape(),
            actual: phi.shape(),
        });
    }
    let per_pixel = (0..n)
        .map(|p| {
            let e = phi.at(p);
            let mut t = [0.0; 3];
            for (row, ti) in t.iter_mut().enumerate() {
                *ti = matrix[row].iter().zip(e).map(|(m, x)| m * x).sum();
            }
            t
        })
        .collect();
    Ok(ObjectMotion {
        matrix,
        per_pixel,
        gauge,
        degenerate: result.is_degenerate(),
    })
}
