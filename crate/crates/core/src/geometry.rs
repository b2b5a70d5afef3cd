//! Shared field types and the pixel-grid convention.
//!
//! Conventions used throughout the crate:
//!
//! * Pixel `(row, col)` has image coordinates `u = col + 0.5`, `v = row + 0.5`
//!   (sample centres), so a `W`-wide image has its centre at `u = W / 2`.
//! * Camera axes are `+x` right, `+y` down, `+z` forward into the scene.
//! * A flow field flattens to a column of length `2HW`: pixels in row-major
//!   order, with the `(du, dv)` components of each pixel interleaved.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape { height, width });
        }
        Ok(Self { height, width })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Length of a flattened flow column, `2HW`.
    pub fn flow_len(&self) -> usize {
        2 * self.num_pixels()
    }

    /// Image diagonal in pixels.
    pub fn diagonal(&self) -> f64 {
        ((self.height * self.height + self.width * self.width) as f64).sqrt()
    }

    pub(crate) fn check(&self, other: ImageShape) -> Result<()> {
        if *self != other {
            return Err(Error::ShapeMismatch {
                expected: *self,
                actual: other,
            });
        }
        Ok(())
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={fx}, fy={fy})"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point must be finite (cx={cx}, cy={cy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Square pixels with the principal point at the image centre.
    pub fn centered(shape: ImageShape, focal: f64) -> Result<Self> {
        Self::new(
            focal,
            focal,
            shape.width as f64 / 2.0,
            shape.height as f64 / 2.0,
        )
    }

    pub fn principal_point(&self) -> PrincipalPoint {
        PrincipalPoint {
            cx: self.cx,
            cy: self.cy,
        }
    }
}

/// Principal point only, for the unknown-focal-length bases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrincipalPoint {
    pub cx: f64,
    pub cy: f64,
}

impl PrincipalPoint {
    pub fn new(cx: f64, cy: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point must be finite (cx={cx}, cy={cy})"
            )));
        }
        Ok(Self { cx, cy })
    }

    pub fn centered(shape: ImageShape) -> Self {
        Self {
            cx: shape.width as f64 / 2.0,
            cy: shape.height as f64 / 2.0,
        }
    }
}

/// Velocity of the scene relative to the camera, per frame.
///
/// Components are expressed in the sign convention of the analytic basis:
/// the instantaneous flow of a static scene is
/// `tx*Tx + ty*Ty + tz*Tz + wx*Rx + wy*Ry + wz*Rz`. In terms of scene-point
/// velocity in camera coordinates this is `dP/dt = t + (-wx, wy, -wz) x P`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraMotion {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

impl CameraMotion {
    pub fn new(translation: [f64; 3], rotation: [f64; 3]) -> Result<Self> {
        if translation.iter().chain(&rotation).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("camera motion"));
        }
        Ok(Self {
            translation,
            rotation,
        })
    }

    /// Motion with a single non-zero degree of freedom (0..3 translation, 3..6 rotation).
    pub fn single_dof(dof: usize, value: f64) -> Self {
        let mut m = Self::default();
        if dof < 3 {
            m.translation[dof] = value;
        } else {
            m.rotation[dof - 3] = value;
        }
        m
    }

    pub fn is_zero(&self) -> bool {
        self.translation
            .iter()
            .chain(&self.rotation)
            .all(|&x| x == 0.0)
    }

    pub fn as_array(&self) -> [f64; 6] {
        let [tx, ty, tz] = self.translation;
        let [wx, wy, wz] = self.rotation;
        [tx, ty, tz, wx, wy, wz]
    }
}

/// Pixel-centre coordinates for every pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    shape: ImageShape,
    u: Vec<f64>,
    v: Vec<f64>,
}

pub fn make_grid(shape: ImageShape) -> PixelGrid {
    let n = shape.num_pixels();
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for row in 0..shape.height {
        for col in 0..shape.width {
            u.push(col as f64 + 0.5);
            v.push(row as f64 + 0.5);
        }
    }
    PixelGrid { shape, u, v }
}

impl PixelGrid {
    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn coords(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.u.iter().copied().zip(self.v.iter().copied())
    }
}

/// Per-pixel 2-vector field, row-major with interleaved components.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    shape: ImageShape,
    data: Vec<f64>,
}

impl FlowField {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.flow_len() {
            return Err(Error::LengthMismatch {
                expected: shape.flow_len(),
                actual: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("flow field"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.flow_len()],
        }
    }

    /// Builds a field from a per-pixel function of the pixel index.
    pub fn from_fn(shape: ImageShape, mut f: impl FnMut(usize) -> [f64; 2]) -> Self {
        let mut data = Vec::with_capacity(shape.flow_len());
        for i in 0..shape.num_pixels() {
            data.extend_from_slice(&f(i));
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, index: usize) -> [f64; 2] {
        [self.data[2 * index], self.data[2 * index + 1]]
    }

    pub fn at_rc(&self, row: usize, col: usize) -> [f64; 2] {
        self.at(row * self.shape.width + col)
    }

    pub fn flatten(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }

    pub fn unflatten(shape: ImageShape, column: &DVector<f64>) -> Result<Self> {
        Self::new(shape, column.as_slice().to_vec())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|x| k * x).collect(),
        }
    }

    /// `self + k * other`.
    pub fn axpy(&self, k: f64, other: &FlowField) -> Result<Self> {
        self.shape.check(other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + k * b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &FlowField) -> Result<Self> {
        self.axpy(-1.0, other)
    }

    /// Pointwise product with a per-pixel scalar.
    pub fn modulated(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.shape.num_pixels() {
            return Err(Error::LengthMismatch {
                expected: self.shape.num_pixels(),
                actual: weights.len(),
            });
        }
        Ok(Self::from_fn(self.shape, |i| {
            let [a, b] = self.at(i);
            [weights[i] * a, weights[i] * b]
        }))
    }

    /// Per-pixel vector magnitude.
    pub fn magnitude(&self) -> ScalarField {
        ScalarField {
            shape: self.shape,
            data: self
                .data
                .chunks_exact(2)
                .map(|p| p[0].hypot(p[1]))
                .collect(),
        }
    }
}

/// Unconstrained per-pixel scalar field (depth, masks, residual images).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    shape: ImageShape,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.num_pixels() {
            return Err(Error::LengthMismatch {
                expected: shape.num_pixels(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: ImageShape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.num_pixels()],
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Per-pixel inverse depth, `d >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    shape: ImageShape,
    data: Vec<f64>,
}

impl DisparityMap {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.num_pixels() {
            return Err(Error::LengthMismatch {
                expected: shape.num_pixels(),
                actual: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("disparity"));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &x)| x < 0.0) {
            return Err(Error::NegativeDisparity { index, value });
        }
        Ok(Self { shape, data })
    }

    pub fn constant(shape: ImageShape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.num_pixels()])
    }

    /// Inverts a depth map; depths must be positive and finite.
    pub fn from_depth(depth: &ScalarField) -> Result<Self> {
        if let Some(z) = depth
            .as_slice()
            .iter()
            .find(|z| !(**z > 0.0 && z.is_finite()))
        {
            return Err(Error::NonPositiveDepth(format!("depth value {z}")));
        }
        Self::new(
            depth.shape(),
            depth.as_slice().iter().map(|z| 1.0 / z).collect(),
        )
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.shape, self.data.iter().map(|x| k * x).collect())
    }

    pub fn median(&self) -> f64 {
        median(&self.data)
    }
}

/// Median of a non-empty sample; even-length samples average the two middle values.
pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_pixel_grid_is_centered() {
        let g = make_grid(ImageShape::new(1, 1).unwrap());
        assert_eq!(g.u(), &[0.5]);
        assert_eq!(g.v(), &[0.5]);
    }

    #[test]
    fn two_by_two_grid() {
        let g = make_grid(ImageShape::new(2, 2).unwrap());
        assert_eq!(g.u(), &[0.5, 1.5, 0.5, 1.5]);
        assert_eq!(g.v(), &[0.5, 0.5, 1.5, 1.5]);
    }

    #[test]
    fn qvga_grid_extent() {
        let g = make_grid(ImageShape::new(240, 320).unwrap());
        assert_eq!(g.len(), 76800);
        assert_eq!(g.u().iter().cloned().fold(f64::MIN, f64::max), 319.5);
        assert_eq!(g.v().iter().cloned().fold(f64::MIN, f64::max), 239.5);
    }

    #[test]
    fn grid_is_deterministic() {
        let s = ImageShape::new(7, 5).unwrap();
        assert_eq!(make_grid(s), make_grid(s));
    }

    #[test]
    fn zero_shape_rejected() {
        assert!(ImageShape::new(0, 4).is_err());
        assert!(ImageShape::new(4, 0).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(1.0, 1.0, f64::NAN, 0.0).is_err());
        // principal point may be outside the image
        assert!(Intrinsics::new(1.0, 1.0, -100.0, 1e4).is_ok());
    }

    #[test]
    fn flatten_zero_and_single() {
        let s = ImageShape::new(3, 2).unwrap();
        assert!(FlowField::zeros(s).flatten().iter().all(|&x| x == 0.0));

        let one = ImageShape::new(1, 1).unwrap();
        let f = FlowField::new(one, vec![3.0, 4.0]).unwrap();
        assert_eq!(f.flatten().as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn unflatten_rejects_bad_length() {
        let s = ImageShape::new(2, 2).unwrap();
        let col = DVector::from_element(7, 0.0);
        assert!(matches!(
            FlowField::unflatten(s, &col),
            Err(Error::LengthMismatch {
                expected: 8,
                actual: 7
            })
        ));
    }

    #[test]
    fn flatten_order_is_row_major_interleaved() {
        let s = ImageShape::new(2, 3).unwrap();
        let f = FlowField::from_fn(s, |i| [i as f64, -(i as f64)]);
        let col = f.flatten();
        // pixel (row 1, col 2) is index 5
        assert_eq!(col[10], 5.0);
        assert_eq!(col[11], -5.0);
        assert_eq!(f.at_rc(1, 2), [5.0, -5.0]);
    }

    #[test]
    fn disparity_rejects_negative() {
        let s = ImageShape::new(1, 2).unwrap();
        assert!(matches!(
            DisparityMap::new(s, vec![0.1, -0.1]),
            Err(Error::NegativeDisparity { index: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn flatten_roundtrip(h in 1usize..=32, w in 1usize..=32, seed in any::<u64>()) {
            let s = ImageShape::new(h, w).unwrap();
            let mut x = seed;
            let f = FlowField::from_fn(s, |_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let a = (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                [a * 100.0, -a * 3.0]
            });
            let back = FlowField::unflatten(s, &f.flatten()).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
