//! Analytic flow bases.
//!
//! Every basis column is of the form `scale * [d] * [w] * template`, where
//! `template` is a disparity-free per-pixel 2-vector field, `d` multiplies
//! only translational columns, and `w` is an optional per-pixel weight (an
//! object mask or one channel of the instance embedding). `scale` is the
//! normalization applied before the matrix is assembled: translational
//! templates are scaled to norm 2, rotational fields to norm 1. The scale
//! is always computed on the camera-level field, before any mask or
//! embedding weight, so each column stays linear in `d` and in `w`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::{DisparityMap, FlowField, ImageShape, Intrinsics, PixelGrid, PrincipalPoint};
use crate::{Error, Result};

/// Default instance-embedding dimension.
pub const DEFAULT_EMBEDDING_DIM: usize = 6;
pub const MAX_EMBEDDING_DIM: usize = 16;
/// Allowed deviation of `|phi|` from 1.
pub const EMBEDDING_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    Tx,
    Ty,
    Tz,
    Rx,
    Ry,
    Rz,
    R1x,
    R2x,
    R1y,
    R2y,
}

impl Axis {
    pub const TRANSLATION: [Axis; 3] = [Axis::Tx, Axis::Ty, Axis::Tz];
    pub const ROTATION: [Axis; 3] = [Axis::Rx, Axis::Ry, Axis::Rz];
    /// Rotation fields of the unknown-focal basis, in basis order.
    pub const ROTATION_UNKNOWN_FOCAL: [Axis; 5] =
        [Axis::R1x, Axis::R2x, Axis::R1y, Axis::R2y, Axis::Rz];

    pub fn is_translation(self) -> bool {
        matches!(self, Axis::Tx | Axis::Ty | Axis::Tz)
    }

    /// Index 0..3 of a translational axis.
    pub fn translation_index(self) -> Option<usize> {
        match self {
            Axis::Tx => Some(0),
            Axis::Ty => Some(1),
            Axis::Tz => Some(2),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Axis::Tx => "Tx",
            Axis::Ty => "Ty",
            Axis::Tz => "Tz",
            Axis::Rx => "Rx",
            Axis::Ry => "Ry",
            Axis::Rz => "Rz",
            Axis::R1x => "R1x",
            Axis::R2x => "R2x",
            Axis::R1y => "R1y",
            Axis::R2y => "R2y",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        const ALL: [Axis; 10] = [
            Axis::Tx,
            Axis::Ty,
            Axis::Tz,
            Axis::Rx,
            Axis::Ry,
            Axis::Rz,
            Axis::R1x,
            Axis::R2x,
            Axis::R1y,
            Axis::R2y,
        ];
        ALL.into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown axis {s:?}")))
    }
}

/// Tag of a basis field: `Tx`, `Mask(1,Rz)`, `Emb(3,Ty)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldLabel {
    Camera(Axis),
    Masked { object: usize, axis: Axis },
    Embedded { index: usize, axis: Axis },
}

impl FieldLabel {
    pub fn axis(&self) -> Axis {
        match *self {
            FieldLabel::Camera(a) => a,
            FieldLabel::Masked { axis, .. } | FieldLabel::Embedded { axis, .. } => axis,
        }
    }
}

impl fmt::Display for FieldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldLabel::Camera(a) => write!(f, "{a}"),
            FieldLabel::Masked { object, axis } => write!(f, "Mask({object},{axis})"),
            FieldLabel::Embedded { index, axis } => write!(f, "Emb({index},{axis})"),
        }
    }
}

impl FromStr for FieldLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse_pair = |inner: &str| -> Result<(usize, Axis)> {
            let (i, a) = inner
                .split_once(',')
                .ok_or_else(|| Error::InvalidArgument(format!("bad label {s:?}")))?;
            let i = i
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad label index in {s:?}")))?;
            Ok((i, a.trim().parse()?))
        };
        if let Some(inner) = s.strip_prefix("Mask(").and_then(|r| r.strip_suffix(')')) {
            let (object, axis) = parse_pair(inner)?;
            Ok(FieldLabel::Masked { object, axis })
        } else if let Some(inner) = s.strip_prefix("Emb(").and_then(|r| r.strip_suffix(')')) {
            let (index, axis) = parse_pair(inner)?;
            Ok(FieldLabel::Embedded { index, axis })
        } else {
            Ok(FieldLabel::Camera(s.parse()?))
        }
    }
}

impl Serialize for FieldLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FieldLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One labelled basis field with its normalization multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisField {
    pub label: FieldLabel,
    pub field: FlowField,
    /// Multiplier applied to `field` when the basis matrix is assembled.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowBasis {
    shape: ImageShape,
    fields: Vec<BasisField>,
}

impl FlowBasis {
    pub fn new(shape: ImageShape) -> Self {
        Self {
            shape,
            fields: Vec::new(),
        }
    }

    pub fn from_fields(shape: ImageShape, fields: Vec<BasisField>) -> Result<Self> {
        let mut basis = Self::new(shape);
        for f in fields {
            basis.push(f)?;
        }
        Ok(basis)
    }

    pub fn push(&mut self, field: BasisField) -> Result<()> {
        self.shape.check(field.field.shape())?;
        if self.fields.iter().any(|f| f.label == field.label) {
            return Err(Error::DuplicateLabel(field.label.to_string()));
        }
        self.fields.push(field);
        Ok(())
    }

    pub fn extend(&mut self, fields: impl IntoIterator<Item = BasisField>) -> Result<()> {
        for f in fields {
            self.push(f)?;
        }
        Ok(())
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn fields(&self) -> &[BasisField] {
        &self.fields
    }

    pub fn labels(&self) -> Vec<FieldLabel> {
        self.fields.iter().map(|f| f.label).collect()
    }

    pub fn get(&self, label: FieldLabel) -> Option<&BasisField> {
        self.fields.iter().find(|f| f.label == label)
    }

    pub fn position(&self, label: FieldLabel) -> Option<usize> {
        self.fields.iter().position(|f| f.label == label)
    }

    /// Linear combination `sum_k coeffs[k] * field_k` of the unnormalized fields.
    pub fn combine(&self, coeffs: &[f64]) -> Result<FlowField> {
        if coeffs.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: coeffs.len(),
            });
        }
        let mut out = FlowField::zeros(self.shape);
        for (c, f) in coeffs.iter().zip(&self.fields) {
            out = out.axpy(*c, &f.field)?;
        }
        Ok(out)
    }
}

impl IntoIterator for FlowBasis {
    type Item = BasisField;
    type IntoIter = std::vec::IntoIter<BasisField>;

    fn into_iter(self) -> Self::IntoIter {
        self.fields.into_iter()
    }
}

/// Intrinsics available when building the camera part of a basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CameraModel {
    Known(Intrinsics),
    UnknownFocal(PrincipalPoint),
}

impl CameraModel {
    pub fn principal_point(&self) -> PrincipalPoint {
        match self {
            CameraModel::Known(k) => k.principal_point(),
            CameraModel::UnknownFocal(pp) => *pp,
        }
    }

    pub fn rotation_axes(&self) -> &'static [Axis] {
        match self {
            CameraModel::Known(_) => &Axis::ROTATION,
            CameraModel::UnknownFocal(_) => &Axis::ROTATION_UNKNOWN_FOCAL,
        }
    }

    /// Number of camera fields: 6 with known focal length, 8 without.
    pub fn camera_dim(&self) -> usize {
        3 + self.rotation_axes().len()
    }

    // Focal lengths used by the translational templates. Without intrinsics
    // the Tx / Ty templates are constant fields whose scale is irrelevant
    // after normalization.
    fn focal(&self) -> (f64, f64) {
        match self {
            CameraModel::Known(k) => (k.fx, k.fy),
            CameraModel::UnknownFocal(_) => (1.0, 1.0),
        }
    }
}

/// Which per-pixel weight multiplies a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Weight {
    None,
    Channel(usize),
}

/// Disparity-free description of one column; see the module docs.
#[derive(Debug, Clone)]
pub(crate) struct ColumnRecipe {
    pub label: FieldLabel,
    pub template: Vec<f64>,
    pub scale: f64,
    pub uses_disparity: bool,
    pub weight: Weight,
}

impl ColumnRecipe {
    /// Unnormalized field values; `phi` is pixel-major with `dim` entries per pixel.
    pub fn render(&self, disparity: &[f64], phi: Option<(&[f64], usize)>) -> Vec<f64> {
        let n = self.template.len() / 2;
        let mut out = self.template.clone();
        for i in 0..n {
            let mut w = 1.0;
            if self.uses_disparity {
                w *= disparity[i];
            }
            if let Weight::Channel(c) = self.weight {
                let (phi, dim) = phi.expect("embedding weight without embedding");
                w *= phi[i * dim + c];
            }
            out[2 * i] *= w;
            out[2 * i + 1] *= w;
        }
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scale_to(target: f64, template: &[f64]) -> f64 {
    let n = norm(template);
    if n > 0.0 {
        target / n
    } else {
        1.0
    }
}

fn collect(grid: &PixelGrid, f: impl Fn(f64, f64) -> [f64; 2]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * grid.len());
    for (u, v) in grid.coords() {
        out.extend_from_slice(&f(u, v));
    }
    out
}

/// Disparity-free template of a camera field.
fn camera_template(grid: &PixelGrid, model: &CameraModel, axis: Axis) -> Vec<f64> {
    let PrincipalPoint { cx, cy } = model.principal_point();
    let (fx, fy) = model.focal();
    match axis {
        Axis::Tx => collect(grid, |_, _| [fx, 0.0]),
        Axis::Ty => collect(grid, |_, _| [0.0, fy]),
        Axis::Tz => collect(grid, |u, v| [cx - u, cy - v]),
        Axis::Rx => collect(grid, |u, v| {
            let (x, y) = (u - cx, v - cy);
            [x * y / fy, fy + y * y / fy]
        }),
        Axis::Ry => collect(grid, |u, v| {
            let (x, y) = (u - cx, v - cy);
            [fx + x * x / fx, x * y / fx]
        }),
        // With unknown focal length the ratio fx / fy is fixed to 1.
        Axis::Rz => collect(grid, |u, v| [fx / fy * (v - cy), fy / fx * (cx - u)]),
        Axis::R1x => collect(grid, |_, _| [0.0, 1.0]),
        Axis::R2x => collect(grid, |u, v| {
            let (x, y) = (u - cx, v - cy);
            [x * y, y * y]
        }),
        Axis::R1y => collect(grid, |_, _| [1.0, 0.0]),
        Axis::R2y => collect(grid, |u, v| {
            let (x, y) = (u - cx, v - cy);
            [x * x, x * y]
        }),
    }
}

fn camera_recipe(grid: &PixelGrid, model: &CameraModel, axis: Axis) -> ColumnRecipe {
    let template = camera_template(grid, model, axis);
    let translational = axis.is_translation();
    let scale = scale_to(if translational { 2.0 } else { 1.0 }, &template);
    ColumnRecipe {
        label: FieldLabel::Camera(axis),
        template,
        scale,
        uses_disparity: translational,
        weight: Weight::None,
    }
}

fn render_field(
    recipe: &ColumnRecipe,
    shape: ImageShape,
    disparity: &[f64],
    phi: Option<(&[f64], usize)>,
) -> Result<BasisField> {
    Ok(BasisField {
        label: recipe.label,
        field: FlowField::new(shape, recipe.render(disparity, phi))?,
        scale: recipe.scale,
    })
}

/// `Tx = (d fx, 0)`, `Ty = (0, d fy)`, `Tz = (d (cx - u), d (cy - v))`.
pub fn translation_basis(
    grid: &PixelGrid,
    k: &Intrinsics,
    d: &DisparityMap,
) -> Result<Vec<BasisField>> {
    grid.shape().check(d.shape())?;
    let model = CameraModel::Known(*k);
    Axis::TRANSLATION
        .iter()
        .map(|&a| {
            render_field(
                &camera_recipe(grid, &model, a),
                grid.shape(),
                d.as_slice(),
                None,
            )
        })
        .collect()
}

/// Camera rotation fields `Rx`, `Ry`, `Rz`. They do not depend on disparity.
pub fn rotation_basis(grid: &PixelGrid, k: &Intrinsics) -> Result<Vec<BasisField>> {
    let model = CameraModel::Known(*k);
    Axis::ROTATION
        .iter()
        .map(|&a| render_field(&camera_recipe(grid, &model, a), grid.shape(), &[], None))
        .collect()
}

/// The split rotation fields `R1x`, `R2x`, `R1y`, `R2y` for unknown focal length.
///
/// `Rx = fy R1x + R2x / fy` and `Ry = fx R1y + R2y / fx`.
pub fn rotation_basis_unknown_focal(
    grid: &PixelGrid,
    pp: &PrincipalPoint,
) -> Result<Vec<BasisField>> {
    let model = CameraModel::UnknownFocal(*pp);
    [Axis::R1x, Axis::R2x, Axis::R1y, Axis::R2y]
        .iter()
        .map(|&a| render_field(&camera_recipe(grid, &model, a), grid.shape(), &[], None))
        .collect()
}

/// Rotation fields for a camera model, in basis order.
pub fn rotation_fields(grid: &PixelGrid, model: &CameraModel) -> Result<Vec<BasisField>> {
    model
        .rotation_axes()
        .iter()
        .map(|&a| render_field(&camera_recipe(grid, model, a), grid.shape(), &[], None))
        .collect()
}

/// The 6-field basis (known focal) or 8-field basis (unknown focal).
pub fn camera_basis(grid: &PixelGrid, model: &CameraModel, d: &DisparityMap) -> Result<FlowBasis> {
    BasisSpec::camera(*model).build(grid, d, None)
}

/// Binary object mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    shape: ImageShape,
    data: Vec<f64>,
}

impl ObjectMask {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.num_pixels() {
            return Err(Error::LengthMismatch {
                expected: shape.num_pixels(),
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &m)| m != 0.0 && m != 1.0)
        {
            return Err(Error::NonBinaryMask { index, value });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: ImageShape, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(shape.num_pixels());
        for row in 0..shape.height {
            for col in 0..shape.width {
                data.push(if f(row, col) { 1.0 } else { 0.0 });
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn contains(&self, index: usize) -> bool {
        self.data[index] == 1.0
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&m| m == 1.0).count()
    }
}

/// `{ m * f | f in base }`; labels become `Mask(object, axis)`.
///
/// The base must contain camera-level fields only.
pub fn masked_basis(mask: &ObjectMask, base: &FlowBasis, object: usize) -> Result<FlowBasis> {
    base.shape().check(mask.shape())?;
    let mut out = FlowBasis::new(base.shape());
    for f in base.fields() {
        let FieldLabel::Camera(axis) = f.label else {
            return Err(Error::InvalidArgument(format!(
                "cannot mask non-camera field {}",
                f.label
            )));
        };
        out.push(BasisField {
            label: FieldLabel::Masked { object, axis },
            field: f.field.modulated(mask.as_slice())?,
            scale: f.scale,
        })?;
    }
    Ok(out)
}

/// Translation-only masked basis `{ m Tx, m Ty, m Tz }`.
pub fn masked_translation_basis(
    mask: &ObjectMask,
    base: &FlowBasis,
    object: usize,
) -> Result<FlowBasis> {
    let fields = Axis::TRANSLATION
        .iter()
        .map(|&a| {
            base.get(FieldLabel::Camera(a))
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("base basis lacks {a}")))
        })
        .collect::<Result<Vec<_>>>()?;
    masked_basis(mask, &FlowBasis::from_fields(base.shape(), fields)?, object)
}

/// Per-pixel unit vectors in `R^A`, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEmbedding {
    shape: ImageShape,
    dim: usize,
    data: Vec<f64>,
}

impl ObjectEmbedding {
    pub fn new(shape: ImageShape, dim: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(dim)?;
        if data.len() != shape.num_pixels() * dim {
            return Err(Error::LengthMismatch {
                expected: shape.num_pixels() * dim,
                actual: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        for (index, px) in data.chunks_exact(dim).enumerate() {
            let n = norm(px);
            if (n - 1.0).abs() > EMBEDDING_NORM_TOLERANCE {
                return Err(Error::EmbeddingNorm {
                    index,
                    norm: n,
                    tolerance: EMBEDDING_NORM_TOLERANCE,
                });
            }
        }
        Ok(Self { shape, dim, data })
    }

    /// Normalizes every pixel vector to unit length. Zero vectors are rejected.
    pub fn renormalize(shape: ImageShape, dim: usize, mut data: Vec<f64>) -> Result<Self> {
        check_dim(dim)?;
        if data.len() != shape.num_pixels() * dim {
            return Err(Error::LengthMismatch {
                expected: shape.num_pixels() * dim,
                actual: data.len(),
            });
        }
        for (index, px) in data.chunks_exact_mut(dim).enumerate() {
            let n = norm(px);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::EmbeddingNorm {
                    index,
                    norm: n,
                    tolerance: EMBEDDING_NORM_TOLERANCE,
                });
            }
            px.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self { shape, dim, data })
    }

    /// Embedding assigning basis vector `e_{labels[p]}` to pixel `p`.
    pub fn from_labels(shape: ImageShape, dim: usize, labels: &[usize]) -> Result<Self> {
        if labels.len() != shape.num_pixels() {
            return Err(Error::LengthMismatch {
                expected: shape.num_pixels(),
                actual: labels.len(),
            });
        }
        let mut data = vec![0.0; shape.num_pixels() * dim];
        for (p, &l) in labels.iter().enumerate() {
            if l >= dim {
                return Err(Error::InvalidArgument(format!(
                    "label {l} does not fit embedding dimension {dim}"
                )));
            }
            data[p * dim + l] = 1.0;
        }
        Self::new(shape, dim, data)
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.chunks_exact(self.dim).map(|px| px[c]).collect()
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim > MAX_EMBEDDING_DIM {
        return Err(Error::EmbeddingDim(dim));
    }
    Ok(())
}

/// Full description of a basis family, independent of `d` and `phi`.
///
/// `embedding_dim = None` gives the plain camera basis (6 or 8 fields).
/// With `Some(A)` the camera translation fields are replaced by the `3A`
/// embedding-weighted fields `phi_i T*`, followed by the camera rotation
/// fields, for `3A + 3` or `3A + 5` fields; `object_rotation` appends the
/// `phi_i R*` fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub model: CameraModel,
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub object_rotation: bool,
}

impl BasisSpec {
    pub fn camera(model: CameraModel) -> Self {
        Self {
            model,
            embedding_dim: None,
            object_rotation: false,
        }
    }

    pub fn embedding(model: CameraModel, dim: usize) -> Self {
        Self {
            model,
            embedding_dim: Some(dim),
            object_rotation: false,
        }
    }

    /// Number of fields this spec produces.
    pub fn cardinality(&self) -> usize {
        let rot = self.model.rotation_axes().len();
        match self.embedding_dim {
            None => 3 + rot,
            Some(a) => 3 * a + rot + if self.object_rotation { rot * a } else { 0 },
        }
    }

    pub(crate) fn recipes(&self, grid: &PixelGrid) -> Vec<ColumnRecipe> {
        let mut out = Vec::with_capacity(self.cardinality());
        match self.embedding_dim {
            None => {
                for &a in &Axis::TRANSLATION {
                    out.push(camera_recipe(grid, &self.model, a));
                }
            }
            Some(dim) => {
                for i in 0..dim {
                    for &a in &Axis::TRANSLATION {
                        let mut r = camera_recipe(grid, &self.model, a);
                        r.label = FieldLabel::Embedded { index: i, axis: a };
                        r.weight = Weight::Channel(i);
                        out.push(r);
                    }
                }
            }
        }
        for &a in self.model.rotation_axes() {
            out.push(camera_recipe(grid, &self.model, a));
        }
        if let (Some(dim), true) = (self.embedding_dim, self.object_rotation) {
            for i in 0..dim {
                for &a in self.model.rotation_axes() {
                    let mut r = camera_recipe(grid, &self.model, a);
                    r.label = FieldLabel::Embedded { index: i, axis: a };
                    r.weight = Weight::Channel(i);
                    out.push(r);
                }
            }
        }
        out
    }

    pub fn build(
        &self,
        grid: &PixelGrid,
        d: &DisparityMap,
        phi: Option<&ObjectEmbedding>,
    ) -> Result<FlowBasis> {
        grid.shape().check(d.shape())?;
        let phi = match (self.embedding_dim, phi) {
            (None, _) => None,
            (Some(dim), Some(phi)) => {
                grid.shape().check(phi.shape())?;
                if phi.dim() != dim {
                    return Err(Error::InvalidArgument(format!(
                        "embedding has dimension {}, basis expects {dim}",
                        phi.dim()
                    )));
                }
                Some((phi.as_slice(), dim))
            }
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "embedding basis requires an embedding".into(),
                ))
            }
        };
        let fields = self
            .recipes(grid)
            .iter()
            .map(|r| render_field(r, grid.shape(), d.as_slice(), phi))
            .collect::<Result<Vec<_>>>()?;
        FlowBasis::from_fields(grid.shape(), fields)
    }
}

/// `B_phi^translation` plus the camera rotation fields: `3A + 3` fields with
/// known focal length, `3A + 5` without.
pub fn embedding_basis(
    grid: &PixelGrid,
    model: &CameraModel,
    d: &DisparityMap,
    phi: &ObjectEmbedding,
) -> Result<FlowBasis> {
    BasisSpec::embedding(*model, phi.dim()).build(grid, d, Some(phi))
}

/// Optional per-object rotation fields `phi_i R*` for every rotation field given.
pub fn object_rotation_fields(
    phi: &ObjectEmbedding,
    rotations: &[BasisField],
) -> Result<Vec<BasisField>> {
    let mut out = Vec::with_capacity(phi.dim() * rotations.len());
    for i in 0..phi.dim() {
        let w = phi.channel(i);
        for r in rotations {
            let axis = r.label.axis();
            if axis.is_translation() {
                return Err(Error::InvalidArgument(format!(
                    "{} is not a rotation field",
                    r.label
                )));
            }
            out.push(BasisField {
                label: FieldLabel::Embedded { index: i, axis },
                field: r.field.modulated(&w)?,
                scale: r.scale,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_grid;

    fn shape(h: usize, w: usize) -> ImageShape {
        ImageShape::new(h, w).unwrap()
    }

    fn pixel_of(grid: &PixelGrid, u: f64, v: f64) -> usize {
        grid.coords().position(|(a, b)| a == u && b == v).unwrap()
    }

    fn at(f: &BasisField, i: usize) -> [f64; 2] {
        f.field.at(i)
    }

    #[test]
    fn translation_fields_by_hand() {
        // pixel (u, v) = (2.5, 1.5); shift the principal point so that u - cx = 2, v - cy = 1
        let s = shape(3, 4);
        let grid = make_grid(s);
        let k = Intrinsics::new(1.0, 1.0, 0.5, 0.5).unwrap();
        let d = DisparityMap::constant(s, 0.5).unwrap();
        let t = translation_basis(&grid, &k, &d).unwrap();
        let i = pixel_of(&grid, 2.5, 1.5);
        assert_eq!(at(&t[0], i), [0.5, 0.0]);
        assert_eq!(at(&t[1], i), [0.0, 0.5]);
        assert_eq!(at(&t[2], i), [-1.0, -0.5]);
    }

    #[test]
    fn zero_disparity_gives_zero_translation() {
        let s = shape(4, 5);
        let grid = make_grid(s);
        let k = Intrinsics::centered(s, 3.0).unwrap();
        let d = DisparityMap::constant(s, 0.0).unwrap();
        for f in translation_basis(&grid, &k, &d).unwrap() {
            assert!(f.field.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn tz_vanishes_at_principal_point() {
        let s = shape(5, 5);
        let grid = make_grid(s);
        let k = Intrinsics::new(2.0, 2.0, 2.5, 1.5).unwrap();
        let d = DisparityMap::new(s, (0..25).map(|i| i as f64 * 0.1).collect()).unwrap();
        let t = translation_basis(&grid, &k, &d).unwrap();
        let i = pixel_of(&grid, 2.5, 1.5);
        assert_eq!(at(&t[2], i), [0.0, 0.0]);
    }

    #[test]
    fn rotation_fields_by_hand() {
        // principal point at (0.5, 0.5) puts pixel (0.5, 0.5) at u - cx = v - cy = 0
        let s = shape(2, 2);
        let grid = make_grid(s);
        let k = Intrinsics::new(1.0, 1.0, 0.5, 0.5).unwrap();
        let r = rotation_basis(&grid, &k).unwrap();
        assert_eq!(at(&r[0], 0), [0.0, 1.0]);
        assert_eq!(at(&r[1], 0), [1.0, 0.0]);
        assert_eq!(at(&r[2], 0), [0.0, 0.0]);

        // pixel (cx, cy + 1) with fx = fy
        let k = Intrinsics::new(3.0, 3.0, 0.5, -0.5).unwrap();
        let r = rotation_basis(&grid, &k).unwrap();
        assert_eq!(at(&r[2], 0), [1.0, 0.0]);
    }

    #[test]
    fn unknown_focal_fields_by_hand() {
        let s = shape(2, 2);
        let grid = make_grid(s);
        let pp = PrincipalPoint::new(-0.5, -0.5).unwrap();
        let r = rotation_basis_unknown_focal(&grid, &pp).unwrap();
        // pixel (0.5, 0.5) sits at offset (1, 1)
        assert_eq!(at(&r[1], 0), [1.0, 1.0]);
        assert_eq!(at(&r[3], 0), [1.0, 1.0]);
        for i in 0..4 {
            assert_eq!(at(&r[0], i), [0.0, 1.0]);
            assert_eq!(at(&r[2], i), [1.0, 0.0]);
        }
    }

    #[test]
    fn rx_ry_decomposition_identity() {
        let s = shape(9, 11);
        let grid = make_grid(s);
        for (fx, fy) in [(2.0, 2.0), (0.7, 3.5), (120.0, 80.0)] {
            let k = Intrinsics::new(fx, fy, 4.2, 6.1).unwrap();
            let r = rotation_basis(&grid, &k).unwrap();
            let split = rotation_basis_unknown_focal(&grid, &k.principal_point()).unwrap();
            let rx = split[0]
                .field
                .scaled(fy)
                .axpy(1.0 / fy, &split[1].field)
                .unwrap();
            let ry = split[2]
                .field
                .scaled(fx)
                .axpy(1.0 / fx, &split[3].field)
                .unwrap();
            for (got, want) in [(&rx, &r[0].field), (&ry, &r[1].field)] {
                for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
                    assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn rx_is_two_r1x_plus_half_r2x_for_fy_2() {
        let s = shape(6, 7);
        let grid = make_grid(s);
        let k = Intrinsics::new(2.0, 2.0, 3.0, 2.0).unwrap();
        let r = rotation_basis(&grid, &k).unwrap();
        let split = rotation_basis_unknown_focal(&grid, &k.principal_point()).unwrap();
        let combo = split[0]
            .field
            .scaled(2.0)
            .axpy(0.5, &split[1].field)
            .unwrap();
        assert_eq!(combo, r[0].field);
    }

    #[test]
    fn translation_is_linear_in_disparity() {
        let s = shape(5, 6);
        let grid = make_grid(s);
        let k = Intrinsics::centered(s, 4.0).unwrap();
        let d = DisparityMap::new(s, (0..30).map(|i| 0.05 * i as f64).collect()).unwrap();
        let t1 = translation_basis(&grid, &k, &d).unwrap();
        let t2 = translation_basis(&grid, &k, &d.scaled(2.0).unwrap()).unwrap();
        for (a, b) in t1.iter().zip(&t2) {
            assert_eq!(a.field.scaled(2.0), b.field);
            assert_eq!(a.scale, b.scale);
        }
    }

    #[test]
    fn normalization_scales() {
        let s = shape(4, 4);
        let grid = make_grid(s);
        let k = Intrinsics::centered(s, 5.0).unwrap();
        let d = DisparityMap::constant(s, 1.0).unwrap();
        let b = camera_basis(&grid, &CameraModel::Known(k), &d).unwrap();
        for f in b.fields() {
            let n = f.field.norm() * f.scale;
            let want = if f.label.axis().is_translation() {
                2.0
            } else {
                1.0
            };
            assert!((n - want).abs() < 1e-12, "{}: {n}", f.label);
        }
    }

    #[test]
    fn masked_basis_cases() {
        let s = shape(4, 6);
        let grid = make_grid(s);
        let k = Intrinsics::new(1.0, 1.0, 3.0, 2.0).unwrap();
        let d = DisparityMap::constant(s, 1.0).unwrap();
        let base = camera_basis(&grid, &CameraModel::Known(k), &d).unwrap();

        let ones = ObjectMask::from_fn(s, |_, _| true);
        let m = masked_basis(&ones, &base, 0).unwrap();
        for (a, b) in m.fields().iter().zip(base.fields()) {
            assert_eq!(a.field, b.field);
        }

        let zeros = ObjectMask::from_fn(s, |_, _| false);
        let m = masked_basis(&zeros, &base, 0).unwrap();
        assert!(m.fields().iter().all(|f| f.field.norm() == 0.0));

        let half = ObjectMask::from_fn(s, |_, col| col < 3);
        let m = masked_translation_basis(&half, &base, 2).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.fields()[0].label.to_string(), "Mask(2,Tx)");
        for row in 0..4 {
            for col in 0..6 {
                let want = if col < 3 { [1.0, 0.0] } else { [0.0, 0.0] };
                assert_eq!(m.fields()[0].field.at_rc(row, col), want);
            }
        }
    }

    #[test]
    fn non_binary_mask_rejected() {
        let s = shape(1, 3);
        assert!(matches!(
            ObjectMask::new(s, vec![0.0, 0.5, 1.0]),
            Err(Error::NonBinaryMask { index: 1, .. })
        ));
    }

    #[test]
    fn embedding_norm_checked_and_renormalized() {
        let s = shape(1, 2);
        assert!(matches!(
            ObjectEmbedding::new(s, 2, vec![1.0, 0.0, 0.6, 0.9]),
            Err(Error::EmbeddingNorm { index: 1, .. })
        ));
        let e = ObjectEmbedding::renormalize(s, 2, vec![3.0, 4.0, 0.0, -2.0]).unwrap();
        assert_eq!(e.at(0), &[0.6, 0.8]);
        assert_eq!(e.at(1), &[0.0, -1.0]);
        assert!(ObjectEmbedding::renormalize(s, 2, vec![0.0; 4]).is_err());
        assert!(matches!(
            ObjectEmbedding::new(s, 17, vec![]),
            Err(Error::EmbeddingDim(17))
        ));
    }

    #[test]
    fn embedding_basis_cardinalities() {
        let s = shape(4, 4);
        let grid = make_grid(s);
        let d = DisparityMap::constant(s, 0.3).unwrap();
        let phi = ObjectEmbedding::from_labels(s, 6, &[0; 16]).unwrap();
        let pp = PrincipalPoint::centered(s);
        let k = Intrinsics::centered(s, 2.0).unwrap();
        let unk = embedding_basis(&grid, &CameraModel::UnknownFocal(pp), &d, &phi).unwrap();
        assert_eq!(unk.len(), 23);
        let known = embedding_basis(&grid, &CameraModel::Known(k), &d, &phi).unwrap();
        assert_eq!(known.len(), 21);
        let mut spec = BasisSpec::embedding(CameraModel::Known(k), 6);
        spec.object_rotation = true;
        assert_eq!(spec.cardinality(), 39);
        assert_eq!(spec.build(&grid, &d, Some(&phi)).unwrap().len(), 39);
    }

    #[test]
    fn single_channel_embedding_matches_camera_translation() {
        let s = shape(3, 5);
        let grid = make_grid(s);
        let d = DisparityMap::new(s, (0..15).map(|i| 0.1 + 0.02 * i as f64).collect()).unwrap();
        let model = CameraModel::Known(Intrinsics::centered(s, 2.0).unwrap());
        let phi = ObjectEmbedding::from_labels(s, 1, &[0; 15]).unwrap();
        let e = embedding_basis(&grid, &model, &d, &phi).unwrap();
        let c = camera_basis(&grid, &model, &d).unwrap();
        assert_eq!(e.len(), c.len());
        for (a, b) in e.fields().iter().zip(c.fields()) {
            assert_eq!(a.field, b.field);
            assert_eq!(a.scale, b.scale);
        }
    }

    #[test]
    fn object_rotation_fields_cases() {
        let s = shape(2, 4);
        let grid = make_grid(s);
        let k = Intrinsics::centered(s, 2.0).unwrap();
        let rot = rotation_basis(&grid, &k).unwrap();

        let one = ObjectEmbedding::from_labels(s, 1, &[0; 8]).unwrap();
        let extra = object_rotation_fields(&one, &rot).unwrap();
        for (a, b) in extra.iter().zip(&rot) {
            assert_eq!(a.field, b.field);
        }

        let labels = [0, 0, 1, 1, 0, 0, 1, 1];
        let two = ObjectEmbedding::from_labels(s, 2, &labels).unwrap();
        let extra = object_rotation_fields(&two, &rot).unwrap();
        assert_eq!(extra.len(), 6);
        for (i, f) in extra.iter().enumerate() {
            let region = i / 3;
            let r = &rot[i % 3].field;
            for (p, &label) in labels.iter().enumerate().take(8) {
                let want = if label == region { r.at(p) } else { [0.0, 0.0] };
                assert_eq!(f.field.at(p), want);
            }
        }

        let six = ObjectEmbedding::from_labels(s, 6, &[0; 8]).unwrap();
        assert_eq!(object_rotation_fields(&six, &rot).unwrap().len(), 18);
    }

    #[test]
    fn labels_roundtrip_text() {
        for l in [
            FieldLabel::Camera(Axis::R2y),
            FieldLabel::Masked {
                object: 3,
                axis: Axis::Tz,
            },
            FieldLabel::Embedded {
                index: 11,
                axis: Axis::Rz,
            },
        ] {
            assert_eq!(l.to_string().parse::<FieldLabel>().unwrap(), l);
        }
        assert!("Foo".parse::<FieldLabel>().is_err());
        assert!("Emb(1)".parse::<FieldLabel>().is_err());
    }

    #[test]
    fn duplicate_labels_rejected() {
        let s = shape(2, 2);
        let grid = make_grid(s);
        let k = Intrinsics::centered(s, 1.0).unwrap();
        let mut b = FlowBasis::new(s);
        let r = rotation_basis(&grid, &k).unwrap();
        b.push(r[0].clone()).unwrap();
        assert!(matches!(
            b.push(r[0].clone()),
            Err(Error::DuplicateLabel(_))
        ));
    }
}
