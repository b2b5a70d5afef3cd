//! File formats: Middlebury `.flo`, PFM, 8-bit PGM, PNG renderings, and
//! directory stacks of basis fields and embedding channels.
//!
//! Payloads are 32-bit floats on disk. Every writer goes through
//! [`write_atomic`], so readers never observe a half-written file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::{BasisField, BasisSpec, FieldLabel, FlowBasis, ObjectEmbedding, ObjectMask};
use crate::geometry::{CameraMotion, DisparityMap, FlowField, ImageShape, Intrinsics, ScalarField};
use crate::scenes::Scene;
use crate::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;
/// Largest width or height accepted by the readers.
pub const MAX_DIMENSION: u64 = 32768;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = fs::write(&tmp, bytes).and_then(|()| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn check_dims(width: u64, height: u64) -> Result<ImageShape> {
    for d in [width, height] {
        if d > MAX_DIMENSION {
            return Err(Error::DimensionOverflow(d));
        }
    }
    ImageShape::new(height as usize, width as usize)
}

fn finite_f32(values: &[f64], what: &'static str) -> Result<Vec<f32>> {
    values
        .iter()
        .map(|&x| {
            let y = x as f32;
            if y.is_finite() {
                Ok(y)
            } else {
                Err(Error::NonFinite(what))
            }
        })
        .collect()
}

// ---- .flo

pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    let shape = flow.shape();
    let payload = finite_f32(flow.as_slice(), "flow")?;
    let mut out = Vec::with_capacity(12 + 4 * payload.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(shape.width as u32).to_le_bytes());
    out.extend_from_slice(&(shape.height as u32).to_le_bytes());
    for x in payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::TruncatedPayload {
            expected: 12,
            actual: bytes.len(),
        });
    }
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[4 * i..4 * i + 4]).expect("4 bytes");
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let width = u32::from_le_bytes(word(1)) as u64;
    let height = u32::from_le_bytes(word(2)) as u64;
    let shape = check_dims(width, height)?;
    let expected = 12 + 8 * shape.num_pixels();
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    FlowField::new(shape, data)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    write_atomic(path, &encode_flo(flow)?)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}

// ---- PFM

/// Grayscale PFM, little-endian, rows stored bottom-up.
pub fn encode_pfm(shape: ImageShape, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != shape.num_pixels() {
        return Err(Error::LengthMismatch {
            expected: shape.num_pixels(),
            actual: values.len(),
        });
    }
    let payload = finite_f32(values, "PFM payload")?;
    let mut out = format!("Pf\n{} {}\n-1.0\n", shape.width, shape.height).into_bytes();
    for row in payload.chunks_exact(shape.width).rev() {
        for x in row {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits off the next whitespace-delimited header token.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
        if *pos - start > 64 {
            return Err(Error::MalformedHeader("header token too long".into()));
        }
    }
    if start == *pos {
        return Err(Error::MalformedHeader("unexpected end of header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| Error::MalformedHeader("header is not ASCII".into()))
}

fn header_int(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u64> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::MalformedHeader(format!("bad {what} {tok:?}")))
}

/// Skips the single whitespace byte that ends a binary header.
fn end_of_header(bytes: &[u8], pos: &mut usize) -> Result<()> {
    match bytes.get(*pos) {
        Some(b) if b.is_ascii_whitespace() => {
            *pos += 1;
            Ok(())
        }
        _ => Err(Error::MalformedHeader(
            "missing separator after header".into(),
        )),
    }
}

pub fn decode_pfm(bytes: &[u8]) -> Result<(ImageShape, Vec<f64>)> {
    let mut pos = 0;
    match header_token(bytes, &mut pos)? {
        "Pf" => {}
        "PF" => return Err(Error::MalformedHeader("colour PFM is not supported".into())),
        other => return Err(Error::MalformedHeader(format!("bad PFM tag {other:?}"))),
    }
    let width = header_int(bytes, &mut pos, "width")?;
    let height = header_int(bytes, &mut pos, "height")?;
    let shape = check_dims(width, height)?;
    let tok = header_token(bytes, &mut pos)?;
    let scale: f64 = tok
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("bad scale {tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::MalformedHeader(format!("bad scale {tok:?}")));
    }
    end_of_header(bytes, &mut pos)?;
    let body = &bytes[pos..];
    let expected = 4 * shape.num_pixels();
    if body.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            actual: body.len(),
        });
    }
    let little = scale < 0.0;
    let rows: Vec<Vec<f64>> = body
        .chunks_exact(4 * shape.width)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| {
                    let c: [u8; 4] = c.try_into().expect("4 bytes");
                    let x = if little {
                        f32::from_le_bytes(c)
                    } else {
                        f32::from_be_bytes(c)
                    };
                    x as f64
                })
                .collect()
        })
        .collect();
    let data: Vec<f64> = rows.into_iter().rev().flatten().collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("PFM payload"));
    }
    Ok((shape, data))
}

pub fn write_pfm(path: &Path, field: &ScalarField) -> Result<()> {
    write_atomic(path, &encode_pfm(field.shape(), field.as_slice())?)
}

pub fn read_pfm(path: &Path) -> Result<ScalarField> {
    let (shape, data) = decode_pfm(&fs::read(path)?)?;
    ScalarField::new(shape, data)
}

pub fn write_disparity(path: &Path, d: &DisparityMap) -> Result<()> {
    write_atomic(path, &encode_pfm(d.shape(), d.as_slice())?)
}

pub fn read_disparity(path: &Path) -> Result<DisparityMap> {
    let (shape, data) = decode_pfm(&fs::read(path)?)?;
    DisparityMap::new(shape, data)
}

// ---- PGM

pub fn encode_pgm(shape: ImageShape, values: &[u8]) -> Result<Vec<u8>> {
    if values.len() != shape.num_pixels() {
        return Err(Error::LengthMismatch {
            expected: shape.num_pixels(),
            actual: values.len(),
        });
    }
    let mut out = format!("P5\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    out.extend_from_slice(values);
    Ok(out)
}

/// Reads a binary 8-bit PGM. `#` comments in the header are not supported.
pub fn decode_pgm(bytes: &[u8]) -> Result<(ImageShape, Vec<u8>)> {
    let mut pos = 0;
    let tag = header_token(bytes, &mut pos)?;
    if tag != "P5" {
        return Err(Error::MalformedHeader(format!("bad PGM tag {tag:?}")));
    }
    let width = header_int(bytes, &mut pos, "width")?;
    let height = header_int(bytes, &mut pos, "height")?;
    let shape = check_dims(width, height)?;
    let maxval = header_int(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::MalformedHeader(format!(
            "unsupported maxval {maxval}"
        )));
    }
    end_of_header(bytes, &mut pos)?;
    let body = &bytes[pos..];
    if body.len() != shape.num_pixels() {
        return Err(Error::TruncatedPayload {
            expected: shape.num_pixels(),
            actual: body.len(),
        });
    }
    Ok((shape, body.to_vec()))
}

/// Mask pixels are written as 0 or 255.
pub fn write_mask(path: &Path, mask: &ObjectMask) -> Result<()> {
    let bytes: Vec<u8> = mask
        .as_slice()
        .iter()
        .map(|&m| if m > 0.0 { 255 } else { 0 })
        .collect();
    write_atomic(path, &encode_pgm(mask.shape(), &bytes)?)
}

/// Any nonzero pixel is inside the mask.
pub fn read_mask(path: &Path) -> Result<ObjectMask> {
    let (shape, bytes) = decode_pgm(&fs::read(path)?)?;
    ObjectMask::new(
        shape,
        bytes.iter().map(|&b| f64::from(u8::from(b > 0))).collect(),
    )
}

pub fn write_labels_pgm(path: &Path, shape: ImageShape, labels: &[u32]) -> Result<()> {
    let bytes = labels
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| {
                Error::InvalidArgument(format!("label {l} does not fit an 8-bit label map"))
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    write_atomic(path, &encode_pgm(shape, &bytes)?)
}

// ---- PNG

fn encode_png(shape: ImageShape, rgb: &[[u8; 3]]) -> Result<Vec<u8>> {
    if rgb.len() != shape.num_pixels() {
        return Err(Error::LengthMismatch {
            expected: shape.num_pixels(),
            actual: rgb.len(),
        });
    }
    let raw: Vec<u8> = rgb.iter().flatten().copied().collect();
    let img = image::RgbImage::from_raw(shape.width as u32, shape.height as u32, raw)
        .expect("buffer matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_png(path: &Path, shape: ImageShape, rgb: &[[u8; 3]]) -> Result<()> {
    write_atomic(path, &encode_png(shape, rgb)?)
}

/// Grayscale rendering of a scalar field, linearly mapped from `[min, max]`.
pub fn render_scalar(field: &ScalarField) -> Vec<[u8; 3]> {
    let v = field.as_slice();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter()
        .map(|&x| {
            let t = if hi > lo { (x - lo) / (hi - lo) } else { 0.5 };
            let g = (255.0 * t).round() as u8;
            [g, g, g]
        })
        .collect()
}

/// Distinct colours for small integer labels.
pub fn render_labels(labels: &[u32]) -> Vec<[u8; 3]> {
    const PALETTE: [[u8; 3]; 10] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
        [227, 119, 194],
        [127, 127, 127],
        [188, 189, 34],
        [23, 190, 207],
    ];
    labels
        .iter()
        .map(|&l| PALETTE[l as usize % PALETTE.len()])
        .collect()
}

// ---- flow colour wheel

fn color_wheel() -> Vec<[f64; 3]> {
    // red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta, magenta-red
    const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];
    let mut wheel = Vec::with_capacity(55);
    for (s, &n) in SEGMENTS.iter().enumerate() {
        for i in 0..n {
            let up = 255.0 * i as f64 / n as f64;
            let down = 255.0 - up;
            wheel.push(match s {
                0 => [255.0, up, 0.0],
                1 => [down, 255.0, 0.0],
                2 => [0.0, 255.0, up],
                3 => [0.0, down, 255.0],
                4 => [up, 0.0, 255.0],
                _ => [255.0, 0.0, down],
            });
        }
    }
    wheel
}

/// Middlebury colour coding: hue from flow direction, saturation from
/// magnitude relative to `max_magnitude` (the field maximum when `None`).
/// Zero flow is white; magnitudes beyond the maximum are darkened.
pub fn colorize_flow(flow: &FlowField, max_magnitude: Option<f64>) -> Vec<[u8; 3]> {
    let wheel = color_wheel();
    let ncols = wheel.len();
    let max = max_magnitude.unwrap_or_else(|| {
        flow.magnitude()
            .as_slice()
            .iter()
            .copied()
            .fold(0.0, f64::max)
    });
    let max = if max > 0.0 { max } else { 1.0 };
    flow.as_slice()
        .chunks_exact(2)
        .map(|px| {
            let (u, v) = (px[0], px[1]);
            let rad = u.hypot(v) / max;
            // + 0.0 folds -0.0 so the positive x axis maps to a single colour
            let a = ((-v) + 0.0).atan2((-u) + 0.0) / std::f64::consts::PI;
            let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
            let k0 = fk.floor() as usize % ncols;
            let k1 = (k0 + 1) % ncols;
            let f = fk - fk.floor();
            let mut rgb = [0u8; 3];
            for (c, out) in rgb.iter_mut().enumerate() {
                let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
                let col = if rad <= 1.0 {
                    1.0 - rad * (1.0 - col)
                } else {
                    col * 0.75
                };
                *out = (255.0 * col).round() as u8;
            }
            rgb
        })
        .collect()
}

// ---- stacks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackEntry {
    pub label: FieldLabel,
    pub file: String,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisManifest {
    pub shape: ImageShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<BasisSpec>,
    pub fields: Vec<StackEntry>,
}

pub const BASIS_MANIFEST: &str = "basis.json";
pub const EMBEDDING_MANIFEST: &str = "embedding.json";

fn file_stem(label: FieldLabel) -> String {
    label
        .to_string()
        .chars()
        .filter_map(|c| match c {
            '(' | ',' => Some('-'),
            ')' => None,
            c => Some(c),
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

/// Rejects manifest file names that would escape the stack directory.
fn stack_member(dir: &Path, file: &str) -> Result<PathBuf> {
    let p = Path::new(file);
    if p.components().count() != 1 || p.file_name().is_none() {
        return Err(Error::Manifest(format!("bad file name {file:?}")));
    }
    Ok(dir.join(p))
}

/// One `.flo` per field plus `basis.json`. Returns the written paths.
pub fn write_basis_stack(
    dir: &Path,
    basis: &FlowBasis,
    spec: Option<BasisSpec>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut fields = Vec::new();
    for (i, f) in basis.fields().iter().enumerate() {
        let file = format!("{i:02}_{}.flo", file_stem(f.label));
        let path = dir.join(&file);
        write_flo(&path, &f.field)?;
        written.push(path);
        fields.push(StackEntry {
            label: f.label,
            file,
            scale: f.scale,
        });
    }
    let manifest = BasisManifest {
        shape: basis.shape(),
        spec,
        fields,
    };
    let path = dir.join(BASIS_MANIFEST);
    write_json(&path, &manifest)?;
    written.push(path);
    Ok(written)
}

pub fn read_basis_stack(dir: &Path) -> Result<(FlowBasis, BasisManifest)> {
    let manifest: BasisManifest = read_json(&dir.join(BASIS_MANIFEST))?;
    let mut basis = FlowBasis::new(manifest.shape);
    for entry in &manifest.fields {
        if !(entry.scale > 0.0 && entry.scale.is_finite()) {
            return Err(Error::Manifest(format!("bad scale for {}", entry.label)));
        }
        let field = read_flo(&stack_member(dir, &entry.file)?)?;
        basis.push(BasisField {
            label: entry.label,
            field,
            scale: entry.scale,
        })?;
    }
    Ok((basis, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub shape: ImageShape,
    pub dim: usize,
    pub channels: Vec<String>,
}

/// One PFM per channel plus `embedding.json`.
pub fn write_embedding_stack(dir: &Path, phi: &ObjectEmbedding) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut channels = Vec::new();
    for c in 0..phi.dim() {
        let file = format!("channel_{c:02}.pfm");
        let path = dir.join(&file);
        write_atomic(&path, &encode_pfm(phi.shape(), &phi.channel(c))?)?;
        written.push(path);
        channels.push(file);
    }
    let path = dir.join(EMBEDDING_MANIFEST);
    write_json(
        &path,
        &EmbeddingManifest {
            shape: phi.shape(),
            dim: phi.dim(),
            channels,
        },
    )?;
    written.push(path);
    Ok(written)
}

/// Reads an embedding stack; with `renormalize` each pixel vector is
/// rescaled to unit length instead of checked.
pub fn read_embedding_stack(dir: &Path, renormalize: bool) -> Result<ObjectEmbedding> {
    let m: EmbeddingManifest = read_json(&dir.join(EMBEDDING_MANIFEST))?;
    if m.channels.len() != m.dim {
        return Err(Error::Manifest(format!(
            "{} channel files for dimension {}",
            m.channels.len(),
            m.dim
        )));
    }
    let n = m.shape.num_pixels();
    let mut data = vec![0.0; n * m.dim];
    for (c, file) in m.channels.iter().enumerate() {
        let (shape, values) = decode_pfm(&fs::read(stack_member(dir, file)?)?)?;
        m.shape.check(shape)?;
        for (p, v) in values.into_iter().enumerate() {
            data[p * m.dim + c] = v;
        }
    }
    if renormalize {
        ObjectEmbedding::renormalize(m.shape, m.dim, data)
    } else {
        ObjectEmbedding::new(m.shape, m.dim, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObjectRecord {
    pub mask: String,
    pub motion: CameraMotion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub shape: ImageShape,
    pub intrinsics: Intrinsics,
    pub depth: String,
    pub disparity: String,
    pub camera_motion: CameraMotion,
    pub objects: Vec<SceneObjectRecord>,
}

pub const SCENE_MANIFEST: &str = "scene.json";

/// Depth and disparity PFMs, one PGM per object mask, and `scene.json`.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = vec![dir.join("depth.pfm"), dir.join("disparity.pfm")];
    write_pfm(&written[0], scene.depth())?;
    write_disparity(&written[1], &scene.disparity())?;
    let mut objects = Vec::new();
    for (i, obj) in scene.objects().iter().enumerate() {
        let file = format!("mask_{i:02}.pgm");
        let path = dir.join(&file);
        write_mask(&path, &obj.mask)?;
        written.push(path);
        objects.push(SceneObjectRecord {
            mask: file,
            motion: obj.motion,
        });
    }
    let path = dir.join(SCENE_MANIFEST);
    write_json(
        &path,
        &SceneManifest {
            shape: scene.shape(),
            intrinsics: *scene.intrinsics(),
            depth: "depth.pfm".into(),
            disparity: "disparity.pfm".into(),
            camera_motion: scene.camera_motion(),
            objects,
        },
    )?;
    written.push(path);
    Ok(written)
}

/// Inverse of [`write_scene`]. Depth comes back at 32-bit precision.
pub fn read_scene(dir: &Path) -> Result<Scene> {
    let m: SceneManifest = read_json(&dir.join(SCENE_MANIFEST))?;
    let depth = read_pfm(&stack_member(dir, &m.depth)?)?;
    m.shape.check(depth.shape())?;
    let objects = m
        .objects
        .iter()
        .map(|o| {
            Ok(crate::scenes::SceneObject {
                mask: read_mask(&stack_member(dir, &o.mask)?)?,
                motion: o.motion,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Scene::new(depth, m.intrinsics, objects, m.camera_motion)
}
