//! Synthetic scenes and their exact and instantaneous flow.
//!
//! `reproject_flow` is the oracle: it unprojects every pixel with its depth,
//! moves the 3D point by a finite rigid motion, and projects it again.
//! `instantaneous_flow` evaluates the analytic basis with the scene's
//! velocities. The two agree to first order in the motion step.

use nalgebra::{Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::basis::{camera_basis, CameraModel, ObjectMask};
use crate::geometry::{
    make_grid, CameraMotion, DisparityMap, FlowField, ImageShape, Intrinsics, ScalarField,
};
use crate::{Error, Result};

/// Default motion step for the reprojection oracle.
pub const DEFAULT_STEP: f64 = 1e-2;
pub const BACKGROUND_DEPTH: f64 = 10.0;
pub const CUBE_DEPTH: f64 = 2.0;

/// A rigid object: its mask and its velocity in camera coordinates.
///
/// Rotation is about the object's centroid; `motion` uses the same sign
/// convention as [`CameraMotion`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub mask: ObjectMask,
    pub motion: CameraMotion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    depth: ScalarField,
    intrinsics: Intrinsics,
    objects: Vec<SceneObject>,
    camera_motion: CameraMotion,
}

/// Scene-point rotation vector for a basis-convention rotation.
fn point_rotation(rotation: [f64; 3]) -> Vector3<f64> {
    Vector3::new(-rotation[0], rotation[1], -rotation[2])
}

impl Scene {
    pub fn new(
        depth: ScalarField,
        intrinsics: Intrinsics,
        objects: Vec<SceneObject>,
        camera_motion: CameraMotion,
    ) -> Result<Self> {
        if let Some(z) = depth
            .as_slice()
            .iter()
            .find(|z| !(**z > 0.0 && z.is_finite()))
        {
            return Err(Error::NonPositiveDepth(format!("scene depth {z}")));
        }
        let shape = depth.shape();
        let mut owner = vec![false; shape.num_pixels()];
        for obj in &objects {
            shape.check(obj.mask.shape())?;
            for (i, o) in owner.iter_mut().enumerate() {
                if obj.mask.contains(i) {
                    if *o {
                        return Err(Error::OverlappingMasks(i));
                    }
                    *o = true;
                }
            }
        }
        Ok(Self {
            depth,
            intrinsics,
            objects,
            camera_motion,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.depth.shape()
    }

    pub fn depth(&self) -> &ScalarField {
        &self.depth
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn camera_motion(&self) -> CameraMotion {
        self.camera_motion
    }

    pub fn disparity(&self) -> DisparityMap {
        DisparityMap::from_depth(&self.depth).expect("scene depth is validated positive")
    }

    pub fn with_camera_motion(mut self, motion: CameraMotion) -> Self {
        self.camera_motion = motion;
        self
    }

    pub fn with_object_motion(mut self, object: usize, motion: CameraMotion) -> Result<Self> {
        let n = self.objects.len();
        self.objects
            .get_mut(object)
            .ok_or_else(|| Error::InvalidArgument(format!("object {object} out of {n}")))?
            .motion = motion;
        Ok(self)
    }

    /// Per-pixel region index: 0 for background, `i + 1` inside object `i`.
    pub fn region_labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.shape().num_pixels()];
        for (k, obj) in self.objects.iter().enumerate() {
            for (i, l) in labels.iter_mut().enumerate() {
                if obj.mask.contains(i) {
                    *l = k + 1;
                }
            }
        }
        labels
    }

    fn unproject(&self, index: usize) -> Point3<f64> {
        let w = self.shape().width;
        let (u, v) = ((index % w) as f64 + 0.5, (index / w) as f64 + 0.5);
        let z = self.depth.as_slice()[index];
        let k = &self.intrinsics;
        Point3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z)
    }

    /// Mean 3D position of the points under an object's mask.
    pub fn centroid(&self, object: usize) -> Point3<f64> {
        let mask = &self.objects[object].mask;
        let mut sum = Vector3::zeros();
        let mut count = 0.0;
        for i in (0..self.shape().num_pixels()).filter(|&i| mask.contains(i)) {
            sum += self.unproject(i).coords;
            count += 1.0;
        }
        if count == 0.0 {
            Point3::origin()
        } else {
            Point3::from(sum / count)
        }
    }

    /// Object motion rewritten as a velocity about the camera origin.
    fn object_velocity_about_origin(&self, object: usize) -> CameraMotion {
        let m = self.objects[object].motion;
        let c = self.centroid(object).coords;
        let w = point_rotation(m.rotation);
        let t = Vector3::from(m.translation) - w.cross(&c);
        CameraMotion {
            translation: [t.x, t.y, t.z],
            rotation: m.rotation,
        }
    }
}

fn block_mask(shape: ImageShape, rows: (usize, usize), cols: (usize, usize)) -> ObjectMask {
    ObjectMask::from_fn(shape, |r, c| {
        r >= rows.0 && r < rows.1 && c >= cols.0 && c < cols.1
    })
}

fn depth_with_blocks(
    shape: ImageShape,
    background: f64,
    blocks: &[(&ObjectMask, f64)],
) -> ScalarField {
    let mut data = vec![background; shape.num_pixels()];
    for (mask, z) in blocks {
        for (i, d) in data.iter_mut().enumerate() {
            if mask.contains(i) {
                *d = *z;
            }
        }
    }
    ScalarField::new(shape, data).expect("length matches shape")
}

/// Fronto-parallel plane at constant depth, no objects.
pub fn plane_scene(shape: ImageShape, k: Intrinsics, depth: f64) -> Result<Scene> {
    Scene::new(
        ScalarField::filled(shape, depth),
        k,
        Vec::new(),
        CameraMotion::default(),
    )
}

/// Axis-aligned cube facing the camera in front of a background plane.
///
/// The cube's front face covers rows `[H/3, 2H/3)` and columns `[W/3, 2W/3)`
/// (integer division) at depth 2; the background is at depth 10. The cube is
/// object 0, static unless a motion is assigned.
pub fn cube_scene(shape: ImageShape, k: Intrinsics) -> Result<Scene> {
    let (h3, w3) = (shape.height / 3, shape.width / 3);
    let mask = block_mask(shape, (h3, 2 * h3), (w3, 2 * w3));
    let depth = depth_with_blocks(shape, BACKGROUND_DEPTH, &[(&mask, CUBE_DEPTH)]);
    Scene::new(
        depth,
        k,
        vec![SceneObject {
            mask,
            motion: CameraMotion::default(),
        }],
        CameraMotion::default(),
    )
}

/// Two rectangular objects at depths 3 and 5 in front of the background.
pub fn two_object_scene(shape: ImageShape, k: Intrinsics) -> Result<Scene> {
    let (h, w) = (shape.height, shape.width);
    let a = block_mask(shape, (h / 4, h / 2), (w / 8, 3 * w / 8));
    let b = block_mask(shape, (h / 2, 3 * h / 4), (5 * w / 8, 7 * w / 8));
    let depth = depth_with_blocks(shape, BACKGROUND_DEPTH, &[(&a, 3.0), (&b, 5.0)]);
    Scene::new(
        depth,
        k,
        vec![
            SceneObject {
                mask: a,
                motion: CameraMotion::default(),
            },
            SceneObject {
                mask: b,
                motion: CameraMotion::default(),
            },
        ],
        CameraMotion::default(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenePreset {
    Cube,
    Plane,
    TwoObjects,
}

impl ScenePreset {
    pub fn build(self, shape: ImageShape, k: Intrinsics) -> Result<Scene> {
        match self {
            ScenePreset::Cube => cube_scene(shape, k),
            ScenePreset::Plane => plane_scene(shape, k, BACKGROUND_DEPTH),
            ScenePreset::TwoObjects => two_object_scene(shape, k),
        }
    }
}

/// Exact flow for motions scaled by `step`, with no occlusion handling.
///
/// Each object point is first rotated about the object centroid and
/// translated, then the whole scene is moved by the camera motion.
pub fn reproject_flow(scene: &Scene, step: f64) -> Result<FlowField> {
    let shape = scene.shape();
    let k = scene.intrinsics;
    let cam = &scene.camera_motion;
    let cam_rot = Rotation3::new(point_rotation(cam.rotation) * step);
    let cam_t = Vector3::from(cam.translation) * step;

    let objects: Vec<(Point3<f64>, Rotation3<f64>, Vector3<f64>)> = scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            (
                scene.centroid(i),
                Rotation3::new(point_rotation(o.motion.rotation) * step),
                Vector3::from(o.motion.translation) * step,
            )
        })
        .collect();
    let owner = scene.region_labels();

    let mut data = Vec::with_capacity(shape.flow_len());
    for (i, &own) in owner.iter().enumerate() {
        let p = scene.unproject(i);
        let q = match own {
            0 => p,
            o if scene.objects[o - 1].motion.is_zero() => p,
            o => {
                let (c, r, t) = &objects[o - 1];
                c + r * (p - c) + t
            }
        };
        let moved = cam_rot * q + cam_t;
        if moved.z <= 0.0 {
            return Err(Error::BehindCamera {
                index: i,
                z: moved.z,
            });
        }
        let u1 = k.fx * moved.x / moved.z + k.cx;
        let v1 = k.fy * moved.y / moved.z + k.cy;
        let u0 = (i % shape.width) as f64 + 0.5;
        let v0 = (i / shape.width) as f64 + 0.5;
        data.push(u1 - u0);
        data.push(v1 - v0);
    }
    FlowField::new(shape, data)
}

/// First-order flow: the 6-field basis evaluated with the scene velocities,
/// plus each object's velocity inside its mask.
pub fn instantaneous_flow(scene: &Scene) -> Result<FlowField> {
    let shape = scene.shape();
    let grid = make_grid(shape);
    let basis = camera_basis(
        &grid,
        &CameraModel::Known(scene.intrinsics),
        &scene.disparity(),
    )?;
    let mut flow = basis.combine(&scene.camera_motion.as_array())?;
    for (i, obj) in scene.objects.iter().enumerate() {
        if obj.motion.is_zero() {
            continue;
        }
        let v = scene.object_velocity_about_origin(i);
        let local = basis
            .combine(&v.as_array())?
            .modulated(obj.mask.as_slice())?;
        flow = flow.axpy(1.0, &local)?;
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k64() -> (ImageShape, Intrinsics) {
        let s = ImageShape::new(48, 64).unwrap();
        (s, Intrinsics::centered(s, 60.0).unwrap())
    }

    #[test]
    fn cube_disparities_and_mask() {
        let (s, k) = k64();
        let scene = cube_scene(s, k).unwrap();
        let d = scene.disparity();
        let mask = &scene.objects()[0].mask;
        assert_eq!(mask.area(), (48 / 3) * (64 / 3));
        for i in 0..s.num_pixels() {
            let want = if mask.contains(i) { 0.5 } else { 0.1 };
            assert!((d.as_slice()[i] - want).abs() < 1e-15);
        }
        let plane = plane_scene(s, k, 10.0).unwrap();
        assert!(plane.disparity().as_slice().iter().all(|&x| x == 0.1));
    }

    #[test]
    fn zero_motion_gives_zero_flow() {
        let (s, k) = k64();
        let scene = cube_scene(s, k).unwrap();
        assert!(reproject_flow(&scene, 0.5)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&x| x.abs() < 1e-12));
        assert!(instantaneous_flow(&scene).unwrap().norm() == 0.0);
    }

    #[test]
    fn lateral_translation_against_plane_is_exact() {
        let (s, k) = k64();
        let t = 0.3;
        let scene = plane_scene(s, k, 4.0)
            .unwrap()
            .with_camera_motion(CameraMotion::single_dof(0, t));
        let flow = reproject_flow(&scene, 1.0).unwrap();
        for i in 0..s.num_pixels() {
            let [du, dv] = flow.at(i);
            assert!((du - 60.0 * t / 4.0).abs() < 1e-12);
            assert!(dv.abs() < 1e-12);
        }
    }

    #[test]
    fn tx_velocity_matches_translation_field() {
        let (s, k) = k64();
        let scene = cube_scene(s, k)
            .unwrap()
            .with_camera_motion(CameraMotion::single_dof(0, 1.0));
        let flow = instantaneous_flow(&scene).unwrap();
        let d = scene.disparity();
        for i in 0..s.num_pixels() {
            assert_eq!(flow.at(i), [d.as_slice()[i] * 60.0, 0.0]);
        }
    }

    #[test]
    fn z_rotation_is_tangent_to_circles() {
        let (s, k) = k64();
        let theta = 1e-3;
        let scene = cube_scene(s, k)
            .unwrap()
            .with_camera_motion(CameraMotion::single_dof(5, 1.0));
        let flow = reproject_flow(&scene, theta).unwrap();
        for (i, (u, v)) in make_grid(s).coords().enumerate() {
            let (x, y) = (u - k.cx, v - k.cy);
            let [du, dv] = flow.at(i);
            let r = x.hypot(y);
            let radial = (du * x + dv * y) / r;
            let mag = du.hypot(dv);
            assert!(radial.abs() < 1e-5 * r.max(1.0), "radial {radial}");
            assert!((mag - theta * r).abs() < 1e-6 * r.max(1.0));
        }
    }

    #[test]
    fn halving_step_quarters_the_first_order_error() {
        let (s, k) = k64();
        let base = cube_scene(s, k).unwrap();
        let motions = [
            CameraMotion::single_dof(2, 1.0),
            CameraMotion::single_dof(3, 1.0),
            CameraMotion::single_dof(4, 1.0),
            CameraMotion::new([0.3, -0.2, 0.5], [0.2, 0.1, -0.4]).unwrap(),
        ];
        for m in motions {
            let scene = base.clone().with_camera_motion(m);
            let inst = instantaneous_flow(&scene).unwrap();
            let err = |step: f64| {
                reproject_flow(&scene, step)
                    .unwrap()
                    .axpy(-step, &inst)
                    .unwrap()
                    .norm()
            };
            let ratio = err(1e-2) / err(5e-3);
            assert!((3.5..=4.5).contains(&ratio), "{m:?}: {ratio}");
        }
    }

    #[test]
    fn moving_object_first_order_agreement() {
        let (s, k) = k64();
        let scene = two_object_scene(s, k)
            .unwrap()
            .with_camera_motion(CameraMotion::new([0.1, 0.0, 0.2], [0.0, 0.05, 0.0]).unwrap())
            .with_object_motion(
                0,
                CameraMotion::new([0.5, 0.0, -0.3], [0.1, 0.0, 0.2]).unwrap(),
            )
            .unwrap();
        let inst = instantaneous_flow(&scene).unwrap();
        let err = |step: f64| {
            reproject_flow(&scene, step)
                .unwrap()
                .axpy(-step, &inst)
                .unwrap()
                .norm()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn behind_camera_detected() {
        let (s, k) = k64();
        let scene = plane_scene(s, k, 1.0)
            .unwrap()
            .with_camera_motion(CameraMotion::single_dof(2, -2.0));
        assert!(matches!(
            reproject_flow(&scene, 1.0),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn overlapping_masks_rejected() {
        let (s, k) = k64();
        let m = block_mask(s, (0, 10), (0, 10));
        let obj = SceneObject {
            mask: m,
            motion: CameraMotion::default(),
        };
        assert!(matches!(
            Scene::new(
                ScalarField::filled(s, 5.0),
                k,
                vec![obj.clone(), obj],
                CameraMotion::default()
            ),
            Err(Error::OverlappingMasks(0))
        ));
    }
}
