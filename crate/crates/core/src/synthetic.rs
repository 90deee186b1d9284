//! Synthetic scenes and camera rigs with known geometry.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics, Pose};
use crate::gaussians::{GaussianPrimitive, GaussianScene};
use crate::imaging::Image;
use crate::renderer::{RenderOutput, Renderer};

/// Parameters for random Gaussian scenes inside an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub min_count: usize,
    pub max_count: usize,
    /// Half the box side; the box is centred on the origin.
    pub half_extent: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub min_opacity: f64,
    pub max_opacity: f64,
    /// Optional base colour; samples are jittered around it.
    pub palette: Option<[f64; 3]>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            min_count: 5,
            max_count: 50,
            half_extent: 0.5,
            min_scale: 0.08,
            max_scale: 0.25,
            min_opacity: 0.6,
            max_opacity: 0.95,
            palette: None,
        }
    }
}

pub fn random_unit_quaternion(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    loop {
        let q = Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            return UnitQuaternion::from_quaternion(q);
        }
    }
}

pub fn random_scene(rng: &mut impl Rng, spec: &SceneSpec) -> GaussianScene {
    let n = rng.gen_range(spec.min_count..=spec.max_count.max(spec.min_count));
    let h = spec.half_extent;
    let primitives = (0..n)
        .map(|_| {
            let color = match spec.palette {
                Some(base) => Vector3::from_fn(|i, _| (base[i] + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0)),
                None => Vector3::from_fn(|_, _| rng.gen_range(0.0..1.0)),
            };
            GaussianPrimitive {
                mean: Vector3::from_fn(|_, _| rng.gen_range(-h..h)),
                rotation: random_unit_quaternion(rng),
                scale: Vector3::from_fn(|_, _| rng.gen_range(spec.min_scale..spec.max_scale)),
                opacity: rng.gen_range(spec.min_opacity..spec.max_opacity),
                color,
            }
        })
        .collect();
    GaussianScene::new(primitives)
}

/// Random primitives in front of a camera at the identity pose, for renderer tests.
pub fn random_frustum_scene(rng: &mut impl Rng, count: usize) -> GaussianScene {
    let primitives = (0..count)
        .map(|_| {
            let z = rng.gen_range(1.5..6.0);
            GaussianPrimitive {
                mean: Vector3::new(rng.gen_range(-0.7..0.7) * z, rng.gen_range(-0.7..0.7) * z, z),
                rotation: random_unit_quaternion(rng),
                scale: Vector3::from_fn(|_, _| rng.gen_range(0.01..0.3)),
                opacity: rng.gen_range(0.05..0.99),
                color: Vector3::from_fn(|_, _| rng.gen_range(0.0..1.0)),
            }
        })
        .collect();
    GaussianScene::new(primitives)
}

/// `n` cameras on a horizontal circle looking at the origin, evenly spaced
/// over `arc` radians starting at `phase`.
pub fn camera_ring(n: usize, radius: f64, elevation: f64, phase: f64, arc: f64, intrinsics: Intrinsics) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let a = phase + arc * i as f64 / n.max(1) as f64;
            let eye = Vector3::new(radius * a.cos(), -elevation, radius * a.sin());
            Camera {
                intrinsics,
                pose: Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0))
                    .expect("ring cameras are never degenerate"),
            }
        })
        .collect()
}

/// RGB-D observation of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub rgb: Image,
    /// Expected camera depth; pixels the scene does not cover hold the background depth.
    pub depth: Image,
}

/// Expected depth blended towards a far plane by the uncovered fraction,
/// `α·D̂ + (1 - α)·background_depth`, so the map is dense.
pub fn completed_depth(out: &RenderOutput, background_depth: f64) -> Image {
    Image::from_fn(out.depth.width(), out.depth.height(), 1, |x, y, _| {
        let a = out.alpha.get(x, y, 0);
        a * out.depth.get(x, y, 0) + (1.0 - a) * background_depth
    })
}

pub fn observe(
    renderer: &Renderer,
    scene: &GaussianScene,
    cameras: &[Camera],
    background: &Vector3<f64>,
    background_depth: f64,
) -> Vec<View> {
    cameras
        .iter()
        .map(|cam| {
            let out = renderer.render(scene, &cam.intrinsics, &cam.pose, background);
            View {
                camera: *cam,
                depth: completed_depth(&out, background_depth),
                rgb: out.rgb,
            }
        })
        .collect()
}
