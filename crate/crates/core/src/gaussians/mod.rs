//! Pixel-aligned Gaussian maps and world-space Gaussian scenes.
//!
//! A decoder emits 12 raw channels per pixel:
//!
//! | channels | meaning                     | activation                               |
//! |----------|-----------------------------|------------------------------------------|
//! | 0        | depth along the pixel ray   | `near + (far - near) * sigmoid`          |
//! | 1..5     | rotation quaternion (w,x,y,z) | normalise, identity if zero           |
//! | 5..8     | log scale                   | `exp(clamp(x, -10, 4))`                  |
//! | 8        | opacity logit               | `sigmoid`                                |
//! | 9..12    | colour logits (SH degree 0) | `sigmoid`                                |

mod ply;

pub use ply::{export_ply, import_ply, read_ply, write_ply, PlyError, SH_C0};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::camera::{self, Intrinsics, Pose};
use crate::par::{self, Execution};

pub const GAUSSIAN_CHANNELS: usize = 12;

pub mod channel {
    use std::ops::Range;
    pub const DEPTH: usize = 0;
    pub const ROTATION: Range<usize> = 1..5;
    pub const SCALE: Range<usize> = 5..8;
    pub const OPACITY: usize = 8;
    pub const COLOR: Range<usize> = 9..12;
}

pub const LOG_SCALE_MIN: f64 = -10.0;
pub const LOG_SCALE_MAX: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum GaussianError {
    #[error("raw map has {got} values, expected {expected} ({width}x{height}x12)")]
    RawShape {
        got: usize,
        expected: usize,
        width: usize,
        height: usize,
    },
    #[error("raw map contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid depth range: near = {near}, far = {far}")]
    DepthRange { near: f64, far: f64 },
    #[error("map is {map_w}x{map_h} but camera is {cam_w}x{cam_h}")]
    ResolutionMismatch {
        map_w: usize,
        map_h: usize,
        cam_w: usize,
        cam_h: usize,
    },
    #[error("primitive {index} violates invariant: {message}")]
    Invariant { index: usize, message: String },
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Raw decoder output for one view: `height x width x 12`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGaussianMap {
    width: usize,
    height: usize,
    view_index: usize,
    raw: Vec<f64>,
}

impl PixelGaussianMap {
    pub fn new(width: usize, height: usize, view_index: usize, raw: Vec<f64>) -> Result<Self, GaussianError> {
        let expected = width * height * GAUSSIAN_CHANNELS;
        if raw.len() != expected {
            return Err(GaussianError::RawShape {
                got: raw.len(),
                expected,
                width,
                height,
            });
        }
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            return Err(GaussianError::NonFinite(i));
        }
        Ok(PixelGaussianMap {
            width,
            height,
            view_index,
            raw,
        })
    }

    pub fn zeros(width: usize, height: usize, view_index: usize) -> Self {
        PixelGaussianMap {
            width,
            height,
            view_index,
            raw: vec![0.0; width * height * GAUSSIAN_CHANNELS],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn view_index(&self) -> usize {
        self.view_index
    }
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * GAUSSIAN_CHANNELS;
        &self.raw[i..i + GAUSSIAN_CHANNELS]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRange {
    pub near: f64,
    pub far: f64,
}

impl DepthRange {
    pub fn new(near: f64, far: f64) -> Result<Self, GaussianError> {
        if !(near > 0.0 && far > near && far.is_finite()) {
            return Err(GaussianError::DepthRange { near, far });
        }
        Ok(DepthRange { near, far })
    }

    pub fn span(&self) -> f64 {
        self.far - self.near
    }
}

/// Activated, camera-relative parameters of one pixel's Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivatedGaussian {
    /// Distance along the pixel ray.
    pub depth: f64,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl ActivatedGaussian {
    pub fn from_raw(raw: &[f64], range: &DepthRange) -> Self {
        let q = Quaternion::new(raw[1], raw[2], raw[3], raw[4]);
        let rotation = if q.norm() < 1e-12 {
            UnitQuaternion::identity()
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        let scale = Vector3::from_fn(|i, _| raw[channel::SCALE.start + i].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX).exp());
        ActivatedGaussian {
            depth: range.near + range.span() * sigmoid(raw[channel::DEPTH]),
            rotation,
            scale,
            opacity: sigmoid(raw[channel::OPACITY]),
            color: Vector3::from_fn(|i, _| sigmoid(raw[channel::COLOR.start + i])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedMap {
    pub width: usize,
    pub height: usize,
    pub view_index: usize,
    pub pixels: Vec<ActivatedGaussian>,
}

pub fn activate(raw: &PixelGaussianMap, range: &DepthRange) -> Result<ActivatedMap, GaussianError> {
    activate_with(raw, range, Execution::default())
}

pub fn activate_with(
    raw: &PixelGaussianMap,
    range: &DepthRange,
    exec: Execution,
) -> Result<ActivatedMap, GaussianError> {
    DepthRange::new(range.near, range.far)?;
    let pixels = par::map_indexed(exec, raw.width * raw.height, |i| {
        ActivatedGaussian::from_raw(&raw.raw[i * GAUSSIAN_CHANNELS..(i + 1) * GAUSSIAN_CHANNELS], range)
    });
    Ok(ActivatedMap {
        width: raw.width,
        height: raw.height,
        view_index: raw.view_index,
        pixels,
    })
}

/// A world-space 3D Gaussian with degree-0 (view-independent) colour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        GaussianPrimitive {
            mean,
            rotation: UnitQuaternion::identity(),
            scale: Vector3::repeat(scale),
            opacity,
            color,
        }
    }

    /// `R diag(s²) Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * s2 * r.transpose()
    }

    pub fn check(&self) -> Result<(), String> {
        let qn = self.rotation.quaternion().norm();
        if !((qn - 1.0).abs() <= 1e-6) {
            return Err(format!("|q| = {qn}"));
        }
        if !self.mean.iter().all(|x| x.is_finite()) {
            return Err("non-finite mean".into());
        }
        if !self.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(format!("scale {:?} not positive", self.scale.as_slice()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(format!("colour {:?} outside [0, 1]", self.color.as_slice()));
        }
        Ok(())
    }
}

/// Where a merged primitive came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub view: usize,
    pub u: usize,
    pub v: usize,
}

/// Primitives lifted from one view, in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedView {
    pub view_index: usize,
    pub width: usize,
    pub height: usize,
    pub primitives: Vec<GaussianPrimitive>,
}

/// Places each pixel's Gaussian at `origin + depth * direction` and rotates
/// its camera-relative orientation into the world frame.
pub fn lift_to_world(map: &ActivatedMap, intr: &Intrinsics, pose: &Pose) -> Result<LiftedView, GaussianError> {
    if map.width != intr.width || map.height != intr.height {
        return Err(GaussianError::ResolutionMismatch {
            map_w: map.width,
            map_h: map.height,
            cam_w: intr.width,
            cam_h: intr.height,
        });
    }
    let q_pose = pose.quaternion();
    let primitives = map
        .pixels
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let ray = camera::pixel_ray_unchecked(intr, pose, i % map.width, i / map.width);
            GaussianPrimitive {
                mean: ray.at(g.depth),
                rotation: q_pose * g.rotation,
                scale: g.scale,
                opacity: g.opacity,
                color: g.color,
            }
        })
        .collect();
    Ok(LiftedView {
        view_index: map.view_index,
        width: map.width,
        height: map.height,
        primitives,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub provenance: Option<Vec<Provenance>>,
}

impl GaussianScene {
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        GaussianScene {
            primitives,
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn validate(&self) -> Result<(), GaussianError> {
        for (index, p) in self.primitives.iter().enumerate() {
            p.check()
                .map_err(|message| GaussianError::Invariant { index, message })?;
        }
        Ok(())
    }

    /// Merges lifted views, recording `(view, u, v)` for every primitive.
    pub fn from_views(views: Vec<LiftedView>) -> Self {
        let mut provenance = Vec::new();
        for view in &views {
            provenance.extend((0..view.primitives.len()).map(|i| Provenance {
                view: view.view_index,
                u: i % view.width.max(1),
                v: i / view.width.max(1),
            }));
        }
        let mut scene = merge(views.into_iter().map(|v| v.primitives).collect());
        scene.provenance = Some(provenance);
        scene
    }
}

/// Concatenates per-view primitive lists, view-major.
pub fn merge(per_view: Vec<Vec<GaussianPrimitive>>) -> GaussianScene {
    let total = per_view.iter().map(Vec::len).sum();
    let mut primitives = Vec::with_capacity(total);
    for view in per_view {
        primitives.extend(view);
    }
    GaussianScene::new(primitives)
}
