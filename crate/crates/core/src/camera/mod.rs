//! Pinhole cameras, per-pixel rays and Plücker ray maps.
//!
//! Conventions: the camera frame is right-handed with +x right, +y down and
//! +z forward. Poses are stored camera-to-world. Pixel `(u, v)` is sampled at
//! its centre `(u + 0.5, v + 0.5)`.

mod trajectory;

pub use trajectory::{format_trajectory, load_trajectory, parse_trajectory, save_trajectory, Camera};

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};

/// Tolerance used when validating that a rotation is orthonormal.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with det +1 (|RᵀR - I| = {orthogonality:.3e}, det = {det:.6})")]
    InvalidRotation { orthogonality: f64, det: f64 },
    #[error("pose translation is not finite")]
    NonFiniteTranslation,
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds {
        u: usize,
        v: usize,
        width: usize,
        height: usize,
    },
    #[error("trajectory line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trajectory I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, CameraError> {
        let intr = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square-pixel camera with the principal point at the image centre.
    pub fn from_fov_y(width: usize, height: usize, fov_y: f64) -> Result<Self, CameraError> {
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let bad = |m: &str| Err(CameraError::InvalidIntrinsics(m.to_string()));
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return bad("focal lengths must be positive and finite");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image dimensions must be non-zero");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx must lie in [0, width)");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy must lie in [0, height)");
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Intrinsics of the same camera at `1/factor` resolution.
    pub fn downscaled(&self, factor: usize) -> Result<Self, CameraError> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "{}x{} is not divisible by {factor}",
                self.width, self.height
            )));
        }
        let s = factor as f64;
        Self::new(
            self.fx / s,
            self.fy / s,
            self.cx / s,
            self.cy / s,
            self.width / factor,
            self.height / factor,
        )
    }

    /// Unnormalised camera-frame direction through a (possibly fractional) pixel coordinate.
    pub fn camera_direction(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, CameraError> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(CameraError::NonFiniteTranslation);
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(rotation: &Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    /// Camera at `eye` looking at `target`. `up` is the approximate world up
    /// direction; the camera's +y axis points opposite to it.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self, CameraError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 || !forward.iter().all(|x| x.is_finite()) {
            return Err(CameraError::InvalidRotation {
                orthogonality: f64::NAN,
                det: 0.0,
            });
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Pose::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// Camera origin in world coordinates.
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Left-composes a world-frame rotation: the returned pose is this camera
    /// rigidly rotated about the world origin.
    pub fn rotated_by(&self, r: &Matrix3<f64>) -> Result<Self, CameraError> {
        Pose::new(r * self.rotation, r * self.translation)
    }

    /// Projects a world point to pixel coordinates and camera depth.
    pub fn project(&self, intr: &Intrinsics, world: &Point3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(&world.coords);
        if c.z <= 0.0 {
            return None;
        }
        let (x, y) = intr.project_camera_point(&c);
        Some((x, y, c.z))
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), CameraError> {
    let orthogonality = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !(orthogonality <= ROTATION_TOLERANCE) || !((det - 1.0).abs() <= ROTATION_TOLERANCE) {
        return Err(CameraError::InvalidRotation { orthogonality, det });
    }
    Ok(())
}

/// A world-space line in Plücker form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        let direction = direction.normalize();
        Ray {
            origin,
            direction,
            moment: origin.cross(&direction),
        }
    }

    pub fn plucker(&self) -> [f64; 6] {
        let d = self.direction;
        let m = self.moment;
        [d.x, d.y, d.z, m.x, m.y, m.z]
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// World-space ray through the centre of pixel `(u, v)`.
pub fn pixel_ray(intr: &Intrinsics, pose: &Pose, u: usize, v: usize) -> Result<Ray, CameraError> {
    if u >= intr.width || v >= intr.height {
        return Err(CameraError::PixelOutOfBounds {
            u,
            v,
            width: intr.width,
            height: intr.height,
        });
    }
    Ok(pixel_ray_unchecked(intr, pose, u, v))
}

pub(crate) fn pixel_ray_unchecked(intr: &Intrinsics, pose: &Pose, u: usize, v: usize) -> Ray {
    let dir_cam = intr.camera_direction(u as f64 + 0.5, v as f64 + 0.5);
    Ray::new(pose.translation, pose.rotation * dir_cam)
}

/// Per-pixel Plücker coordinates `(d, p × d)`, stored row-major, 6 channels per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RayMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RayMap {
    pub const CHANNELS: usize = 6;

    /// All-zero map, used as the null pose condition.
    pub fn zeros(width: usize, height: usize) -> Self {
        RayMap {
            width,
            height,
            data: vec![0.0; width * height * Self::CHANNELS],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * Self::CHANNELS;
        &self.data[i..i + Self::CHANNELS]
    }

    /// Applies a rotation to both the direction and moment halves of every entry.
    pub fn rotate(&self, r: &Matrix3<f64>) -> RayMap {
        let mut data = self.data.clone();
        for px in data.chunks_exact_mut(Self::CHANNELS) {
            let d = r * Vector3::new(px[0], px[1], px[2]);
            let m = r * Vector3::new(px[3], px[4], px[5]);
            px.copy_from_slice(&[d.x, d.y, d.z, m.x, m.y, m.z]);
        }
        RayMap {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &RayMap) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn compute_ray_map(intr: &Intrinsics, pose: &Pose) -> RayMap {
    compute_ray_map_with(intr, pose, Execution::default())
}

pub fn compute_ray_map_with(intr: &Intrinsics, pose: &Pose, exec: Execution) -> RayMap {
    let (w, h) = (intr.width, intr.height);
    let mut data = vec![0.0; w * h * RayMap::CHANNELS];
    par::for_each_chunk_mut(exec, &mut data, w * RayMap::CHANNELS, |v, row| {
        for (u, px) in row.chunks_exact_mut(RayMap::CHANNELS).enumerate() {
            px.copy_from_slice(&pixel_ray_unchecked(intr, pose, u, v).plucker());
        }
    });
    RayMap {
        width: w,
        height: h,
        data,
    }
}
