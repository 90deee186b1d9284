//! CPU splatting rasterizer.
//!
//! [`render`] bins projected Gaussians into square tiles, sorts each bin by
//! camera depth and alpha-composites front to back, stopping once
//! transmittance falls below [`TRANSMITTANCE_EPS`]. [`render_reference`] does
//! the same per pixel over a single global sort, without tiles or early
//! termination; it exists to check the tiled path. [`render_loss_backward`]
//! returns MSE gradients with respect to colour and opacity.

mod backward;
mod raster;

pub use backward::{render_loss_backward, LossGradients};
pub use raster::{render, render_reference, Renderer};

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Pose};
use crate::gaussians::GaussianPrimitive;
use crate::imaging::Image;
use crate::par::Execution;

/// Contributions below this opacity are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Per-pixel compositing stops when transmittance drops below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Screen-space dilation added to every projected covariance, in px².
pub const LOW_PASS: f64 = 0.3;
/// Floor on accumulated weight when normalising expected depth.
pub const DEPTH_WEIGHT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// Primitives with camera depth at or below this are culled.
    pub near: f64,
    pub execution: Execution,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            tile_size: 16,
            near: 0.01,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RenderStats {
    pub visible: usize,
    pub behind_camera: usize,
    pub degenerate: usize,
    pub off_screen: usize,
    pub transparent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// `H x W x 3`.
    pub rgb: Image,
    /// Expected camera depth, `H x W x 1`; zero where nothing was hit.
    pub depth: Image,
    /// Accumulated opacity `1 - T`, `H x W x 1`.
    pub alpha: Image,
    pub stats: RenderStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CullReason {
    BehindCamera,
    Degenerate,
    OffScreen,
    /// Opacity below [`MIN_ALPHA`]: cannot contribute to any pixel.
    Transparent,
}

/// A primitive after EWA projection into pixel space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    /// Index of the source primitive in the scene.
    pub index: usize,
    pub mean2d: Vector2<f64>,
    /// Upper triangle `(a, b, c)` of the inverse screen covariance.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    /// Half-width of the axis-aligned box outside of which every contribution
    /// falls below [`MIN_ALPHA`].
    pub radius: f64,
}

impl ProjectedGaussian {
    /// Gaussian falloff `exp(-½ dᵀ conic d)` at a pixel-space point.
    #[inline]
    pub fn falloff(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean2d.x;
        let dy = y - self.mean2d.y;
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        if power > 0.0 {
            0.0
        } else {
            power.exp()
        }
    }

    /// Pixel index ranges `[x0, x1) x [y0, y1)` whose centres fall inside the footprint.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let span = |m: f64, n: usize| -> Option<(usize, usize)> {
            let lo = (m - self.radius - 0.5).ceil().max(0.0);
            let hi = (m + self.radius - 0.5).floor().min(n as f64 - 1.0);
            if hi < lo {
                None
            } else {
                Some((lo as usize, hi as usize + 1))
            }
        };
        let (x0, x1) = span(self.mean2d.x, width)?;
        let (y0, y1) = span(self.mean2d.y, height)?;
        Some((x0, x1, y0, y1))
    }
}

/// Screen-space mean, covariance (without low-pass) and camera depth.
pub fn screen_covariance(
    primitive: &GaussianPrimitive,
    intr: &Intrinsics,
    pose: &Pose,
) -> Option<(Vector2<f64>, Matrix2<f64>, f64)> {
    let t = pose.world_to_camera(&primitive.mean);
    if t.z <= 0.0 {
        return None;
    }
    let (z, z2) = (t.z, t.z * t.z);
    let jac = Matrix2x3::new(
        intr.fx / z,
        0.0,
        -intr.fx * t.x / z2,
        0.0,
        intr.fy / z,
        -intr.fy * t.y / z2,
    );
    let w = pose.rotation().transpose();
    let m = jac * w;
    let cov = m * primitive.covariance() * m.transpose();
    let (x, y) = intr.project_camera_point(&t);
    Some((Vector2::new(x, y), cov, z))
}

/// EWA projection of one primitive.
pub fn project(
    index: usize,
    primitive: &GaussianPrimitive,
    intr: &Intrinsics,
    pose: &Pose,
    near: f64,
) -> Result<ProjectedGaussian, CullReason> {
    let t = pose.world_to_camera(&primitive.mean);
    if !(t.z > near) {
        return Err(CullReason::BehindCamera);
    }
    if primitive.opacity < MIN_ALPHA {
        return Err(CullReason::Transparent);
    }
    let (mean2d, cov, depth) = screen_covariance(primitive, intr, pose).ok_or(CullReason::BehindCamera)?;
    let (a, b, c) = (cov[(0, 0)] + LOW_PASS, cov[(0, 1)], cov[(1, 1)] + LOW_PASS);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return Err(CullReason::Degenerate);
    }
    let conic = [c / det, -b / det, a / det];
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    // Beyond k standard deviations, opacity * exp(-k²/2) < 1/255.
    let k = (2.0 * (primitive.opacity / MIN_ALPHA).ln()).max(0.0).sqrt().max(3.0) + 1e-3;
    let projected = ProjectedGaussian {
        index,
        mean2d,
        conic,
        depth,
        opacity: primitive.opacity,
        color: primitive.color,
        radius: k * lambda_max.sqrt(),
    };
    if projected.pixel_bounds(intr.width, intr.height).is_none() {
        return Err(CullReason::OffScreen);
    }
    Ok(projected)
}

pub(crate) fn project_all(
    primitives: &[GaussianPrimitive],
    intr: &Intrinsics,
    pose: &Pose,
    settings: &RenderSettings,
) -> (Vec<ProjectedGaussian>, RenderStats) {
    let results = crate::par::map_indexed(settings.execution, primitives.len(), |i| {
        project(i, &primitives[i], intr, pose, settings.near)
    });
    let mut stats = RenderStats::default();
    let mut visible = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(p) => visible.push(p),
            Err(CullReason::BehindCamera) => stats.behind_camera += 1,
            Err(CullReason::Degenerate) => stats.degenerate += 1,
            Err(CullReason::OffScreen) => stats.off_screen += 1,
            Err(CullReason::Transparent) => stats.transparent += 1,
        }
    }
    stats.visible = visible.len();
    (visible, stats)
}

/// Front-to-back ordering shared by all paths: camera depth, then scene index.
pub(crate) fn depth_order(a: &ProjectedGaussian, b: &ProjectedGaussian) -> std::cmp::Ordering {
    a.depth.total_cmp(&b.depth).then_with(|| a.index.cmp(&b.index))
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PixelResult {
    pub rgb: Vector3<f64>,
    pub depth: f64,
    pub alpha: f64,
}

/// One contribution recorded during compositing.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    /// Position in the candidate list.
    pub slot: usize,
    pub alpha: f64,
    pub falloff: f64,
    pub transmittance: f64,
}

/// Composites `candidates` (already depth sorted) at one pixel centre.
#[inline]
pub(crate) fn composite_pixel<'a>(
    candidates: impl Iterator<Item = &'a ProjectedGaussian>,
    x: f64,
    y: f64,
    background: &Vector3<f64>,
    early_stop: bool,
    mut record: Option<&mut Vec<Contribution>>,
) -> PixelResult {
    let mut t = 1.0;
    let mut color = Vector3::zeros();
    let mut depth_sum = 0.0;
    let mut weight = 0.0;
    for (slot, g) in candidates.enumerate() {
        let falloff = g.falloff(x, y);
        let a = g.opacity * falloff;
        if a < MIN_ALPHA {
            continue;
        }
        let w = a * t;
        color += g.color * w;
        depth_sum += g.depth * w;
        weight += w;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Contribution {
                slot,
                alpha: a,
                falloff,
                transmittance: t,
            });
        }
        t *= 1.0 - a;
        if early_stop && t < TRANSMITTANCE_EPS {
            break;
        }
    }
    PixelResult {
        rgb: color + background * t,
        depth: depth_sum / weight.max(DEPTH_WEIGHT_EPS),
        alpha: 1.0 - t,
    }
}
