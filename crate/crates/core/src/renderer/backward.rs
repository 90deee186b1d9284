use nalgebra::Vector3;

use super::raster::TileBins;
use super::{composite_pixel, project_all, Contribution, Renderer};
use crate::camera::{Intrinsics, Pose};
use crate::gaussians::GaussianScene;
use crate::imaging::{Image, ImageError};
use crate::par;

/// Gradients of `mean((rgb - target)²)` per primitive. Culled primitives get zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub loss: f64,
    pub rendered: Image,
    pub color: Vec<Vector3<f64>>,
    /// With respect to opacity itself.
    pub opacity: Vec<f64>,
    /// With respect to the opacity logit, `d/dα · α(1 - α)`.
    pub opacity_logit: Vec<f64>,
}

impl Renderer {
    pub fn loss_backward(
        &self,
        scene: &GaussianScene,
        intr: &Intrinsics,
        pose: &Pose,
        background: &Vector3<f64>,
        target: &Image,
    ) -> Result<LossGradients, ImageError> {
        if target.shape() != (intr.width, intr.height, 3) {
            return Err(ImageError::Shape(format!(
                "target is {:?}, camera renders {}x{}x3",
                target.shape(),
                intr.width,
                intr.height
            )));
        }
        let (projected, _) = project_all(&scene.primitives, intr, pose, &self.settings);
        let bins = TileBins::build(&projected, intr, &self.settings);
        let norm = 1.0 / (intr.width * intr.height * 3) as f64;

        // Each tile returns its pixels and per-slot partial gradients [dc0, dc1, dc2, dα].
        let tiles = par::map_indexed(self.settings.execution, bins.bins.len(), |t| {
            let (x0, x1, y0, y1) = bins.rect(t, intr);
            let list = &bins.bins[t];
            let mut grads = vec![[0.0f64; 4]; list.len()];
            let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
            let mut sq = 0.0;
            let mut contribs: Vec<Contribution> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    contribs.clear();
                    let px = composite_pixel(
                        list.iter().map(|&i| &projected[i as usize]),
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        background,
                        true,
                        Some(&mut contribs),
                    );
                    let residual = px.rgb - Vector3::from_fn(|c, _| target.get(x, y, c));
                    sq += residual.norm_squared();
                    let dl_dc = residual * (2.0 * norm);
                    // Colour of everything behind the current contribution,
                    // normalised by its transmittance: starts at the background.
                    let mut behind = *background;
                    for k in contribs.iter().rev() {
                        let g = &projected[list[k.slot] as usize];
                        let w = k.alpha * k.transmittance;
                        let slot = &mut grads[k.slot];
                        for c in 0..3 {
                            slot[c] += dl_dc[c] * w;
                        }
                        let d_alpha_eff = k.transmittance * dl_dc.dot(&(g.color - behind));
                        slot[3] += d_alpha_eff * k.falloff;
                        behind = g.color * k.alpha + behind * (1.0 - k.alpha);
                    }
                    pixels.push(px.rgb);
                }
            }
            (pixels, grads, sq)
        });

        let n = scene.primitives.len();
        let mut color = vec![Vector3::zeros(); n];
        let mut opacity = vec![0.0; n];
        let mut rendered = Image::new(intr.width, intr.height, 3);
        let mut loss = 0.0;
        // Fixed tile order keeps the reduction independent of thread count.
        for (t, (pixels, grads, sq)) in tiles.into_iter().enumerate() {
            loss += sq;
            let (x0, x1, y0, y1) = bins.rect(t, intr);
            let mut it = pixels.into_iter();
            for y in y0..y1 {
                for x in x0..x1 {
                    let rgb = it.next().unwrap();
                    for c in 0..3 {
                        rendered.set(x, y, c, rgb[c]);
                    }
                }
            }
            for (slot, g) in grads.iter().enumerate() {
                let idx = projected[bins.bins[t][slot] as usize].index;
                color[idx] += Vector3::new(g[0], g[1], g[2]);
                opacity[idx] += g[3];
            }
        }
        let opacity_logit = opacity
            .iter()
            .zip(&scene.primitives)
            .map(|(g, p)| g * p.opacity * (1.0 - p.opacity))
            .collect();
        Ok(LossGradients {
            loss: loss * norm,
            rendered,
            color,
            opacity,
            opacity_logit,
        })
    }
}

/// Colour/opacity gradients of the MSE render loss with default settings.
pub fn render_loss_backward(
    scene: &GaussianScene,
    intr: &Intrinsics,
    pose: &Pose,
    background: &Vector3<f64>,
    target: &Image,
) -> Result<LossGradients, ImageError> {
    Renderer::default().loss_backward(scene, intr, pose, background, target)
}
