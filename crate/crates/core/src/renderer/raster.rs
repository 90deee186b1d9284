use nalgebra::Vector3;

use super::{composite_pixel, depth_order, project_all, PixelResult, ProjectedGaussian, RenderOutput, RenderSettings};
use crate::camera::{Intrinsics, Pose};
use crate::gaussians::GaussianScene;
use crate::imaging::Image;
use crate::par;

#[derive(Debug, Clone, Copy, Default)]
pub struct Renderer {
    pub settings: RenderSettings,
}

/// Depth-sorted candidate lists per tile, as indices into the projected list.
pub(crate) struct TileBins {
    pub tiles_x: usize,
    pub tile: usize,
    pub bins: Vec<Vec<u32>>,
}

impl TileBins {
    pub fn build(projected: &[ProjectedGaussian], intr: &Intrinsics, settings: &RenderSettings) -> Self {
        let tile = settings.tile_size.max(1);
        let tiles_x = intr.width.div_ceil(tile);
        let tiles_y = intr.height.div_ceil(tile);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for (i, g) in projected.iter().enumerate() {
            if let Some((x0, x1, y0, y1)) = g.pixel_bounds(intr.width, intr.height) {
                for ty in y0 / tile..=(y1 - 1) / tile {
                    for tx in x0 / tile..=(x1 - 1) / tile {
                        bins[ty * tiles_x + tx].push(i as u32);
                    }
                }
            }
        }
        par::for_each_chunk_mut(settings.execution, &mut bins, 1, |_, b| {
            b[0].sort_by(|&i, &j| depth_order(&projected[i as usize], &projected[j as usize]));
        });
        TileBins { tiles_x, tile, bins }
    }

    /// Pixel rectangle `[x0, x1) x [y0, y1)` covered by tile `t`.
    pub fn rect(&self, t: usize, intr: &Intrinsics) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        (
            x0,
            (x0 + self.tile).min(intr.width),
            y0,
            (y0 + self.tile).min(intr.height),
        )
    }
}

impl Renderer {
    pub fn new(settings: RenderSettings) -> Self {
        Renderer { settings }
    }

    pub fn render(
        &self,
        scene: &GaussianScene,
        intr: &Intrinsics,
        pose: &Pose,
        background: &Vector3<f64>,
    ) -> RenderOutput {
        let (projected, stats) = project_all(&scene.primitives, intr, pose, &self.settings);
        let bins = TileBins::build(&projected, intr, &self.settings);
        let tiles = par::map_indexed(self.settings.execution, bins.bins.len(), |t| {
            let (x0, x1, y0, y1) = bins.rect(t, intr);
            let list = &bins.bins[t];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    out.push(composite_pixel(
                        list.iter().map(|&i| &projected[i as usize]),
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        background,
                        true,
                        None,
                    ));
                }
            }
            out
        });
        let mut output = blank(intr, stats);
        for (t, pixels) in tiles.into_iter().enumerate() {
            let (x0, x1, y0, y1) = bins.rect(t, intr);
            let mut it = pixels.into_iter();
            for y in y0..y1 {
                for x in x0..x1 {
                    write_pixel(&mut output, x, y, it.next().unwrap());
                }
            }
        }
        output
    }

    pub fn render_reference(
        &self,
        scene: &GaussianScene,
        intr: &Intrinsics,
        pose: &Pose,
        background: &Vector3<f64>,
    ) -> RenderOutput {
        let (mut projected, stats) = project_all(&scene.primitives, intr, pose, &self.settings);
        projected.sort_by(depth_order);
        let mut output = blank(intr, stats);
        for y in 0..intr.height {
            for x in 0..intr.width {
                let px = composite_pixel(
                    projected.iter(),
                    x as f64 + 0.5,
                    y as f64 + 0.5,
                    background,
                    false,
                    None,
                );
                write_pixel(&mut output, x, y, px);
            }
        }
        output
    }
}

fn blank(intr: &Intrinsics, stats: super::RenderStats) -> RenderOutput {
    RenderOutput {
        rgb: Image::new(intr.width, intr.height, 3),
        depth: Image::new(intr.width, intr.height, 1),
        alpha: Image::new(intr.width, intr.height, 1),
        stats,
    }
}

fn write_pixel(out: &mut RenderOutput, x: usize, y: usize, px: PixelResult) {
    for c in 0..3 {
        out.rgb.set(x, y, c, px.rgb[c]);
    }
    out.depth.set(x, y, 0, px.depth);
    out.alpha.set(x, y, 0, px.alpha);
}

/// Tiled render with default settings.
pub fn render(scene: &GaussianScene, intr: &Intrinsics, pose: &Pose, background: &Vector3<f64>) -> RenderOutput {
    Renderer::default().render(scene, intr, pose, background)
}

/// Brute-force render with default settings.
pub fn render_reference(
    scene: &GaussianScene,
    intr: &Intrinsics,
    pose: &Pose,
    background: &Vector3<f64>,
) -> RenderOutput {
    Renderer::default().render_reference(scene, intr, pose, background)
}
