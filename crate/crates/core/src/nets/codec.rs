use super::NetsError;
use crate::camera::{Intrinsics, RayMap};
use crate::diffusion::LatentGrid;
use crate::gaussians::DepthRange;
use crate::imaging::Image;

/// Spatial downsampling factor of the toy codec.
pub const LATENT_FACTOR: usize = 4;
/// Latent channels: mean RGB (centred), normalised depth, luminance x/y
/// gradients and depth x/y gradients.
pub const LATENT_CHANNELS: usize = 8;

/// Fixed average-pooling encoder of RGB-D images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyCodec {
    pub factor: usize,
    pub range: DepthRange,
}

fn luminance(rgb: &Image, x: usize, y: usize) -> f64 {
    0.299 * rgb.get(x, y, 0) + 0.587 * rgb.get(x, y, 1) + 0.114 * rgb.get(x, y, 2)
}

/// Forward difference along x (`dx`) or y, zero at the last column/row.
fn forward_diff(f: &dyn Fn(usize, usize) -> f64, x: usize, y: usize, w: usize, h: usize, dx: bool) -> f64 {
    if dx {
        if x + 1 < w {
            f(x + 1, y) - f(x, y)
        } else {
            0.0
        }
    } else if y + 1 < h {
        f(x, y + 1) - f(x, y)
    } else {
        0.0
    }
}

impl ToyCodec {
    pub fn new(factor: usize, range: DepthRange) -> Self {
        ToyCodec { factor, range }
    }

    /// Depth mapped to roughly `[-0.5, 0.5]` over the configured range.
    pub fn normalise_depth(&self, d: f64) -> f64 {
        (d - self.range.near) / self.range.span() - 0.5
    }

    /// Encodes one view; `depth` is along-ray distance.
    pub fn encode(&self, rgb: &Image, depth: &Image) -> Result<LatentGrid, NetsError> {
        let (w, h) = (rgb.width(), rgb.height());
        let f = self.factor;
        if rgb.channels() != 3 || depth.shape() != (w, h, 1) {
            return Err(NetsError::Shape(format!(
                "expected RGB and single-channel depth of equal size, got {:?} and {:?}",
                rgb.shape(),
                depth.shape()
            )));
        }
        if f == 0 || w % f != 0 || h % f != 0 {
            return Err(NetsError::Shape(format!("{w}x{h} is not divisible by factor {f}")));
        }
        let lum = |x: usize, y: usize| luminance(rgb, x, y);
        let dep = |x: usize, y: usize| self.normalise_depth(depth.get(x, y, 0));
        let mut grid = LatentGrid::zeros(1, h / f, w / f, LATENT_CHANNELS);
        let norm = 1.0 / (f * f) as f64;
        for ly in 0..h / f {
            for lx in 0..w / f {
                let mut acc = [0.0; LATENT_CHANNELS];
                for y in ly * f..(ly + 1) * f {
                    for x in lx * f..(lx + 1) * f {
                        for c in 0..3 {
                            acc[c] += rgb.get(x, y, c) - 0.5;
                        }
                        acc[3] += dep(x, y);
                        acc[4] += forward_diff(&lum, x, y, w, h, true);
                        acc[5] += forward_diff(&lum, x, y, w, h, false);
                        acc[6] += forward_diff(&dep, x, y, w, h, true);
                        acc[7] += forward_diff(&dep, x, y, w, h, false);
                    }
                }
                let cell = grid.cell_mut(0, ly, lx);
                for c in 0..LATENT_CHANNELS {
                    // Gradients are expressed per latent cell rather than per pixel.
                    let s = if c >= 4 { norm * f as f64 } else { norm };
                    cell[c] = acc[c] * s;
                }
            }
        }
        Ok(grid)
    }

    /// Encodes several views into one multi-view grid.
    pub fn encode_views(&self, views: &[(&Image, &Image)]) -> Result<LatentGrid, NetsError> {
        let grids = views
            .iter()
            .map(|(rgb, depth)| self.encode(rgb, depth))
            .collect::<Result<Vec<_>, _>>()?;
        LatentGrid::stack(&grids).map_err(|e| NetsError::Shape(e.to_string()))
    }
}

/// Converts expected camera-z depth to distance along each pixel's unit ray.
pub fn ray_distance(z_depth: &Image, intr: &Intrinsics) -> Image {
    Image::from_fn(z_depth.width(), z_depth.height(), 1, |x, y, _| {
        let d = intr.camera_direction(x as f64 + 0.5, y as f64 + 0.5);
        z_depth.get(x, y, 0) * d.norm()
    })
}

/// Bilinear upsampling of every view by `factor`, sampling the latent grid at
/// pixel centres with edge clamping. Output is `N x (h f) x (w f) x c`.
pub fn upsample_bilinear(grid: &LatentGrid, factor: usize) -> LatentGrid {
    let [n, h, w, c] = grid.shape();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = LatentGrid::zeros(n, oh, ow, c);
    let coord = |p: usize, size: usize| {
        let t = ((p as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (size - 1) as f64);
        let i0 = (t.floor() as usize).min(size - 1);
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, t - i0 as f64)
    };
    for v in 0..n {
        for y in 0..oh {
            let (y0, y1, ty) = coord(y, h);
            for x in 0..ow {
                let (x0, x1, tx) = coord(x, w);
                for ch in 0..c {
                    let top = grid.get(v, y0, x0, ch) * (1.0 - tx) + grid.get(v, y0, x1, ch) * tx;
                    let bot = grid.get(v, y1, x0, ch) * (1.0 - tx) + grid.get(v, y1, x1, ch) * tx;
                    out.set(v, y, x, ch, top * (1.0 - ty) + bot * ty);
                }
            }
        }
    }
    out
}

/// Averages a ray map over `factor x factor` blocks.
pub fn pool_ray_map(rays: &RayMap, factor: usize) -> Vec<[f64; 6]> {
    let (w, h) = (rays.width() / factor, rays.height() / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![[0.0; 6]; w * h];
    for (i, cell) in out.iter_mut().enumerate() {
        let (lx, ly) = (i % w, i / w);
        for y in ly * factor..(ly + 1) * factor {
            for x in lx * factor..(lx + 1) * factor {
                for (c, v) in rays.get(x, y).iter().enumerate() {
                    cell[c] += v * norm;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn codec() -> ToyCodec {
        ToyCodec::new(4, DepthRange::new(1.0, 5.0).unwrap())
    }

    #[test]
    fn constant_images_encode_to_constants() {
        let rgb = Image::filled(8, 8, 3, 0.75);
        let depth = Image::filled(8, 8, 1, 2.0);
        let g = codec().encode(&rgb, &depth).unwrap();
        assert_eq!(g.shape(), [1, 2, 2, 8]);
        for y in 0..2 {
            for x in 0..2 {
                let c = g.cell(0, y, x);
                assert!((c[0] - 0.25).abs() < 1e-15);
                assert!((c[3] - (-0.25)).abs() < 1e-15);
                assert!(c[4..].iter().all(|v| v.abs() < 1e-15));
            }
        }
    }

    #[test]
    fn pooling_matches_block_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rgb = Image::from_fn(8, 4, 3, |_, _, _| rng.gen());
        let depth = Image::from_fn(8, 4, 1, |x, _, _| 1.0 + x as f64 * 0.5);
        let g = codec().encode(&rgb, &depth).unwrap();
        let mut mean = 0.0;
        for y in 0..4 {
            for x in 4..8 {
                mean += rgb.get(x, y, 1);
            }
        }
        assert!((g.get(0, 0, 1, 1) - (mean / 16.0 - 0.5)).abs() < 1e-12);
        // Depth ramps by 0.125 per pixel in normalised units, 0.5 per cell;
        // in the last block 3 of 4 columns have a forward neighbour.
        assert!((g.get(0, 0, 0, 6) - 0.5).abs() < 1e-12);
        assert!((g.get(0, 0, 1, 6) - 0.375).abs() < 1e-12);
        assert!(g.get(0, 0, 0, 7).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let c = codec();
        assert!(c.encode(&Image::new(6, 8, 3), &Image::new(6, 8, 1)).is_err());
        assert!(c.encode(&Image::new(8, 8, 3), &Image::new(8, 4, 1)).is_err());
    }

    #[test]
    fn upsampling_preserves_constants_and_interpolates() {
        let g = LatentGrid::from_vec([1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&g, 4);
        assert_eq!(up.shape(), [1, 4, 8, 1]);
        let row: Vec<f64> = (0..8).map(|x| up.get(0, 0, x, 0)).collect();
        assert_eq!(row, vec![0.0, 0.0, 0.125, 0.375, 0.625, 0.875, 1.0, 1.0]);
        let flat = LatentGrid::from_vec([2, 2, 2, 1], vec![3.0; 8]).unwrap();
        assert!(upsample_bilinear(&flat, 3).as_slice().iter().all(|v| *v == 3.0));
    }

    #[test]
    fn ray_distance_on_axis_equals_z() {
        let intr = Intrinsics::new(10.0, 10.0, 2.5, 2.5, 5, 5).unwrap();
        let z = Image::filled(5, 5, 1, 2.0);
        let d = ray_distance(&z, &intr);
        assert!((d.get(2, 2, 0) - 2.0).abs() < 1e-15);
        assert!(d.get(0, 0, 0) > 2.0);
    }
}
