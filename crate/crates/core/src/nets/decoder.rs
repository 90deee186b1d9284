use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, NamedArray};
use super::codec::{upsample_bilinear, LATENT_CHANNELS};
use super::{NetsError, TinyNet};
use crate::camera::RayMap;
use crate::diffusion::LatentGrid;
use crate::gaussians::{channel, logit, PixelGaussianMap, GAUSSIAN_CHANNELS};
use crate::par::{self, Execution};

/// Per-pixel decoder input: upsampled latent, Plücker ray, upsampled fused latent.
pub const DECODER_INPUTS: usize = LATENT_CHANNELS + RayMap::CHANNELS + LATENT_CHANNELS;

/// Concatenated per-pixel decoder inputs for `N` views.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInput {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    features: Vec<f64>,
}

impl DecoderInput {
    /// Upsamples `latents` and `fused` to the ray-map resolution and concatenates
    /// them with the rays.
    pub fn build(latents: &LatentGrid, fused: &LatentGrid, raymaps: &[RayMap]) -> Result<Self, NetsError> {
        let [n, h, w, c] = latents.shape();
        if fused.shape() != latents.shape() || c != LATENT_CHANNELS || raymaps.len() != n || n == 0 {
            return Err(NetsError::Shape(format!(
                "decoder needs matching {LATENT_CHANNELS}-channel latent/fused grids and one ray map per view, got {:?}, {:?}, {} ray maps",
                latents.shape(),
                fused.shape(),
                raymaps.len()
            )));
        }
        let (width, height) = (raymaps[0].width(), raymaps[0].height());
        let factor = width / w.max(1);
        if raymaps.iter().any(|r| r.width() != width || r.height() != height)
            || factor == 0
            || width != w * factor
            || height != h * factor
        {
            return Err(NetsError::Shape(format!(
                "ray maps must all be {}x{} for a {w}x{h} latent grid",
                w * factor.max(1),
                h * factor.max(1)
            )));
        }
        let up = upsample_bilinear(latents, factor);
        let upf = upsample_bilinear(fused, factor);
        let mut features = Vec::with_capacity(n * width * height * DECODER_INPUTS);
        for (v, rays) in raymaps.iter().enumerate() {
            for y in 0..height {
                for x in 0..width {
                    features.extend_from_slice(up.cell(v, y, x));
                    features.extend_from_slice(rays.get(x, y));
                    features.extend_from_slice(upf.cell(v, y, x));
                }
            }
        }
        Ok(DecoderInput {
            views: n,
            width,
            height,
            features,
        })
    }

    pub fn pixels(&self) -> usize {
        self.views * self.width * self.height
    }

    /// Input vector of flat pixel index `i` (view-major, then row-major).
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.features[i * DECODER_INPUTS..(i + 1) * DECODER_INPUTS]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    /// Target splat standard deviation in pixels at the reference depth.
    pub footprint_px: f64,
    pub init_opacity: f64,
    /// Weight scale of the MLP output layer at initialisation.
    pub output_gain: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 32,
            footprint_px: 0.5,
            init_opacity: 0.9,
            output_gain: 0.1,
        }
    }
}

/// Log world scale giving a `px`-pixel footprint at distance `depth`.
pub fn footprint_log_scale(fx: f64, depth: f64, px: f64) -> f64 {
    (px * depth / fx).ln()
}

/// Per-pixel map to raw Gaussian channels: a tanh MLP plus a linear skip.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    pub mlp: TinyNet,
    /// `GAUSSIAN_CHANNELS x DECODER_INPUTS`, row major.
    pub skip: Vec<f64>,
}

impl ToyDecoder {
    pub fn zeros(hidden: usize) -> Result<Self, NetsError> {
        Ok(ToyDecoder {
            mlp: TinyNet::zeros(&[DECODER_INPUTS, hidden, GAUSSIAN_CHANNELS])?,
            skip: vec![0.0; GAUSSIAN_CHANNELS * DECODER_INPUTS],
        })
    }

    /// Random MLP with a small output layer, output biases at identity
    /// rotation, `log_scale` and the configured opacity, and a skip that
    /// passes latent colour and depth through to their raw channels.
    pub fn new(cfg: &DecoderConfig, log_scale: f64, rng: &mut impl Rng) -> Result<Self, NetsError> {
        if cfg.hidden == 0 || !(cfg.init_opacity > 0.0 && cfg.init_opacity < 1.0) {
            return Err(NetsError::Invalid(format!("invalid decoder config {cfg:?}")));
        }
        let mut mlp = TinyNet::random(&[DECODER_INPUTS, cfg.hidden, GAUSSIAN_CHANNELS], 1.0, rng)?;
        let (w, b) = mlp.layer_range(1);
        let p = mlp.params_mut();
        p[w].iter_mut().for_each(|v| *v *= cfg.output_gain);
        let bias = &mut p[b];
        bias.iter_mut().for_each(|v| *v = 0.0);
        bias[channel::ROTATION.start] = 1.0;
        for c in channel::SCALE {
            bias[c] = log_scale;
        }
        bias[channel::OPACITY] = logit(cfg.init_opacity);
        let mut skip = vec![0.0; GAUSSIAN_CHANNELS * DECODER_INPUTS];
        // sigmoid(4 t) approximates t + 0.5 near the centre of [-0.5, 0.5].
        for c in 0..3 {
            skip[(channel::COLOR.start + c) * DECODER_INPUTS + c] = 4.0;
        }
        skip[channel::DEPTH * DECODER_INPUTS + 3] = 4.0;
        Ok(ToyDecoder { mlp, skip })
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params() + self.skip.len()
    }

    /// MLP parameters followed by the skip matrix.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.mlp.params().to_vec();
        p.extend_from_slice(&self.skip);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let n = self.mlp.num_params();
        self.mlp.params_mut().copy_from_slice(&params[..n]);
        self.skip.copy_from_slice(&params[n..]);
    }

    pub fn forward_pixel(&self, x: &[f64]) -> [f64; GAUSSIAN_CHANNELS] {
        let y = self.mlp.forward(x).expect("decoder input width");
        let mut out = [0.0; GAUSSIAN_CHANNELS];
        for (o, row) in out.iter_mut().enumerate() {
            let s = &self.skip[o * DECODER_INPUTS..(o + 1) * DECODER_INPUTS];
            *row = y[o] + s.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }

    /// Raw Gaussian maps, one per view.
    pub fn decode(&self, input: &DecoderInput, exec: Execution) -> Result<Vec<PixelGaussianMap>, NetsError> {
        let hw = input.width * input.height;
        (0..input.views)
            .map(|v| {
                let rows = par::map_indexed(exec, input.height, |y| {
                    let mut row = Vec::with_capacity(input.width * GAUSSIAN_CHANNELS);
                    for x in 0..input.width {
                        row.extend_from_slice(&self.forward_pixel(input.pixel(v * hw + y * input.width + x)));
                    }
                    row
                });
                PixelGaussianMap::new(input.width, input.height, v, rows.concat())
                    .map_err(|e| NetsError::Invalid(format!("decoded view {v}: {e}")))
            })
            .collect()
    }

    /// Gradient of a loss with respect to all parameters (layout of
    /// [`ToyDecoder::params`]) given `dL/draw` for every pixel. Rows are
    /// processed in parallel and summed in row order.
    pub fn backward(&self, input: &DecoderInput, draw: &[f64], exec: Execution) -> Vec<f64> {
        assert_eq!(draw.len(), input.pixels() * GAUSSIAN_CHANNELS, "gradient length");
        let n_mlp = self.mlp.num_params();
        let rows = input.views * input.height;
        let partial = par::map_indexed(exec, rows, |r| {
            let mut g = vec![0.0; self.num_params()];
            let (mlp_g, skip_g) = g.split_at_mut(n_mlp);
            for x in 0..input.width {
                let i = r * input.width + x;
                let d = &draw[i * GAUSSIAN_CHANNELS..(i + 1) * GAUSSIAN_CHANNELS];
                if d.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let xi = input.pixel(i);
                let trace = self.mlp.forward_trace(xi).expect("decoder input width");
                self.mlp.backward(&trace, d, mlp_g).expect("decoder gradient shapes");
                for (o, dv) in d.iter().enumerate() {
                    if *dv != 0.0 {
                        let row = &mut skip_g[o * DECODER_INPUTS..(o + 1) * DECODER_INPUTS];
                        for (s, xv) in row.iter_mut().zip(xi) {
                            *s += dv * xv;
                        }
                    }
                }
            }
            g
        });
        let mut total = vec![0.0; self.num_params()];
        for g in partial {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        total
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<(), NetsError> {
        let sizes: Vec<f64> = self.mlp.sizes().iter().map(|&s| s as f64).collect();
        ckpt.push(NamedArray::new("decoder.sizes", vec![sizes.len()], sizes)?);
        ckpt.push(NamedArray::new(
            "decoder.mlp",
            vec![self.mlp.num_params()],
            self.mlp.params().to_vec(),
        )?);
        ckpt.push(NamedArray::new(
            "decoder.skip",
            vec![GAUSSIAN_CHANNELS, DECODER_INPUTS],
            self.skip.clone(),
        )?);
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NetsError> {
        let sizes: Vec<usize> = ckpt.get("decoder.sizes")?.data.iter().map(|&s| s as usize).collect();
        if sizes.len() != 3 || sizes[0] != DECODER_INPUTS || sizes[2] != GAUSSIAN_CHANNELS {
            return Err(NetsError::Checkpoint(format!("unexpected decoder sizes {sizes:?}")));
        }
        let mlp = TinyNet::from_params(&sizes, ckpt.get("decoder.mlp")?.data.clone())?;
        let skip = ckpt.get("decoder.skip")?;
        if skip.shape != [GAUSSIAN_CHANNELS, DECODER_INPUTS] {
            return Err(NetsError::Checkpoint("decoder skip has the wrong shape".into()));
        }
        Ok(ToyDecoder {
            mlp,
            skip: skip.data.clone(),
        })
    }
}

/// Builds decoder inputs from `(Z, Z̃, R)` and decodes one raw map per view.
pub fn decode_gaussians(
    decoder: &ToyDecoder,
    latents: &LatentGrid,
    fused: &LatentGrid,
    raymaps: &[RayMap],
    exec: Execution,
) -> Result<Vec<PixelGaussianMap>, NetsError> {
    decoder.decode(&DecoderInput::build(latents, fused, raymaps)?, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{compute_ray_map, Intrinsics, Pose};
    use crate::gaussians::{activate, DepthRange};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const RAY_OFFSET: usize = LATENT_CHANNELS;
    const FUSED_OFFSET: usize = LATENT_CHANNELS + RayMap::CHANNELS;

    fn inputs(n: usize, seed: u64) -> (LatentGrid, LatentGrid, Vec<RayMap>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intr = Intrinsics::from_fov_y(8, 8, 1.0).unwrap();
        let rays = (0..n)
            .map(|i| compute_ray_map(&intr, &Pose::from_translation([i as f64, 0.0, 0.0].into())))
            .collect();
        (
            LatentGrid::randn([n, 2, 2, LATENT_CHANNELS], &mut rng),
            LatentGrid::randn([n, 2, 2, LATENT_CHANNELS], &mut rng),
            rays,
        )
    }

    #[test]
    fn zero_decoder_gives_default_gaussians() {
        let (z, f, r) = inputs(2, 0);
        let dec = ToyDecoder::zeros(4).unwrap();
        let maps = decode_gaussians(&dec, &z, &f, &r, Execution::Sequential).unwrap();
        assert_eq!(maps.len(), 2);
        assert!(maps.iter().all(|m| m.raw().iter().all(|v| *v == 0.0)));
        let range = DepthRange::new(1.0, 3.0).unwrap();
        let a = activate(&maps[1], &range).unwrap();
        assert_eq!(a.pixels[0].depth, 2.0);
        assert_eq!(a.pixels[0].opacity, 0.5);
    }

    #[test]
    fn output_shape_and_layout() {
        let (z, f, r) = inputs(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = ToyDecoder::new(&DecoderConfig::default(), -3.0, &mut rng).unwrap();
        let input = DecoderInput::build(&z, &f, &r).unwrap();
        assert_eq!(input.pixels(), 3 * 64);
        let x = input.pixel(64 + 8 * 3 + 5);
        assert_eq!(&x[RAY_OFFSET..FUSED_OFFSET], r[1].get(5, 3));
        let maps = dec.decode(&input, Execution::Parallel).unwrap();
        assert_eq!(maps.len(), 3);
        assert_eq!((maps[2].width(), maps[2].height(), maps[2].view_index()), (8, 8, 2));
        assert_eq!(maps[1].pixel(5, 3), &dec.forward_pixel(x)[..]);
        assert_eq!(maps, dec.decode(&input, Execution::Sequential).unwrap());
        assert!(DecoderInput::build(&z, &f, &r[..2]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (z, f, r) = inputs(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DecoderConfig {
            hidden: 6,
            output_gain: 1.0,
            ..Default::default()
        };
        let dec = ToyDecoder::new(&cfg, -2.0, &mut rng).unwrap();
        let input = DecoderInput::build(&z, &f, &r).unwrap();
        let weights: Vec<f64> = (0..input.pixels() * GAUSSIAN_CHANNELS)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let loss = |d: &ToyDecoder| -> f64 {
            d.decode(&input, Execution::Sequential)
                .unwrap()
                .iter()
                .flat_map(|m| m.raw().to_vec())
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = dec.backward(&input, &weights, Execution::Parallel);
        assert_eq!(g, dec.backward(&input, &weights, Execution::Sequential));
        let p = dec.params();
        let h = 1e-5;
        for i in (0..p.len()).step_by(7) {
            let mut a = dec.clone();
            let mut pa = p.clone();
            pa[i] += h;
            a.set_params(&pa);
            let mut b = dec.clone();
            let mut pb = p.clone();
            pb[i] -= h;
            b.set_params(&pb);
            let num = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!(
                (num - g[i]).abs() <= 1e-6 * num.abs().max(1.0),
                "param {i}: {num} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = ToyDecoder::new(&DecoderConfig::default(), -3.0, &mut rng).unwrap();
        let mut ck = Checkpoint::default();
        dec.to_checkpoint(&mut ck).unwrap();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = ToyDecoder::from_checkpoint(&Checkpoint::read_from(bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back, dec);
    }
}
