use rand::Rng;
use rand_distr::StandardNormal;

use super::NetsError;
use crate::diffusion::{Conditioning, Denoiser, LatentGrid};

/// One isotropic Gaussian component.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Isotropic Gaussian mixture; its posterior mean is the exact denoiser for
/// data drawn from it.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    components: Vec<MixtureComponent>,
}

impl MixtureSpec {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self, NetsError> {
        let first = components
            .first()
            .ok_or_else(|| NetsError::Invalid("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(NetsError::Invalid("mixture dimension must be positive".into()));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(NetsError::Invalid(format!(
                    "component {i} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) || !(c.std > 0.0 && c.std.is_finite()) {
                return Err(NetsError::Invalid(format!(
                    "component {i} needs weight >= 0 and std > 0, got ({}, {})",
                    c.weight, c.std
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(NetsError::Invalid(format!("component {i} has a non-finite mean")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(NetsError::Invalid(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(MixtureSpec { components })
    }

    /// Single component `N(mean, std² I)`.
    pub fn gaussian(mean: Vec<f64>, std: f64) -> Result<Self, NetsError> {
        MixtureSpec::new(vec![MixtureComponent { weight: 1.0, mean, std }])
    }

    /// Equal-weight mixture over the given means.
    pub fn uniform(means: Vec<Vec<f64>>, std: f64) -> Result<Self, NetsError> {
        let w = 1.0 / means.len().max(1) as f64;
        MixtureSpec::new(
            means
                .into_iter()
                .map(|mean| MixtureComponent { weight: w, mean, std })
                .collect(),
        )
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Posterior responsibilities of each component given `x_t` at noise `σ`.
    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let d = self.dim() as f64;
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                if c.weight == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let v = c.std * c.std + sigma * sigma;
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, m)| (a - m) * (a - m)).sum();
                c.weight.ln() - 0.5 * d * v.ln() - sq / (2.0 * v)
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// `E[x0 | x_t]` for `x_t = x0 + σ ε`.
    pub fn denoise(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        assert_eq!(x.len(), self.dim(), "input dimension");
        let gamma = self.responsibilities(x, sigma);
        let mut out = vec![0.0; x.len()];
        for (c, g) in self.components.iter().zip(gamma) {
            if g == 0.0 {
                continue;
            }
            let k = c.std * c.std / (c.std * c.std + sigma * sigma);
            for ((o, xi), m) in out.iter_mut().zip(x).zip(&c.mean) {
                *o += g * (m + k * (xi - m));
            }
        }
        out
    }

    /// Draws one sample: a uniform pick of the component, then `dim` normals.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        chosen
            .mean
            .iter()
            .map(|m| m + chosen.std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Free-function form of [`MixtureSpec::denoise`].
pub fn analytic_denoise(mix: &MixtureSpec, x: &[f64], sigma: f64) -> Vec<f64> {
    mix.denoise(x, sigma)
}

/// Applies a mixture posterior independently to consecutive chunks of `dim`
/// latent entries, so one grid can hold many independent samples.
#[derive(Debug, Clone)]
pub struct MixtureDenoiser {
    pub spec: MixtureSpec,
}

impl Denoiser for MixtureDenoiser {
    /// Panics if the grid size is not a multiple of the mixture dimension.
    fn denoise(&self, z: &LatentGrid, sigma: f64, _: &Conditioning) -> LatentGrid {
        let dim = self.spec.dim();
        assert_eq!(
            z.len() % dim,
            0,
            "grid size must be a multiple of the mixture dimension"
        );
        let mut out = z.clone();
        for chunk in out.as_mut_slice().chunks_mut(dim) {
            let d = self.spec.denoise(chunk, sigma);
            chunk.copy_from_slice(&d);
        }
        out
    }
}

/// Label-conditional mixture: the text embedding's largest entry selects a
/// per-label mixture; a dropped text condition selects the unconditional one.
/// Pose conditioning is implicit in how the components were built.
#[derive(Debug, Clone)]
pub struct ConditionalMixture {
    pub labels: Vec<MixtureSpec>,
    pub unconditional: MixtureSpec,
}

impl ConditionalMixture {
    /// Per-label mixtures plus their equal-weight union as the unconditional branch.
    pub fn from_labels(labels: Vec<MixtureSpec>) -> Result<Self, NetsError> {
        let mut components = Vec::new();
        let n = labels.len() as f64;
        for spec in &labels {
            for c in spec.components() {
                components.push(MixtureComponent {
                    weight: c.weight / n,
                    ..c.clone()
                });
            }
        }
        let unconditional = MixtureSpec::new(components)?;
        Ok(ConditionalMixture { labels, unconditional })
    }

    fn select(&self, cond: &Conditioning) -> &MixtureSpec {
        match &cond.text {
            Some(e) if !e.is_empty() => {
                let label = e
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0;
                self.labels.get(label).unwrap_or(&self.unconditional)
            }
            _ => &self.unconditional,
        }
    }
}

impl Denoiser for ConditionalMixture {
    fn denoise(&self, z: &LatentGrid, sigma: f64, cond: &Conditioning) -> LatentGrid {
        MixtureDenoiser {
            spec: self.select(cond).clone(),
        }
        .denoise(z, sigma, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_component() -> MixtureSpec {
        MixtureSpec::new(vec![
            MixtureComponent {
                weight: 0.3,
                mean: vec![-1.0, 0.5],
                std: 0.4,
            },
            MixtureComponent {
                weight: 0.7,
                mean: vec![1.5, -0.5],
                std: 0.8,
            },
        ])
        .unwrap()
    }

    #[test]
    fn validation() {
        assert!(MixtureSpec::new(vec![]).is_err());
        assert!(MixtureSpec::gaussian(vec![0.0], 0.0).is_err());
        assert!(MixtureSpec::new(vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![0.0],
                std: 1.0
            },
            MixtureComponent {
                weight: 0.4,
                mean: vec![0.0],
                std: 1.0
            },
        ])
        .is_err());
        assert!(MixtureSpec::new(vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![0.0],
                std: 1.0
            },
            MixtureComponent {
                weight: 0.5,
                mean: vec![0.0, 1.0],
                std: 1.0
            },
        ])
        .is_err());
    }

    #[test]
    fn point_mass_and_noise_free_limits() {
        let m = MixtureSpec::gaussian(vec![2.0, -1.0], 1e-9).unwrap();
        let d = m.denoise(&[10.0, 3.0], 0.7);
        assert!((d[0] - 2.0).abs() < 1e-12 && (d[1] + 1.0).abs() < 1e-12);
        let m = MixtureSpec::gaussian(vec![2.0, -1.0], 0.5).unwrap();
        let d = m.denoise(&[0.3, 0.4], 0.0);
        assert!((d[0] - 0.3).abs() < 1e-15 && (d[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn far_inputs_do_not_underflow() {
        let m = two_component();
        let d = m.denoise(&[1e3, -1e3], 1e-3);
        assert!(d.iter().all(|v| v.is_finite()));
        let g = m.responsibilities(&[1e3, -1e3], 1e-3);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_mean_matches_importance_sampling() {
        // Self-normalised importance sampling with the prior as proposal:
        // E[x0 | x] = E_prior[x0 p(x | x0)] / E_prior[p(x | x0)].
        let m = two_component();
        let sigma = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for x in [[0.2, 0.1], [-1.2, 0.9], [2.0, -1.0]] {
            let (mut num, mut den) = ([0.0; 2], 0.0);
            for _ in 0..1_000_000 {
                let x0 = m.sample(&mut rng);
                let sq = (x[0] - x0[0]).powi(2) + (x[1] - x0[1]).powi(2);
                let w = (-sq / (2.0 * sigma * sigma)).exp();
                num[0] += w * x0[0];
                num[1] += w * x0[1];
                den += w;
            }
            let mc = [num[0] / den, num[1] / den];
            let exact = m.denoise(&x, sigma);
            let scale = exact.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for i in 0..2 {
                assert!((mc[i] - exact[i]).abs() < 0.01 * scale, "{mc:?} vs {exact:?}");
            }
        }
    }

    #[test]
    fn chunked_denoiser_treats_cells_independently() {
        let m = MixtureSpec::gaussian(vec![1.0], 0.5).unwrap();
        let den = MixtureDenoiser { spec: m.clone() };
        let z = LatentGrid::from_vec([1, 2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = den.denoise(&z, 1.0, &Conditioning::default());
        for (i, v) in out.as_slice().iter().enumerate() {
            assert_eq!(*v, m.denoise(&[z.as_slice()[i]], 1.0)[0]);
        }
    }

    #[test]
    fn conditional_selection() {
        let a = MixtureSpec::gaussian(vec![-1.0, -1.0], 0.01).unwrap();
        let b = MixtureSpec::gaussian(vec![1.0, 1.0], 0.01).unwrap();
        let cm = ConditionalMixture::from_labels(vec![a, b]).unwrap();
        assert_eq!(cm.unconditional.components().len(), 2);
        let z = LatentGrid::from_vec([1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        let with = |label| Conditioning {
            text: Some(crate::diffusion::label_embedding(label, 2)),
            poses: None,
        };
        assert!(cm.denoise(&z, 0.05, &with(0)).as_slice()[0] < -0.9);
        assert!(cm.denoise(&z, 0.05, &with(1)).as_slice()[0] > 0.9);
        let u = cm.denoise(&z, 0.05, &Conditioning::default());
        assert!(u.as_slice()[0].abs() < 1e-9);
    }
}
