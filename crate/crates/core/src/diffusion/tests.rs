use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::guidance::spatial_std;
use super::*;
use crate::par::Execution;

fn grid(shape: [usize; 4], seed: u64) -> LatentGrid {
    LatentGrid::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Posterior mean for data `N(mu, s² I)`, applied element-wise.
struct GaussianPosterior {
    mu: f64,
    s: f64,
}

impl Denoiser for GaussianPosterior {
    fn denoise(&self, z: &LatentGrid, sigma: f64, _: &Conditioning) -> LatentGrid {
        let k = self.s * self.s / (self.s * self.s + sigma * sigma);
        z.map(|x| self.mu + k * (x - self.mu))
    }
}

struct Zero;
impl RawNetwork for Zero {
    fn forward(&self, z: &LatentGrid, _: f64, _: &Conditioning) -> LatentGrid {
        z.map(|_| 0.0)
    }
}

struct Identity;
impl Denoiser for Identity {
    fn denoise(&self, z: &LatentGrid, _: f64, _: &Conditioning) -> LatentGrid {
        z.clone()
    }
}

fn fixed_sigma(sigma: f64) -> NoiseLevelDistribution {
    NoiseLevelDistribution {
        p_mean: sigma.ln(),
        p_std: 1e-300,
    }
}

#[test]
fn latent_grid_layout() {
    let mut g = LatentGrid::zeros(2, 3, 4, 5);
    assert_eq!(g.shape(), [2, 3, 4, 5]);
    g.set(1, 2, 3, 4, 7.0);
    assert_eq!(*g.as_slice().last().unwrap(), 7.0);
    assert_eq!(g.cell(1, 2, 3)[4], 7.0);
    assert_eq!(g.view(1).get(0, 2, 3, 4), 7.0);
    let s = LatentGrid::stack(&[g.view(0), g.view(1)]).unwrap();
    assert_eq!(s, g);
    assert!(LatentGrid::from_vec([1, 1, 1, 2], vec![0.0]).is_err());
    assert!(LatentGrid::from_vec([1, 1, 1, 1], vec![f64::NAN]).is_err());
}

#[test]
fn sigma_sampling() {
    let d = NoiseLevelDistribution::MULTI_VIEW;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s: Vec<f64> = (0..100_000).map(|_| d.sample(&mut rng)).collect();
    s.sort_by(f64::total_cmp);
    let median = 0.5 * (s[49_999] + s[50_000]);
    assert!((median / 1.5f64.exp() - 1.0).abs() < 0.03, "median {median}");

    let degenerate = fixed_sigma(0.7);
    assert!((degenerate.sample(&mut rng) - 0.7).abs() < 1e-12);

    let a: Vec<f64> = (0..5).map(|_| d.sample(&mut ChaCha8Rng::seed_from_u64(9))).collect();
    assert!(a.windows(2).all(|w| w[0] == w[1]));
    assert!(NoiseLevelDistribution::new(0.0, 0.0).is_err());
    assert_eq!(
        NoiseLevelDistribution::SINGLE_VIEW,
        NoiseLevelDistribution::new(-0.5, 1.2).unwrap()
    );
}

#[test]
fn forward_noising() {
    let z0 = grid([2, 4, 4, 3], 0);
    let eps = grid([2, 4, 4, 3], 1);
    assert_eq!(add_noise(&z0, 0.0, &eps).unwrap(), z0);
    assert_eq!(add_noise(&z0, 3.0, &LatentGrid::zeros(2, 4, 4, 3)).unwrap(), z0);
    assert!(matches!(
        add_noise(&z0, 1.0, &LatentGrid::zeros(1, 4, 4, 3)),
        Err(DiffusionError::Shape(..))
    ));

    let z0 = LatentGrid::zeros(1, 100, 100, 10);
    let zt = add_noise(&z0, 2.5, &grid([1, 100, 100, 10], 2)).unwrap();
    let n = zt.len() as f64;
    let mean = zt.as_slice().iter().sum::<f64>() / n;
    let var = zt.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!((var / 6.25 - 1.0).abs() < 0.02, "variance {var}");
}

#[test]
fn preconditioning_coefficients() {
    let c = coefficients(0.5, 0.5).unwrap();
    assert!((c.c_skip - 0.5).abs() < 1e-15);
    let c = coefficients(1e-9, 0.5).unwrap();
    assert!((c.c_skip - 1.0).abs() < 1e-15 && c.c_out < 1e-8);
    let c = coefficients(2.0, 0.5).unwrap();
    assert!((c.c_in - 1.0 / 4.25f64.sqrt()).abs() < 1e-15);
    assert!((c.c_noise - 2f64.ln() / 4.0).abs() < 1e-15);
    assert!(coefficients(0.0, 0.5).is_err());
    assert!(coefficients(1.0, -1.0).is_err());
    assert!(Preconditioned::new(Zero, 0.0).is_err());

    let g = Preconditioned::new(Zero, 0.5).unwrap();
    let z = grid([1, 3, 3, 2], 3);
    let c = coefficients(1.3, 0.5).unwrap();
    assert_eq!(g.denoise(&z, 1.3, &Conditioning::default()), z.scaled(c.c_skip));
}

#[test]
fn dsm_weight_and_trivial_losses() {
    assert_eq!(dsm_weight(1.0), 2.0);
    let z0 = grid([1, 4, 4, 2], 4);
    let perfect = GaussianPosterior { mu: 0.0, s: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // s = 0 collapses to the constant 0; use data that is exactly 0.
    let zeros = LatentGrid::zeros(1, 4, 4, 2);
    let d = dsm_loss(&perfect, &zeros, &Conditioning::default(), &fixed_sigma(1.0), &mut rng);
    assert_eq!(d.loss, 0.0);
    assert!(
        dsm_loss(
            &Identity,
            &z0,
            &Conditioning::default(),
            &NoiseLevelDistribution::MULTI_VIEW,
            &mut rng
        )
        .loss
            > 0.0
    );
}

#[test]
fn identity_denoiser_expected_loss() {
    let z0 = grid([1, 50, 50, 4], 6);
    for sigma in [0.3, 1.0, 4.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20;
        let mean = (0..n)
            .map(|_| dsm_loss(&Identity, &z0, &Conditioning::default(), &fixed_sigma(sigma), &mut rng).loss)
            .sum::<f64>()
            / n as f64;
        let expect = 1.0 + sigma * sigma;
        assert!((mean / expect - 1.0).abs() < 0.03, "σ={sigma}: {mean} vs {expect}");
    }
}

#[test]
fn optimal_preconditioned_loss_is_flat_in_sigma() {
    // Unit-variance data with σ_data = 1: the optimal raw network is zero.
    let g = Preconditioned::new(Zero, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let losses: Vec<f64> = [0.1, 1.0, 10.0]
        .iter()
        .map(|&s| {
            (0..20)
                .map(|_| {
                    let z0 = LatentGrid::randn([1, 32, 32, 4], &mut rng);
                    dsm_loss(&g, &z0, &Conditioning::default(), &fixed_sigma(s), &mut rng).loss
                })
                .sum::<f64>()
                / 20.0
        })
        .collect();
    for l in &losses {
        assert!((l - 1.0).abs() < 0.1, "{losses:?}");
    }
}

#[test]
fn euler_step_identities() {
    let z = grid([1, 4, 4, 3], 9);
    let d = grid([1, 4, 4, 3], 10);
    assert_eq!(euler_step(&z, &z, 2.0, 1.0).unwrap(), z);
    assert_eq!(euler_step(&z, &d, 2.0, 2.0).unwrap(), z);
    assert_eq!(euler_step(&z, &d, 2.0, 0.0).unwrap(), d);
    assert!(euler_step(&z, &d, 0.0, 0.0).is_err());
    let step = euler_step(&z, &d, 2.0, 0.5).unwrap();
    let (a, b) = (z.get(0, 1, 2, 1), d.get(0, 1, 2, 1));
    assert!((step.get(0, 1, 2, 1) - ((a - b) / 2.0 * (0.5 - 2.0) + a)).abs() < 1e-15);
}

#[test]
fn karras_schedule() {
    let s = SigmaSchedule::karras(64, 0.002, 80.0, 7.0).unwrap();
    assert_eq!(s.steps(), 64);
    assert_eq!(s.sigmas().len(), 65);
    assert!((s.sigma_max() - 80.0).abs() < 1e-12);
    assert!((s.sigmas()[64] - 0.002).abs() < 1e-15);
    assert!(s.sigmas().windows(2).all(|w| w[1] < w[0]));
    let mid = (80f64.powf(1.0 / 7.0) + 0.5 * (0.002f64.powf(1.0 / 7.0) - 80f64.powf(1.0 / 7.0))).powi(7);
    assert!((s.sigmas()[32] - mid).abs() < 1e-12);

    assert!(SigmaSchedule::new(vec![1.0, 0.5, 0.0]).is_ok());
    assert!(SigmaSchedule::new(vec![1.0, 0.0, 0.0]).is_err());
    assert!(SigmaSchedule::new(vec![1.0, 1.0]).is_err());
    assert!(SigmaSchedule::new(vec![1.0]).is_err());
    assert!(SigmaSchedule::karras(0, 0.002, 80.0, 7.0).is_err());
    assert!(SigmaSchedule::karras(8, 80.0, 0.002, 7.0).is_err());
}

/// Variance after Euler integration for data `N(mu, s²)`: the ODE is linear,
/// so every step scales the offset from `mu` by `1 + σ (σ' - σ) / (s² + σ²)`.
fn euler_variance(schedule: &SigmaSchedule, s: f64) -> f64 {
    let gain: f64 = schedule
        .sigmas()
        .windows(2)
        .map(|w| 1.0 + w[0] * (w[1] - w[0]) / (s * s + w[0] * w[0]))
        .product();
    (schedule.sigma_max() * gain).powi(2)
}

fn sample_moments(den: &GaussianPosterior, steps: usize, seed: u64) -> (f64, f64) {
    let schedule = SigmaSchedule::karras(steps, 0.002, 80.0, 7.0).unwrap();
    let out = sample(
        den,
        &Conditioning::default(),
        &schedule,
        &Guidance::default(),
        [1, 100, 100, 1],
        &mut ChaCha8Rng::seed_from_u64(seed),
        Execution::Sequential,
    )
    .unwrap();
    let n = out.len() as f64;
    let mean = out.as_slice().iter().sum::<f64>() / n;
    let var = out.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn sampler_matches_single_gaussian() {
    let (mu, s) = (0.7, 0.3);
    let den = GaussianPosterior { mu, s };
    let (mean, var) = sample_moments(&den, 64, 11);
    // Standard error of the mean is s / 100.
    assert!((mean - mu).abs() < 3.0 * s / 100.0, "mean {mean}");
    let schedule = SigmaSchedule::karras(64, 0.002, 80.0, 7.0).unwrap();
    let predicted = euler_variance(&schedule, s);
    assert!((var / predicted - 1.0).abs() < 0.05, "var {var} vs {predicted}");
    // Discretisation error vanishes with more steps.
    let (_, var) = sample_moments(&den, 512, 12);
    assert!((var / (s * s) - 1.0).abs() < 0.05, "var {var}");
}

#[test]
fn sampler_is_deterministic() {
    let den = GaussianPosterior { mu: 0.1, s: 0.5 };
    let schedule = SigmaSchedule::karras(16, 0.002, 80.0, 7.0).unwrap();
    let guidance = Guidance {
        mode: GuidanceMode::Hybrid { w1: 1.5, w2: 0.5 },
        rescale: 0.7,
    };
    let run = |exec| {
        sample(
            &den,
            &Conditioning::default(),
            &schedule,
            &guidance,
            [2, 4, 4, 3],
            &mut ChaCha8Rng::seed_from_u64(12),
            exec,
        )
        .unwrap()
    };
    let a = run(Execution::Sequential);
    assert_eq!(a, run(Execution::Sequential));
    assert_eq!(a, run(Execution::Parallel));
}

#[test]
fn sampler_reports_divergence() {
    struct Explode;
    impl Denoiser for Explode {
        fn denoise(&self, z: &LatentGrid, _: f64, _: &Conditioning) -> LatentGrid {
            z.map(|_| f64::INFINITY)
        }
    }
    let schedule = SigmaSchedule::karras(4, 0.002, 80.0, 7.0).unwrap();
    let r = sample(
        &Explode,
        &Conditioning::default(),
        &schedule,
        &Guidance::default(),
        [1, 2, 2, 1],
        &mut ChaCha8Rng::seed_from_u64(0),
        Execution::Sequential,
    );
    assert!(matches!(r, Err(DiffusionError::Divergence(_))));
}

#[test]
fn guidance_identities() {
    let c = grid([2, 5, 5, 3], 13);
    let u = grid([2, 5, 5, 3], 14);
    let t = grid([2, 5, 5, 3], 15);
    assert_eq!(guide_naive(&c, &u, 1.0).unwrap(), c);
    assert_eq!(guide_naive(&c, &u, 0.0).unwrap(), u);
    assert!(guide_naive(&c, &c, 3.7).unwrap().max_abs_diff(&c) < 1e-14);
    assert_eq!(guide_hybrid(&c, &u, &t, 0.0, 0.0).unwrap(), c);
    assert_eq!(guide_hybrid(&c, &c, &c, 2.0, 5.0).unwrap(), c);
    let h = guide_hybrid(&c, &u, &t, 1.7, 0.0).unwrap();
    assert!(h.max_abs_diff(&guide_naive(&c, &u, 2.7).unwrap()) < 1e-12);
    assert!(guide_naive(&c, &LatentGrid::zeros(1, 5, 5, 3), 1.0).is_err());
    assert!(guide_hybrid(&c, &u, &LatentGrid::zeros(2, 5, 5, 2), 1.0, 1.0).is_err());
}

#[test]
fn rescale_properties() {
    let c = grid([2, 6, 6, 3], 16);
    let g = grid([2, 6, 6, 3], 17).scaled(3.0);
    assert_eq!(cfg_rescale(&g, &c, 0.0).unwrap(), g);
    assert!(cfg_rescale(&c, &c, 0.6).unwrap().max_abs_diff(&c) < 1e-15);
    for phi in [0.25, 0.7, 1.0] {
        let out = cfg_rescale(&g, &c, phi).unwrap();
        for v in 0..2 {
            for ch in 0..3 {
                let expect = phi * spatial_std(&c, v, ch, 6, 6) + (1.0 - phi) * spatial_std(&g, v, ch, 6, 6);
                assert!((spatial_std(&out, v, ch, 6, 6) - expect).abs() < 1e-6);
            }
        }
    }
    let flat = LatentGrid::zeros(2, 6, 6, 3).map(|_| 0.25);
    assert_eq!(cfg_rescale(&flat, &c, 1.0).unwrap(), flat);
}

#[test]
fn guidance_validation() {
    let bad = Guidance {
        mode: GuidanceMode::Naive { w: -1.0 },
        rescale: 0.0,
    };
    assert!(bad.validate().is_err());
    let bad = Guidance {
        mode: GuidanceMode::Conditional,
        rescale: 1.5,
    };
    assert!(bad.validate().is_err());
    assert!(SamplerConfig::default().validate().is_ok());
    let cfg = SamplerConfig {
        p_std: 0.0,
        ..Default::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn conditioning_dropout() {
    let cond = Conditioning::new(vec![1.0, 0.0], vec![]);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..100 {
        assert_eq!(cond_dropout(&cond, &mut rng, 0.0, 0.0), cond);
        let d = cond_dropout(&cond, &mut rng, 1.0, 1.0);
        assert!(d.text.is_none() && d.poses.is_none());
    }
    let n = 100_000;
    let (mut text, mut pose) = (0, 0);
    for _ in 0..n {
        let d = cond_dropout(&cond, &mut rng, COND_DROPOUT, COND_DROPOUT);
        text += d.text.is_none() as usize;
        pose += d.poses.is_none() as usize;
    }
    assert!((text as f64 / n as f64 - 0.1).abs() < 0.005);
    assert!((pose as f64 / n as f64 - 0.1).abs() < 0.005);
    assert_eq!(cond.without_text().text_or_null(2), vec![0.0, 0.0]);
    assert_eq!(label_embedding(1, 3), vec![0.0, 1.0, 0.0]);
}

proptest! {
    #[test]
    fn guidance_is_affine(seed in 0u64..500, a in -2.0..2.0f64, w in 0.0..5.0f64, w2 in 0.0..5.0f64, phi in 0.0..1.0f64) {
        let shape = [2, 3, 3, 2];
        let (x1, x2, y1, y2, t1, t2) = (
            grid(shape, seed), grid(shape, seed + 1000), grid(shape, seed + 2000),
            grid(shape, seed + 3000), grid(shape, seed + 4000), grid(shape, seed + 5000),
        );
        let mix = |p: &LatentGrid, q: &LatentGrid| p.axpby(a, q, 1.0 - a).unwrap();
        let lhs = guide_naive(&mix(&x1, &x2), &mix(&y1, &y2), w).unwrap();
        let rhs = mix(&guide_naive(&x1, &y1, w).unwrap(), &guide_naive(&x2, &y2, w).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        let lhs = guide_hybrid(&mix(&x1, &x2), &mix(&y1, &y2), &mix(&t1, &t2), w, w2).unwrap();
        let rhs = mix(
            &guide_hybrid(&x1, &y1, &t1, w, w2).unwrap(),
            &guide_hybrid(&x2, &y2, &t2, w, w2).unwrap(),
        );
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        // Rescaling preserves shape.
        prop_assert_eq!(cfg_rescale(&x1, &y1, phi).unwrap().shape(), shape);
    }
}
