use super::{same_shape, MetricsError};
use crate::imaging::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" Gaussian filter of one channel.
fn filter(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid window positions and channels (dynamic range 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let (w, h, ch) = a.shape();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let k = gaussian_kernel();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        let x = a.channel(c).into_vec();
        let y = b.channel(c).into_vec();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter(&x, w, h, &k), filter(&y, w, h, &k));
        let (sxx, syy, sxy) = (filter(&xx, w, h, &k), filter(&yy, w, h, &k), filter(&xy, w, h, &k));
        for i in 0..mx.len() {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct windowed SSIM without separable filtering.
    fn brute(a: &Image, b: &Image) -> f64 {
        let (w, h, ch) = a.shape();
        let c = (SSIM_WINDOW / 2) as f64;
        let mut wts = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        let mut s = 0.0;
        for (i, row) in wts.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                *v = (-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                s += *v;
            }
        }
        let (c1, c2) = (SSIM_K1.powi(2), SSIM_K2.powi(2));
        let mut total = 0.0;
        let mut n = 0;
        for k in 0..ch {
            for y0 in 0..=h - SSIM_WINDOW {
                for x0 in 0..=w - SSIM_WINDOW {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let g = wts[i][j] / s;
                            mx += g * a.get(x0 + j, y0 + i, k);
                            my += g * b.get(x0 + j, y0 + i, k);
                        }
                    }
                    let (mut vx, mut vy, mut cv) = (0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let g = wts[i][j] / s;
                            let dx = a.get(x0 + j, y0 + i, k) - mx;
                            let dy = b.get(x0 + j, y0 + i, k) - my;
                            vx += g * dx * dx;
                            vy += g * dy * dy;
                            cv += g * dx * dy;
                        }
                    }
                    total += ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn identical_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Image::from_fn(16, 13, 3, |_, _, _| rng.gen());
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn checkerboard_against_negative() {
        let a = Image::from_fn(14, 12, 1, |x, y, _| ((x + y) % 2) as f64);
        let neg = a.map(|v| 1.0 - v);
        let got = ssim(&a, &neg).unwrap();
        assert!((got - brute(&a, &neg)).abs() < 1e-10);
        assert!(got < 0.0);
    }

    #[test]
    fn random_pair_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Image::from_fn(15, 17, 3, |_, _, _| rng.gen());
        let b = Image::from_fn(15, 17, 3, |x, y, c| {
            (a.get(x, y, c) * 0.7 + 0.1 * rng.gen::<f64>()).min(1.0)
        });
        assert!((ssim(&a, &b).unwrap() - brute(&a, &b)).abs() < 1e-10);
    }

    #[test]
    fn constants_reduce_to_luminance_term() {
        let (p, q) = (0.3, 0.7);
        let a = Image::filled(11, 11, 1, p);
        let b = Image::filled(11, 11, 1, q);
        let c1 = SSIM_K1 * SSIM_K1;
        let expect = (2.0 * p * q + c1) / (p * p + q * q + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn too_small() {
        let a = Image::new(10, 20, 1);
        assert!(matches!(ssim(&a, &a), Err(MetricsError::TooSmall { .. })));
    }
}
