use rand::Rng;
use rand_distr::StandardNormal;

use super::NetsError;

/// Dense network with tanh hidden layers and a linear output layer.
/// Parameters live in one flat vector: per layer the `out x in` weight
/// matrix (row major) followed by the `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Layer activations recorded by [`TinyNet::forward_trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Input, each post-tanh hidden layer, and the output.
    pub layers: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("trace has an output")
    }
}

impl TinyNet {
    /// All-zero parameters.
    pub fn zeros(sizes: &[usize]) -> Result<Self, NetsError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NetsError::Invalid(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        Ok(TinyNet {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// Weights drawn from `N(0, gain² / fan_in)`, zero biases.
    pub fn random(sizes: &[usize], gain: f64, rng: &mut impl Rng) -> Result<Self, NetsError> {
        let mut net = TinyNet::zeros(sizes)?;
        for l in 0..net.depth() {
            let std = gain / (net.sizes[l] as f64).sqrt();
            let (w, _) = net.layer_range(l);
            for p in &mut net.params[w] {
                *p = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self, NetsError> {
        let mut net = TinyNet::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(NetsError::Shape(format!(
                "{} parameters for sizes {sizes:?}, expected {}",
                params.len(),
                net.params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NetsError::Invalid("non-finite parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }
    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }
    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Index ranges of layer `l`'s weights and biases in the flat vector.
    pub fn layer_range(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.sizes[..=l].windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        (start..start + o * i, start + o * i..start + o * (i + 1))
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NetsError> {
        if x.len() != self.input_dim() {
            return Err(NetsError::Shape(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetsError> {
        Ok(self.forward_trace(x)?.layers.pop().unwrap())
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace, NetsError> {
        self.check_input(x)?;
        let mut layers = vec![x.to_vec()];
        for l in 0..self.depth() {
            let (wr, br) = self.layer_range(l);
            let (w, b) = (&self.params[wr], &self.params[br]);
            let input = layers.last().unwrap();
            let n_in = input.len();
            let last = l + 1 == self.depth();
            let out = b
                .iter()
                .enumerate()
                .map(|(o, bias)| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let s = bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if last {
                        s
                    } else {
                        s.tanh()
                    }
                })
                .collect();
            layers.push(out);
        }
        Ok(Trace { layers })
    }

    /// Accumulates `dL/dθ` into `grad` given `dL/dy`, and returns `dL/dx`.
    pub fn backward(&self, trace: &Trace, dy: &[f64], grad: &mut [f64]) -> Result<Vec<f64>, NetsError> {
        if dy.len() != self.output_dim() || grad.len() != self.params.len() {
            return Err(NetsError::Shape(format!(
                "backward got {} upstream values and {} gradient slots",
                dy.len(),
                grad.len()
            )));
        }
        let mut delta = dy.to_vec();
        for l in (0..self.depth()).rev() {
            let (wr, br) = self.layer_range(l);
            let input = &trace.layers[l];
            let n_in = input.len();
            if l + 1 != self.depth() {
                // Through tanh: d/ds tanh(s) = 1 - tanh².
                for (d, a) in delta.iter_mut().zip(&trace.layers[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let w = &self.params[wr.clone()];
            let mut down = vec![0.0; n_in];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                let grow = &mut grad[wr.start + o * n_in..wr.start + (o + 1) * n_in];
                for k in 0..n_in {
                    grow[k] += d * input[k];
                    down[k] += d * row[k];
                }
                grad[br.start + o] += d;
            }
            delta = down;
        }
        Ok(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Relative error with a floor for gradients that are numerically zero.
    pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    #[test]
    fn zero_weights_give_final_bias() {
        let mut net = TinyNet::zeros(&[3, 5, 2]).unwrap();
        let (_, b) = net.layer_range(1);
        net.params_mut()[b].copy_from_slice(&[0.25, -1.5]);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.25, -1.5]);
        assert_eq!(net.num_params(), 5 * 4 + 2 * 6);
        assert!(net.forward(&[1.0]).is_err());
        assert!(TinyNet::zeros(&[3]).is_err());
        assert!(TinyNet::from_params(&[2, 2], vec![0.0; 5]).is_err());
    }

    #[test]
    fn forward_matches_manual_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = TinyNet::random(&[2, 3, 1], 1.0, &mut rng).unwrap();
        let p = net.params();
        let x = [0.3, -0.7];
        let mut out = p[9 + 3];
        for h in 0..3 {
            let s = p[h * 2] * x[0] + p[h * 2 + 1] * x[1] + p[6 + h];
            out += p[9 + h] * s.tanh();
        }
        assert!((net.forward(&x).unwrap()[0] - out).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let net = TinyNet::random(&[3, 6, 5, 2], 1.0, &mut rng).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |n: &TinyNet, x: &[f64]| {
                let y = n.forward(x).unwrap();
                y.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() + 0.5 * y[0] * y[0]
            };
            let trace = net.forward_trace(&x).unwrap();
            let y = trace.output();
            let dy = vec![c[0] + y[0], c[1]];
            let mut grad = vec![0.0; net.num_params()];
            let dx = net.backward(&trace, &dy, &mut grad).unwrap();
            let h = 1e-5;
            for i in 0..net.num_params() {
                let mut a = net.clone();
                a.params_mut()[i] += h;
                let mut b = net.clone();
                b.params_mut()[i] -= h;
                let num = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
                assert!(rel_err(num, grad[i]) < 1e-4, "param {i}: {num} vs {}", grad[i]);
            }
            for k in 0..3 {
                let mut xa = x.clone();
                xa[k] += h;
                let mut xb = x.clone();
                xb[k] -= h;
                let num = (loss(&net, &xa) - loss(&net, &xb)) / (2.0 * h);
                assert!(rel_err(num, dx[k]) < 1e-4);
            }
        }
    }

    #[test]
    fn output_is_linear_in_final_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = TinyNet::random(&[2, 4, 3], 1.0, &mut rng).unwrap();
        let (w, b) = net.layer_range(1);
        let x = [0.4, 0.9];
        let with_final = |other: &TinyNet| {
            let mut n = net.clone();
            for i in w.start..b.end {
                n.params_mut()[i] = other.params()[i];
            }
            n.forward(&x).unwrap()
        };
        let other = TinyNet::random(&[2, 4, 3], 1.0, &mut rng).unwrap();
        let mut sum = net.clone();
        for i in w.start..b.end {
            sum.params_mut()[i] = net.params()[i] + other.params()[i];
        }
        let y_sum = sum.forward(&x).unwrap();
        let y1 = with_final(&net);
        let y2 = with_final(&other);
        for k in 0..3 {
            assert!((y_sum[k] - y1[k] - y2[k]).abs() < 1e-12);
        }
    }
}
