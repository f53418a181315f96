//! Small dense networks with exact reverse-mode gradients and Adam.
//!
//! Parameters of a network are addressed as one flat vector (per layer:
//! row-major weights, then biases) so optimizers and finite-difference
//! checks can treat any collection of networks uniformly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu if x < 0.0 => LEAKY_SLOPE * x,
            _ => x,
        }
    }

    fn slope(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu if x < 0.0 => LEAKY_SLOPE,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn n_params(&self) -> usize {
        self.n_out * (self.n_in + 1)
    }
}

/// Feed-forward network: leaky-ReLU hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    /// Pre-activation values of every hidden unit, for kink detection.
    pub fn hidden_preactivations(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.pre.len().saturating_sub(1);
        self.pre[..n].iter().flatten().copied()
    }
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`, weights uniform in
    /// `+-1/sqrt(fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut mlp = Self::zeros(sizes);
        for layer in &mut mlp.layers {
            let bound = 1.0 / (layer.n_in.max(1) as f64).sqrt();
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-bound..=bound));
        }
        mlp
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "a network needs an input and an output size");
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| Layer {
                n_in: w[0],
                n_out: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
                activation: if k + 1 == n {
                    Activation::Linear
                } else {
                    Activation::LeakyRelu
                },
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Checkpoint("network has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.n_in * l.n_out || l.bias.len() != l.n_out {
                return Err(Error::Checkpoint(format!("layer {k} has inconsistent shapes")));
            }
            if k > 0 && self.layers[k - 1].n_out != l.n_in {
                return Err(Error::Checkpoint(format!("layer {k} does not chain")));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {k} parameters")));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut tape = Tape::default();
        let mut h = x.to_vec();
        for l in &self.layers {
            let pre: Vec<f64> = (0..l.n_out)
                .map(|o| {
                    let row = &l.weights[o * l.n_in..(o + 1) * l.n_in];
                    l.bias[o] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect();
            let out = pre.iter().map(|v| l.activation.apply(*v)).collect();
            tape.inputs.push(std::mem::replace(&mut h, out));
            tape.pre.push(pre);
        }
        Ok((h, tape))
    }

    /// Forward pass without a tape. Panics on a shape mismatch.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).expect("input dimension").0
    }

    /// Backpropagates `dy` through the recorded pass. Parameter gradients are
    /// added into `grads` (flat layout); the input gradient is returned.
    pub fn backward(&self, tape: &Tape, dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grads.len(), self.n_params());
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.n_params();
        }
        let mut delta = dy.to_vec();
        for (k, l) in self.layers.iter().enumerate().rev() {
            for (d, p) in delta.iter_mut().zip(&tape.pre[k]) {
                *d *= l.activation.slope(*p);
            }
            let input = &tape.inputs[k];
            let g = &mut grads[offsets[k]..offsets[k] + l.n_params()];
            let (gw, gb) = g.split_at_mut(l.n_in * l.n_out);
            let mut dx = vec![0.0; l.n_in];
            for o in 0..l.n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &l.weights[o * l.n_in..(o + 1) * l.n_in];
                let grow = &mut gw[o * l.n_in..(o + 1) * l.n_in];
                for c in 0..l.n_in {
                    grow[c] += d * input[c];
                    dx[c] += d * row[c];
                }
            }
            delta = dx;
        }
        delta
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.write_params(&mut out);
        out
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Loads parameters from the front of `src`; returns the number consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&src[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&src[k..k + nb]);
            k += nb;
        }
        k
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                expected: self.m.len(),
                actual: params.len().max(grads.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Relative error with an absolute floor, so gradients that are zero up to
/// rounding compare as equal.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2]);
        assert_eq!(net.eval(&[1.0, -2.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut net = Mlp::zeros(&[3, 3]);
        for k in 0..3 {
            net.layers[0].weights[k * 3 + k] = 1.0;
        }
        assert_eq!(net.eval(&[1.5, -2.0, 0.25]), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn forward_is_pure() {
        let net = Mlp::new(&[4, 8, 3], &mut ChaCha8Rng::seed_from_u64(1));
        let x = [0.1, -0.3, 2.0, 0.7];
        assert_eq!(net.eval(&x), net.eval(&x));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = Mlp::zeros(&[2, 1]);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape { expected: 2, actual: 1 })));
    }

    #[test]
    fn scalar_weight_gradient_is_input() {
        let mut net = Mlp::zeros(&[1, 1]);
        net.layers[0].weights[0] = 3.0;
        let (_, tape) = net.forward(&[2.5]).unwrap();
        let mut g = vec![0.0; 2];
        let dx = net.backward(&tape, &[1.0], &mut g);
        assert_eq!(g, vec![2.5, 1.0]);
        assert_eq!(dx, vec![3.0]);
    }

    #[test]
    fn leaky_slope_on_both_sides_of_the_kink() {
        let mut net = Mlp::zeros(&[1, 1, 1]);
        net.layers[0].weights[0] = 1.0;
        net.layers[1].weights[0] = 1.0;
        for (x, slope) in [(0.5, 1.0), (-0.5, LEAKY_SLOPE)] {
            let (_, tape) = net.forward(&[x]).unwrap();
            let mut g = vec![0.0; net.n_params()];
            assert_eq!(net.backward(&tape, &[1.0], &mut g), vec![slope]);
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Mlp::new(&[5, 7, 2], &mut ChaCha8Rng::seed_from_u64(9));
        let back: Mlp = serde_json::from_str(&serde_json::to_string(&net).unwrap()).unwrap();
        assert_eq!(net, back);
        assert!(back.validate().is_ok());
    }

    #[test]
    fn flat_parameters_round_trip() {
        let net = Mlp::new(&[3, 4, 2], &mut ChaCha8Rng::seed_from_u64(2));
        let p = net.params();
        assert_eq!(p.len(), net.n_params());
        let mut other = Mlp::zeros(&[3, 4, 2]);
        assert_eq!(other.read_params(&p), p.len());
        assert_eq!(other, net);
    }

    fn fd_check(sizes: &[usize], seed: u64) -> std::result::Result<(), TestCaseError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(sizes, &mut rng);
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |n: &Mlp, x: &[f64]| n.eval(x).iter().zip(&c).map(|(y, c)| y * c).sum::<f64>();
        let (_, tape) = net.forward(&x).unwrap();
        let h = 1e-5;
        // a central difference across a kink measures neither slope
        prop_assume!(tape.hidden_preactivations().all(|p| p.abs() > 1e-3));
        let mut g = vec![0.0; net.n_params()];
        let dx = net.backward(&tape, &c, &mut g);
        let p = net.params();
        let mut probe = net.clone();
        for k in 0..p.len() {
            let mut q = p.clone();
            q[k] += h;
            probe.read_params(&q);
            let up = loss(&probe, &x);
            q[k] -= 2.0 * h;
            probe.read_params(&q);
            let down = loss(&probe, &x);
            let fd = (up - down) / (2.0 * h);
            prop_assert!(relative_error(g[k], fd, 1e-6) <= 1e-4, "param {k}: {} vs {fd}", g[k]);
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += h;
            let up = loss(&net, &xp);
            xp[k] -= 2.0 * h;
            let fd = (up - loss(&net, &xp)) / (2.0 * h);
            prop_assert!(relative_error(dx[k], fd, 1e-6) <= 1e-4);
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(
            n_in in 1usize..6, hidden in 1usize..10, n_out in 1usize..4, seed in any::<u64>()
        ) {
            fd_check(&[n_in, hidden, n_out], seed)?;
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0];
        let mut opt = Adam::new(2, 0.01);
        opt.update(&mut p, &[3.0, -0.5]).unwrap();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.3, 0.7];
        let mut opt = Adam::new(2, 0.1);
        opt.update(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.3, 0.7]);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let target = [1.0, -2.0, 0.5];
        let loss = |p: &[f64]| p.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mut p = vec![0.0; 3];
        let mut opt = Adam::new(3, 1e-2);
        let start = loss(&p);
        let mut prev = start;
        for step in 0..500 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            opt.update(&mut p, &g).unwrap();
            let l = loss(&p);
            if step >= 10 && step < 200 {
                assert!(l <= prev, "step {step}");
            }
            prev = l;
        }
        assert!(prev < 1e-3 * start, "{prev}");
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut opt = Adam::new(2, 0.1);
        assert!(opt.update(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
