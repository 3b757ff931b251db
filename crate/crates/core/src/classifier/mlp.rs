//! Dense ReLU network with a linear output layer and reverse-mode gradients.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn init(inputs: usize, outputs: usize, rng: &mut seed::Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self { inputs, outputs, weights, bias: vec![0.0; outputs] }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            out.push(dot + self.bias[o]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[i]` is the input to layer `i` (post-ReLU for hidden layers).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last entry is the logits.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

/// Gradient buffers shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: mlp.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Flattened in the same order as [`Mlp::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl Mlp {
    /// `input → depth × (hidden, ReLU) → outputs`.
    pub fn new(input: usize, hidden: usize, depth: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut layers = Vec::with_capacity(depth + 1);
        let mut width = input;
        for _ in 0..depth {
            layers.push(Dense::init(width, hidden, &mut rng));
            width = hidden;
        }
        layers.push(Dense::init(width, outputs, &mut rng));
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.apply(&cur, &mut z);
            inputs.push(cur);
            cur = if i < last { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
            pre.push(z);
        }
        Trace { inputs, pre }
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂logits`.
    pub fn backward(&self, trace: &Trace, dlogits: &[f64], grads: &mut Gradients) {
        let mut delta = dlogits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let x = &trace.inputs[i];
            let gw = &mut grads.weights[i];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grads.bias[i][o] += d;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, xv) in row.iter_mut().zip(x) {
                    *g += d * xv;
                }
            }
            if i == 0 {
                break;
            }
            let below = &trace.pre[i - 1];
            let mut prev = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, z) in prev.iter_mut().zip(below) {
                if *z <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + n]);
            at += n;
        }
    }

    /// `θ ← θ − lr · g`.
    pub fn step(&mut self, grads: &Gradients, lr: f64) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (w, g) in l.weights.iter_mut().zip(&grads.weights[i]) {
                *w -= lr * g;
            }
            for (b, g) in l.bias.iter_mut().zip(&grads.bias[i]) {
                *b -= lr * g;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_matches_finite_differences_on_a_linear_readout() {
        let mut mlp = Mlp::new(3, 5, 2, 4, 11);
        // Nudge biases so no ReLU sits exactly at its kink.
        for l in &mut mlp.layers {
            l.bias.iter_mut().for_each(|b| *b = 0.05);
        }
        let x = [0.3, -1.2, 0.7];
        let coef = [0.4, -0.3, 1.1, 0.2];
        let f = |m: &Mlp| m.forward(&x).iter().zip(&coef).map(|(z, c)| z * c).sum::<f64>();
        let trace = mlp.forward_trace(&x);
        let mut grads = Gradients::zeros(&mlp);
        mlp.backward(&trace, &coef, &mut grads);
        let analytic = grads.flatten();
        let base = mlp.params();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            mlp.set_params(&p);
            let up = f(&mlp);
            p[i] -= 2.0 * h;
            mlp.set_params(&p);
            let down = f(&mlp);
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-6, "param {i}: {numeric} vs {}", analytic[i]);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let l = log_softmax(&[1.0, 2.0, -3.0]);
        let s: f64 = l.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }
}
