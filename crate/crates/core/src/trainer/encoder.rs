use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, HvcmError, Result};

/// Fully connected network with `tanh` hidden layers and a linear output
/// layer. Parameters are stored flat: for each layer the `out x in`
/// weight matrix (row-major) followed by the `out` bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `layers[0]` is the input; `layers[l + 1]` is the output of layer `l`.
    layers: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().unwrap()
    }
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Encoder {
    pub fn from_parts(widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(HvcmError::invalid("widths", format!("{widths:?} needs ≥ 2 nonzero layers")));
        }
        check_dim(param_count(&widths), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(HvcmError::invalid("encoder", "parameters must be finite"));
        }
        Ok(Encoder { widths, params })
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases from `N(0, 0.01)`.
    pub fn random<R: Rng + ?Sized>(widths: Vec<usize>, rng: &mut R) -> Result<Self> {
        let mut params = Vec::with_capacity(param_count(&widths));
        for w in widths.windows(2) {
            let scale = 1.0 / (w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
            params.extend((0..w[1]).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)));
        }
        Self::from_parts(widths, params)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.layers.pop().unwrap())
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        check_dim(self.input_dim(), input.len())?;
        let n_layers = self.widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers + 1);
        layers.push(input.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let weight = &self.params[offset..offset + fan_in * fan_out];
            let bias = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let x = &layers[l];
            let mut y: Vec<f64> = weight
                .chunks_exact(fan_in)
                .zip(bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
                .collect();
            if l + 1 < n_layers {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            layers.push(y);
        }
        Ok(ForwardTrace { layers })
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output`.
    pub fn backward(&self, trace: &ForwardTrace, grad_output: &[f64], grad: &mut [f64]) {
        let n_layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut acc = 0;
        for w in self.widths.windows(2) {
            offsets.push(acc);
            acc += w[0] * w[1] + w[1];
        }
        let mut delta = grad_output.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let x = &trace.layers[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                row.iter_mut().zip(x).for_each(|(g, v)| *g += d * v);
                grad[off + fan_in * fan_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let weight = &self.params[off..off + fan_in * fan_out];
            let mut next = vec![0.0; fan_in];
            for (o, row) in weight.chunks_exact(fan_in).enumerate() {
                next.iter_mut().zip(row).for_each(|(n, w)| *n += delta[o] * w);
            }
            // tanh'(u) = 1 - tanh(u)^2, and x holds tanh(u)
            next.iter_mut().zip(x).for_each(|(n, h)| *n *= 1.0 - h * h);
            delta = next;
        }
    }
}
