//! Fully connected rectifier networks with hand-written backpropagation.
//!
//! Parameters live in one flat buffer so optimizers, checkpoints and
//! finite-difference checks can treat every network uniformly. Layer `l`
//! occupies `out * in` row-major weights followed by `out` biases. A network
//! with a single width is the identity map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediate values kept by [`Mlp::forward_trace`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to every layer, plus the final output as the last entry.
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace always holds the input")
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![0.0; param_count(widths)],
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::zeros(&[dim])
    }

    /// He-scaled normal weights on hidden layers, `output_scale`-scaled
    /// weights on the last layer, zero biases.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], output_scale: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let layers = net.num_layers();
        let mut offset = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let mut std = (2.0 / fan_in as f64).sqrt();
            if l + 1 == layers {
                std *= output_scale;
            }
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = normal.sample(rng);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_parts(widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(&widths)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "widths {widths:?} need {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
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

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn is_identity(&self) -> bool {
        self.num_layers() == 0
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut offset = 0;
        for l in 0..self.num_layers() {
            x = self.layer(l, offset, &x);
            offset += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        x
    }

    pub fn forward_trace(&self, input: &[f64]) -> Trace {
        let mut activations = Vec::with_capacity(self.widths.len());
        activations.push(input.to_vec());
        let mut offset = 0;
        for l in 0..self.num_layers() {
            let next = self.layer(l, offset, activations.last().unwrap());
            activations.push(next);
            offset += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        Trace { activations }
    }

    fn layer(&self, l: usize, offset: usize, x: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        let weights = &self.params[offset..offset + n_in * n_out];
        let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let last = l + 1 == self.num_layers();
        weights
            .chunks_exact(n_in)
            .zip(bias)
            .map(|(row, b)| {
                let z = b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                if last {
                    z
                } else {
                    z.max(0.0)
                }
            })
            .collect()
    }

    /// Accumulates `d loss / d params` into `grad` and returns `d loss / d input`.
    pub fn backward(&self, trace: &Trace, grad_output: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        let mut upstream = grad_output.to_vec();
        let mut end = self.params.len();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let offset = end - (n_in * n_out + n_out);
            let input = &trace.activations[l];
            let output = &trace.activations[l + 1];
            if l + 1 != self.num_layers() {
                // rectifier: zero slope where the unit is inactive
                for (g, &o) in upstream.iter_mut().zip(output) {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let weights = &self.params[offset..offset + n_in * n_out];
            let mut downstream = vec![0.0; n_in];
            for (j, &g) in upstream.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &weights[j * n_in..(j + 1) * n_in];
                let grow = &mut grad[offset + j * n_in..offset + (j + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += g * input[i];
                    downstream[i] += g * row[i];
                }
                grad[offset + n_in * n_out + j] += g;
            }
            upstream = downstream;
            end = offset;
        }
        upstream
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identity_passes_input_through() {
        let net = Mlp::identity(3).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]), vec![1.0, -2.0, 3.0]);
        assert!(net.params().is_empty());
    }

    #[test]
    fn parameter_count_matches_widths() {
        let net = Mlp::zeros(&[4, 5, 1]).unwrap();
        assert_eq!(net.params().len(), 4 * 5 + 5 + 5 + 1);
        assert!(Mlp::zeros(&[]).is_err());
        assert!(Mlp::zeros(&[3, 0, 1]).is_err());
        assert!(Mlp::from_parts(vec![2, 1], vec![0.0; 2]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::random(&[3, 6, 5, 2], 1.0, &mut rng).unwrap();
        let x = [0.4, -0.9, 1.3];
        let weights = [0.7, -1.1];
        let loss = |n: &Mlp, x: &[f64]| {
            let y = n.forward(x);
            y[0] * weights[0] + y[1] * weights[1]
        };
        let trace = net.forward_trace(&x);
        let mut grad = vec![0.0; net.params().len()];
        let gin = net.backward(&trace, &weights, &mut grad);
        let h = 1e-6;
        for i in 0..net.params().len() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grad[i]);
        }
        for i in 0..3 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((fd - gin[i]).abs() < 1e-7);
        }
    }
}
