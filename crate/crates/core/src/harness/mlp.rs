//! Two-layer tanh network trained by full-batch gradient descent.
//!
//! Forward, for a batch `X` of `n` rows:
//!
//! ```text
//! Z = X W1 + b1        H = tanh(Z)        Y = H W2 + b2
//! L = 1/(n*o) * sum (Y - T)^2
//! ```
//!
//! Gradients:
//!
//! ```text
//! dY  = 2/(n*o) * (Y - T)
//! dW2 = H^T dY         db2 = sum_rows dY
//! dZ  = (dY W2^T) * (1 - H^2)
//! dW1 = X^T dZ         db1 = sum_rows dZ
//! ```
//!
//! Weights are stored `[in, out]`. Training runs in f64; checkpoints are
//! rounded to f32.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prng::PrngStream;
use crate::tensor::{Checkpoint, Tensor};

pub const L1_WEIGHT: &str = "mlp.l1.weight";
pub const L1_BIAS: &str = "mlp.l1.bias";
pub const L2_WEIGHT: &str = "mlp.l2.weight";
pub const L2_BIAS: &str = "mlp.l2.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Inputs and targets, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    /// Rows of every part, in order. Parts must share widths.
    pub fn concat(parts: &[Dataset]) -> Dataset {
        let first = &parts[0];
        let mut out = Dataset {
            n: 0,
            input_dim: first.input_dim,
            output_dim: first.output_dim,
            x: Vec::new(),
            y: Vec::new(),
        };
        for p in parts {
            assert_eq!((p.input_dim, p.output_dim), (out.input_dim, out.output_dim));
            out.n += p.n;
            out.x.extend_from_slice(&p.x);
            out.y.extend_from_slice(&p.y);
        }
        out
    }

    /// Mean squared deviation of the targets from their per-column means.
    pub fn target_variance(&self) -> f64 {
        let o = self.output_dim;
        let mut total = 0.0;
        for k in 0..o {
            let col = (0..self.n).map(|r| self.y[r * o + k]);
            let mean = col.clone().sum::<f64>() / self.n as f64;
            total += col.map(|v| (v - mean).powi(2)).sum::<f64>();
        }
        total / (self.n * o) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub shape: MlpShape,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(shape: MlpShape) -> Self {
        Self {
            shape,
            w1: vec![0.0; shape.input * shape.hidden],
            b1: vec![0.0; shape.hidden],
            w2: vec![0.0; shape.hidden * shape.output],
            b2: vec![0.0; shape.output],
        }
    }

    /// Weights `N(0, 1/fan_in)`, first-layer bias `N(0, 0.1^2)`, zero
    /// output bias.
    pub fn init(shape: MlpShape, rng: &mut PrngStream) -> Self {
        let mut p = Self::zeros(shape);
        let s1 = 1.0 / (shape.input as f64).sqrt();
        let s2 = 1.0 / (shape.hidden as f64).sqrt();
        p.w1.iter_mut().for_each(|v| *v = s1 * rng.normal());
        p.b1.iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        p.w2.iter_mut().for_each(|v| *v = s2 * rng.normal());
        p
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, shape: MlpShape) -> Result<Self> {
        let get = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
            let t = ckpt.tensor(name)?;
            if t.shape() != dims {
                return Err(Error::ShapeMismatch {
                    name: name.into(),
                    left: dims.to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            Ok(t.data().iter().map(|&v| v as f64).collect())
        };
        if ckpt.len() != 4 {
            return Err(Error::invalid(format!("MLP checkpoint has {} tensors, expected 4", ckpt.len())));
        }
        Ok(Self {
            shape,
            w1: get(L1_WEIGHT, &[shape.input, shape.hidden])?,
            b1: get(L1_BIAS, &[shape.hidden])?,
            w2: get(L2_WEIGHT, &[shape.hidden, shape.output])?,
            b2: get(L2_BIAS, &[shape.output])?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let s = self.shape;
        let t = |dims: Vec<usize>, v: &[f64]| {
            Tensor::new(dims, v.iter().map(|&x| x as f32).collect()).expect("finite parameters")
        };
        Checkpoint::from_tensors([
            (L1_WEIGHT, t(vec![s.input, s.hidden], &self.w1)),
            (L1_BIAS, t(vec![s.hidden], &self.b1)),
            (L2_WEIGHT, t(vec![s.hidden, s.output], &self.w2)),
            (L2_BIAS, t(vec![s.output], &self.b2)),
        ])
    }

    fn hidden(&self, x: &[f64], n: usize) -> Vec<f64> {
        let MlpShape { input, hidden, .. } = self.shape;
        let mut h = vec![0.0; n * hidden];
        for r in 0..n {
            let xr = &x[r * input..(r + 1) * input];
            let hr = &mut h[r * hidden..(r + 1) * hidden];
            hr.copy_from_slice(&self.b1);
            for (i, &xv) in xr.iter().enumerate() {
                if xv != 0.0 {
                    let w = &self.w1[i * hidden..(i + 1) * hidden];
                    hr.iter_mut().zip(w).for_each(|(a, &b)| *a += xv * b);
                }
            }
            hr.iter_mut().for_each(|v| *v = v.tanh());
        }
        h
    }

    fn output(&self, h: &[f64], n: usize) -> Vec<f64> {
        let MlpShape { hidden, output, .. } = self.shape;
        let mut y = vec![0.0; n * output];
        for r in 0..n {
            let yr = &mut y[r * output..(r + 1) * output];
            yr.copy_from_slice(&self.b2);
            for (j, &hv) in h[r * hidden..(r + 1) * hidden].iter().enumerate() {
                let w = &self.w2[j * output..(j + 1) * output];
                yr.iter_mut().zip(w).for_each(|(a, &b)| *a += hv * b);
            }
        }
        y
    }

    pub fn predict(&self, x: &[f64], n: usize) -> Vec<f64> {
        self.output(&self.hidden(x, n), n)
    }

    pub fn loss(&self, data: &Dataset) -> f64 {
        let y = self.predict(&data.x, data.n);
        mse(&y, &data.y)
    }

    /// Loss and gradient over the full batch.
    pub fn gradient(&self, data: &Dataset) -> (f64, MlpParams) {
        let MlpShape { input, hidden, output } = self.shape;
        let n = data.n;
        let h = self.hidden(&data.x, n);
        let y = self.output(&h, n);
        let loss = mse(&y, &data.y);
        let scale = 2.0 / (n * output) as f64;
        let mut g = MlpParams::zeros(self.shape);
        let mut dz = vec![0.0; hidden];
        for r in 0..n {
            let hr = &h[r * hidden..(r + 1) * hidden];
            let dy: Vec<f64> = (0..output)
                .map(|k| scale * (y[r * output + k] - data.y[r * output + k]))
                .collect();
            for (gb, d) in g.b2.iter_mut().zip(&dy) {
                *gb += d;
            }
            for j in 0..hidden {
                let w = &self.w2[j * output..(j + 1) * output];
                let gw = &mut g.w2[j * output..(j + 1) * output];
                let mut dh = 0.0;
                for k in 0..output {
                    gw[k] += hr[j] * dy[k];
                    dh += dy[k] * w[k];
                }
                dz[j] = dh * (1.0 - hr[j] * hr[j]);
                g.b1[j] += dz[j];
            }
            for (i, &xv) in data.x[r * input..(r + 1) * input].iter().enumerate() {
                if xv != 0.0 {
                    let gw = &mut g.w1[i * hidden..(i + 1) * hidden];
                    gw.iter_mut().zip(&dz).for_each(|(a, &d)| *a += xv * d);
                }
            }
        }
        (loss, g)
    }

    fn step(&mut self, g: &MlpParams, lr: f64) {
        let upd = |p: &mut [f64], d: &[f64]| p.iter_mut().zip(d).for_each(|(a, &b)| *a -= lr * b);
        upd(&mut self.w1, &g.w1);
        upd(&mut self.b1, &g.b1);
        upd(&mut self.w2, &g.w2);
        upd(&mut self.b2, &g.b2);
    }

    /// Runs `steps` of full-batch gradient descent. `seed` only labels a
    /// divergence error.
    pub fn train(&mut self, data: &Dataset, steps: usize, lr: f64, seed: u64) -> Result<()> {
        for step in 0..steps {
            let (loss, g) = self.gradient(data);
            if !loss.is_finite() {
                return Err(Error::Diverged { seed, step });
            }
            self.step(&g, lr);
        }
        if !self.loss(data).is_finite() {
            return Err(Error::Diverged { seed, step: steps });
        }
        Ok(())
    }
}

fn mse(y: &[f64], t: &[f64]) -> f64 {
    y.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (MlpParams, Dataset) {
        let shape = MlpShape {
            input: 3,
            hidden: 5,
            output: 2,
        };
        let mut rng = PrngStream::new(11);
        let p = MlpParams::init(shape, &mut rng);
        let n = 7;
        let x = (0..n * 3).map(|_| rng.normal()).collect();
        let y = (0..n * 2).map(|_| rng.normal()).collect();
        let data = Dataset {
            n,
            input_dim: 3,
            output_dim: 2,
            x,
            y,
        };
        (p, data)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (p, data) = toy();
        let (_, g) = p.gradient(&data);
        let eps = 1e-6;
        let fields: [(fn(&mut MlpParams) -> &mut Vec<f64>, &Vec<f64>); 4] = [
            (|q| &mut q.w1, &g.w1),
            (|q| &mut q.b1, &g.b1),
            (|q| &mut q.w2, &g.w2),
            (|q| &mut q.b2, &g.b2),
        ];
        for (field, grad) in fields {
            for i in 0..grad.len() {
                let mut plus = p.clone();
                field(&mut plus)[i] += eps;
                let mut minus = p.clone();
                field(&mut minus)[i] -= eps;
                let fd = (plus.loss(&data) - minus.loss(&data)) / (2.0 * eps);
                assert!((fd - grad[i]).abs() < 1e-7, "fd {fd} vs analytic {}", grad[i]);
            }
        }
    }

    #[test]
    fn training_reduces_loss() {
        let (mut p, data) = toy();
        let before = p.loss(&data);
        p.train(&data, 200, 0.1, 0).unwrap();
        assert!(p.loss(&data) < before);
    }

    #[test]
    fn divergence_is_reported() {
        let (mut p, data) = toy();
        let err = p.train(&data, 500, 1e6, 9).unwrap_err();
        assert!(matches!(err, Error::Diverged { seed: 9, .. }));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (p, _) = toy();
        let c = p.to_checkpoint();
        let q = MlpParams::from_checkpoint(&c, p.shape).unwrap();
        assert_eq!(q.to_checkpoint(), c);
        assert!(MlpParams::from_checkpoint(&c, MlpShape { input: 4, ..p.shape }).is_err());
    }
}
