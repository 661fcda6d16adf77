//! Seeded regression tasks standing in for modality datasets.

use serde::{Deserialize, Serialize};

use super::mlp::Dataset;
use crate::error::{Error, Result};
use crate::prng::PrngStream;

/// One "modality": inputs live in a dedicated block of input dimensions
/// (all other dimensions are zero), targets are `sin(x A + c)` for a
/// seeded matrix `A` and offset `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub name: String,
    pub modality: String,
    /// Total input width of the model.
    pub input_dim: usize,
    pub input_offset: usize,
    pub input_dims: usize,
    pub output_dim: usize,
    /// Selects the target map; tasks with different ids get different maps.
    pub target_id: u64,
    /// Distance of this task's map from the modality's shared map: the
    /// target matrix is `A_shared + spread * B_target`. A spread of zero
    /// gives the shared map.
    #[serde(default = "one")]
    pub spread: f64,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

const TAG_INPUTS: u64 = 0x11;
const TAG_TARGET: u64 = 0x22;
const TAG_SHARED: u64 = 0x55;
const TAG_TRAIN: u64 = 0x33;
const TAG_EVAL: u64 = 0x44;

struct TaskParams {
    mean: Vec<f64>,
    std: Vec<f64>,
    a: Vec<f64>,
    c: Vec<f64>,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.input_dims == 0 || self.output_dim == 0 || self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::invalid(format!("task '{}' has an empty dimension or split", self.name)));
        }
        if self.input_offset + self.input_dims > self.input_dim {
            return Err(Error::invalid(format!(
                "task '{}' input block {}..{} exceeds input width {}",
                self.name,
                self.input_offset,
                self.input_offset + self.input_dims,
                self.input_dim
            )));
        }
        Ok(())
    }

    fn params(&self) -> TaskParams {
        let root = PrngStream::new(self.seed);
        let mut rin = root.fork(TAG_INPUTS ^ (self.input_offset as u64) << 8);
        let mean = (0..self.input_dims).map(|_| rin.uniform(-0.5, 0.5)).collect();
        let std = (0..self.input_dims).map(|_| rin.uniform(0.5, 1.5)).collect();
        let s = 1.5 / (self.input_dims as f64).sqrt();
        let pi = std::f64::consts::PI;
        let mut shared = root.fork(TAG_SHARED ^ (self.input_offset as u64) << 8);
        let mut rt = root.fork(TAG_TARGET ^ self.target_id << 16);
        let a = (0..self.input_dims * self.output_dim)
            .map(|_| s * (shared.normal() + self.spread * rt.normal()))
            .collect();
        let c = (0..self.output_dim)
            .map(|_| shared.uniform(-pi, pi) + self.spread * rt.uniform(-pi, pi))
            .collect();
        TaskParams { mean, std, a, c }
    }

    fn generate(&self, tag: u64, n: usize) -> Dataset {
        let p = self.params();
        let mut rng = PrngStream::new(self.seed).fork(tag ^ (self.input_offset as u64) << 8);
        let (d, o) = (self.input_dims, self.output_dim);
        let mut x = vec![0.0; n * self.input_dim];
        let mut y = vec![0.0; n * o];
        for r in 0..n {
            let block = &mut x[r * self.input_dim + self.input_offset..][..d];
            for (i, v) in block.iter_mut().enumerate() {
                *v = p.mean[i] + p.std[i] * rng.normal();
            }
            for k in 0..o {
                let z: f64 = (0..d).map(|i| block[i] * p.a[i * o + k]).sum();
                y[r * o + k] = (z + p.c[k]).sin();
            }
        }
        Dataset {
            n,
            input_dim: self.input_dim,
            output_dim: o,
            x,
            y,
        }
    }

    pub fn train_set(&self) -> Dataset {
        self.generate(TAG_TRAIN, self.train_size)
    }

    pub fn eval_set(&self) -> Dataset {
        self.generate(TAG_EVAL, self.eval_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(target_id: u64) -> SyntheticTask {
        SyntheticTask {
            name: "t".into(),
            modality: "vision".into(),
            input_dim: 8,
            input_offset: 4,
            input_dims: 4,
            output_dim: 2,
            target_id,
            train_size: 16,
            eval_size: 32,
            seed: 3,
            spread: 1.0,
        }
    }

    #[test]
    fn data_is_deterministic_and_blocked() {
        let t = task(0);
        let a = t.train_set();
        assert_eq!(a, t.train_set());
        assert_ne!(a.x, t.eval_set().x[..a.x.len()].to_vec());
        for r in 0..a.n {
            assert!(a.x[r * 8..r * 8 + 4].iter().all(|&v| v == 0.0));
            assert!(a.x[r * 8 + 4..r * 8 + 8].iter().all(|&v| v != 0.0));
        }
        assert!(a.y.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn target_id_changes_targets_only() {
        let (a, b) = (task(0).train_set(), task(1).train_set());
        assert_eq!(a.x, b.x);
        assert_ne!(a.y, b.y);
    }

    #[test]
    fn validate_checks_block() {
        let mut t = task(0);
        t.input_offset = 6;
        assert!(t.validate().is_err());
    }
}
