//! Reference pre-norm transformer with no embedding table.
//!
//! Inputs are already-encoded `d_model` vectors. Each layer applies
//! `x += Attn(RMSNorm(x))` then `x += W2 gelu(W1 RMSNorm(x) + b1) + b2`;
//! a final RMSNorm feeds the output head. Weights are stored `[in, out]`.

use serde::{Deserialize, Serialize};

use super::linalg::{gelu, rms_norm, Matrix};
use crate::error::{Error, Result};
use crate::prng::PrngStream;
use crate::tensor::{Checkpoint, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    #[default]
    None,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub attention: AttentionMode,
    #[serde(default)]
    pub positional: Positional,
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter names and shapes of the model.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = Vec::new();
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("attn_norm.gain"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((p(&format!("attn.{w}")), vec![d, d]));
            }
            out.push((p("ffn_norm.gain"), vec![d]));
            out.push((p("ffn.w1"), vec![d, f]));
            out.push((p("ffn.b1"), vec![f]));
            out.push((p("ffn.w2"), vec![f, d]));
            out.push((p("ffn.b2"), vec![d]));
        }
        out.push(("final_norm.gain".into(), vec![d]));
        out.push(("head.weight".into(), vec![d, self.vocab_size]));
        out
    }

    /// Checks that `ckpt` has exactly this model's parameters.
    pub fn check_params(&self, ckpt: &Checkpoint) -> Result<()> {
        let expected = self.param_shapes();
        for (name, shape) in &expected {
            let t = ckpt.tensor(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    left: shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        if ckpt.len() != expected.len() {
            let extra = ckpt
                .names()
                .find(|n| !expected.iter().any(|(e, _)| e == *n))
                .cloned()
                .unwrap_or_default();
            return Err(Error::invalid(format!("unexpected tensor '{extra}' for this model config")));
        }
        Ok(())
    }

    /// Seeded random parameters: weights `N(0, 1/fan_in)`, gains near 1,
    /// small biases.
    pub fn init_params(&self, seed: u64) -> Result<Checkpoint> {
        self.validate()?;
        let mut rng = PrngStream::new(seed);
        let mut ckpt = Checkpoint::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".gain") {
                (0..n).map(|_| (1.0 + 0.1 * rng.normal()) as f32).collect()
            } else if shape.len() == 1 {
                (0..n).map(|_| (0.05 * rng.normal()) as f32).collect()
            } else {
                let std = 1.0 / (shape[0] as f64).sqrt();
                (0..n).map(|_| (std * rng.normal()) as f32).collect()
            };
            ckpt.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ckpt)
    }
}

/// Adds sinusoidal position codes for absolute positions `0..rows`.
pub(crate) fn add_positions(x: &mut Matrix) {
    let d = x.cols();
    for pos in 0..x.rows() {
        let row = x.row_mut(pos);
        for (i, v) in row.iter_mut().enumerate() {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            *v += if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
}

/// Multi-head attention over one full sequence, computed position by
/// position.
fn attention_reference(
    config: &ToyModelConfig,
    params: &Checkpoint,
    layer: usize,
    h: &Matrix,
) -> Result<Matrix> {
    let w = |s: &str| params.tensor(&format!("layers.{layer}.attn.{s}"));
    let q = h.matmul(w("wq")?)?;
    let k = h.matmul(w("wk")?)?;
    let v = h.matmul(w("wv")?)?;
    let n = h.rows();
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(n, config.d_model);
    for head in 0..config.n_heads {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..n {
            let last = match config.attention {
                AttentionMode::Causal => i,
                AttentionMode::Bidirectional => n - 1,
            };
            let scores: Vec<f64> = (0..=last)
                .map(|j| {
                    cols.clone().map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() * scale
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                let val: f64 = exps.iter().enumerate().map(|(j, e)| e * v.get(j, c)).sum();
                ctx.row_mut(i)[c] = val / z;
            }
        }
    }
    ctx.matmul(w("wo")?)
}

/// Plain forward pass of one parameter set over a token matrix.
pub fn forward(params: &Checkpoint, config: &ToyModelConfig, tokens: &Matrix) -> Result<Matrix> {
    config.validate()?;
    config.check_params(params)?;
    if tokens.cols() != config.d_model {
        return Err(Error::invalid(format!(
            "tokens have width {}, model expects {}",
            tokens.cols(),
            config.d_model
        )));
    }
    let mut x = tokens.clone();
    if config.positional == Positional::Sinusoidal {
        add_positions(&mut x);
    }
    for l in 0..config.n_layers {
        let t = |s: &str| params.tensor(&format!("layers.{l}.{s}"));
        let h = rms_norm(&x, t("attn_norm.gain")?);
        let a = attention_reference(config, params, l, &h)?;
        x.add_assign(&a);
        let h = rms_norm(&x, t("ffn_norm.gain")?);
        let mut f = h.matmul(t("ffn.w1")?)?;
        f.add_row_bias(t("ffn.b1")?);
        f.map_in_place(gelu);
        let mut f = f.matmul(t("ffn.w2")?)?;
        f.add_row_bias(t("ffn.b2")?);
        x.add_assign(&f);
    }
    let h = rms_norm(&x, params.tensor("final_norm.gain")?);
    h.matmul(params.tensor("head.weight")?)
}
