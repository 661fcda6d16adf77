//! Task vectors: extraction, TopK% trimming, DARE and linear combinations.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prng::PrngStream;
use crate::tensor::{congruence_check, Checkpoint, Tensor};

pub const ROLE_TASK_VECTOR: &str = "task_vector";

/// Which entries compete for the TopK% budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrimScope {
    /// One budget across all tensors of the task vector.
    #[default]
    Global,
    /// An independent budget per tensor.
    PerTensor,
}

impl fmt::Display for TrimScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrimScope::Global => "global",
            TrimScope::PerTensor => "per-tensor",
        })
    }
}

impl FromStr for TrimScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(TrimScope::Global),
            "per-tensor" => Ok(TrimScope::PerTensor),
            other => Err(Error::invalid(format!("unknown trim scope '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrepStep {
    Trim { k_percent: f64, scope: TrimScope },
    Dare { p: f64, seed: u64 },
}

/// Preprocessing applied to a task vector, in application order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Prep {
    steps: Vec<PrepStep>,
}

impl Prep {
    pub fn steps(&self) -> &[PrepStep] {
        &self.steps
    }

    pub fn topk_percent(&self) -> Option<f64> {
        self.steps.iter().find_map(|s| match s {
            PrepStep::Trim { k_percent, .. } => Some(*k_percent),
            _ => None,
        })
    }

    pub fn trim_scope(&self) -> Option<TrimScope> {
        self.steps.iter().find_map(|s| match s {
            PrepStep::Trim { scope, .. } => Some(*scope),
            _ => None,
        })
    }

    pub fn dare_p(&self) -> Option<f64> {
        self.steps.iter().find_map(|s| match s {
            PrepStep::Dare { p, .. } => Some(*p),
            _ => None,
        })
    }

    pub fn seed(&self) -> Option<u64> {
        self.steps.iter().find_map(|s| match s {
            PrepStep::Dare { seed, .. } => Some(*seed),
            _ => None,
        })
    }

    pub fn is_trimmed(&self) -> bool {
        self.topk_percent().is_some()
    }

    fn order(&self) -> String {
        self.steps
            .iter()
            .map(|s| match s {
                PrepStep::Trim { .. } => "trim",
                PrepStep::Dare { .. } => "dare",
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Checkpoint-shaped delta between a fine-tuned model and its base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub deltas: Checkpoint,
    pub base_id: String,
    pub source_id: String,
    pub prep: Prep,
}

impl TaskVector {
    pub fn new(deltas: Checkpoint, base_id: impl Into<String>, source_id: impl Into<String>) -> Self {
        let mut deltas = deltas;
        deltas.meta_mut().clear();
        Self {
            deltas,
            base_id: base_id.into(),
            source_id: source_id.into(),
            prep: Prep::default(),
        }
    }

    pub fn numel(&self) -> usize {
        self.deltas.numel()
    }

    pub fn nonzero_count(&self) -> usize {
        self.deltas
            .iter()
            .map(|(_, t)| t.data().iter().filter(|v| **v != 0.0).count())
            .sum()
    }

    /// Serializes into a checkpoint whose metadata records the provenance
    /// keys `role`, `base_id`, `source_id`, and the preprocessing applied.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.deltas.clone();
        c.set_meta("role", ROLE_TASK_VECTOR);
        c.set_meta("base_id", &self.base_id);
        c.set_meta("source_id", &self.source_id);
        if let Some(k) = self.prep.topk_percent() {
            c.set_meta("topk_percent", k.to_string());
            c.set_meta("trim_scope", self.prep.trim_scope().unwrap_or_default().to_string());
        }
        if let Some(p) = self.prep.dare_p() {
            c.set_meta("dare_p", p.to_string());
        }
        if let Some(seed) = self.prep.seed() {
            c.set_meta("seed", seed.to_string());
        }
        if !self.prep.steps.is_empty() {
            c.set_meta("prep_order", self.prep.order());
        }
        c
    }

    /// Inverse of [`TaskVector::to_checkpoint`]. Checkpoints without task
    /// vector metadata are accepted as raw deltas.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let meta = ckpt.meta().clone();
        let get = |k: &str| meta.get(k).cloned();
        let parse_f = |k: &str| -> Result<Option<f64>> {
            get(k)
                .map(|v| v.parse::<f64>().map_err(|_| Error::Header(format!("meta {k}='{v}'"))))
                .transpose()
        };
        let topk = parse_f("topk_percent")?;
        let dare_p = parse_f("dare_p")?;
        let seed = get("seed")
            .map(|v| v.parse::<u64>().map_err(|_| Error::Header(format!("meta seed='{v}'"))))
            .transpose()?;
        let scope = get("trim_scope").map(|s| s.parse()).transpose()?.unwrap_or_default();

        let trim = topk.map(|k_percent| PrepStep::Trim { k_percent, scope });
        let dare = dare_p.map(|p| PrepStep::Dare { p, seed: seed.unwrap_or(0) });
        let steps = match get("prep_order").as_deref() {
            Some("dare,trim") => dare.into_iter().chain(trim).collect(),
            _ => trim.into_iter().chain(dare).collect(),
        };

        let mut tv = TaskVector::new(
            ckpt,
            get("base_id").unwrap_or_default(),
            get("source_id").unwrap_or_default(),
        );
        tv.prep = Prep { steps };
        Ok(tv)
    }
}

/// Identifier for a checkpoint: its `model_id` metadata when present, else
/// a short content digest.
pub fn model_id(ckpt: &Checkpoint) -> String {
    if let Some(id) = ckpt.meta().get("model_id") {
        return id.clone();
    }
    let mut hasher = Sha256::new();
    for (name, t) in ckpt.iter() {
        hasher.update(name.as_bytes());
        for d in t.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(&hasher.finalize()[..8])
}

/// `model - base`, accumulated in f64 and rounded once to f32.
pub fn extract(model: &Checkpoint, base: &Checkpoint) -> Result<TaskVector> {
    let deltas = model.zip_map(base, |m, b| (m as f64 - b as f64) as f32)?;
    Ok(TaskVector::new(deltas, model_id(base), model_id(model)))
}

/// Number of entries kept out of `total` at `k_percent`: `ceil(K% * total)`.
pub fn keep_count(k_percent: f64, total: usize) -> usize {
    let x = k_percent * total as f64 / 100.0;
    let r = x.round();
    let n = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (n as usize).min(total)
}

fn check_k(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::invalid(format!("k_percent must be in (0, 100], got {k_percent}")));
    }
    Ok(())
}

/// Keeps the `keep` largest-magnitude entries among `values`, ties broken
/// toward the smaller position. Returns the kept flags.
fn topk_flags(values: &[f32], keep: usize) -> Vec<bool> {
    let n = values.len();
    if keep >= n {
        return vec![true; n];
    }
    if keep == 0 {
        return vec![false; n];
    }
    // Non-negative floats order like their bit patterns; invert for descending.
    let mut keys: Vec<(u32, usize)> = values
        .iter()
        .enumerate()
        .map(|(i, v)| (u32::MAX - v.abs().to_bits(), i))
        .collect();
    let (_, &mut threshold, _) = keys.select_nth_unstable(keep - 1);
    values
        .iter()
        .enumerate()
        .map(|(i, v)| (u32::MAX - v.abs().to_bits(), i) <= threshold)
        .collect()
}

/// Zeroes all but the TopK% largest-magnitude entries per scope.
///
/// Ties at the threshold magnitude keep the entry that comes first in
/// canonical (tensor name, flat index) order.
pub fn topk_trim(tau: &TaskVector, k_percent: f64, scope: TrimScope) -> Result<TaskVector> {
    check_k(k_percent)?;
    if tau.prep.is_trimmed() {
        return Err(Error::invalid(format!(
            "task vector '{}' is already trimmed",
            tau.source_id
        )));
    }
    let deltas = match scope {
        TrimScope::Global => {
            let flat = tau.deltas.flatten();
            let flags = topk_flags(&flat, keep_count(k_percent, flat.len()));
            let mut offset = 0;
            let mut out = Checkpoint::new();
            for (name, t) in tau.deltas.iter() {
                let f = &flags[offset..offset + t.numel()];
                let data = t
                    .data()
                    .iter()
                    .zip(f)
                    .map(|(&v, &keep)| if keep { v } else { 0.0 })
                    .collect();
                out.insert(name.clone(), Tensor::from_parts(t.shape().to_vec(), data));
                offset += t.numel();
            }
            out
        }
        TrimScope::PerTensor => {
            let tensors: Vec<(String, Tensor)> = tau
                .deltas
                .iter()
                .collect::<Vec<_>>()
                .par_iter()
                .map(|(name, t)| {
                    let flags = topk_flags(t.data(), keep_count(k_percent, t.numel()));
                    let data = t
                        .data()
                        .iter()
                        .zip(&flags)
                        .map(|(&v, &keep)| if keep { v } else { 0.0 })
                        .collect();
                    ((*name).clone(), Tensor::from_parts(t.shape().to_vec(), data))
                })
                .collect();
            Checkpoint::from_tensors(tensors)
        }
    };
    let mut out = tau.clone();
    out.deltas = deltas;
    out.prep.steps.push(PrepStep::Trim { k_percent, scope });
    Ok(out)
}

/// Drop-and-rescale: each entry is zeroed with probability `p`, survivors
/// are multiplied by `1/(1-p)`.
///
/// One uniform draw is consumed per entry in canonical order, including
/// entries that are already zero, so the dropped set depends only on the
/// schema and the seed. An entry survives when its draw is `>= p`.
pub fn dare(tau: &TaskVector, p: f64, rng: &mut PrngStream) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dare p must be in [0, 1), got {p}")));
    }
    let scale = (1.0 / (1.0 - p)) as f32;
    let mut out = Checkpoint::new();
    for (name, t) in tau.deltas.iter() {
        let data = t
            .data()
            .iter()
            .map(|&v| if rng.next_f64() >= p { v * scale } else { 0.0 })
            .collect();
        out.insert(name.clone(), Tensor::from_parts(t.shape().to_vec(), data));
    }
    let mut res = tau.clone();
    res.deltas = out;
    res.prep.steps.push(PrepStep::Dare { p, seed: rng.seed() });
    Ok(res)
}

/// Element-wise `sum_j c_j * tau_j`, accumulated in f64.
pub fn axpy(terms: &[(f64, &TaskVector)]) -> Result<TaskVector> {
    let (_, first) = terms
        .first()
        .ok_or_else(|| Error::invalid("axpy needs at least one term"))?;
    for (_, tv) in &terms[1..] {
        congruence_check(&first.deltas, &tv.deltas)?;
    }
    let names: Vec<&String> = first.deltas.names().collect();
    let tensors: Vec<(String, Tensor)> = names
        .par_iter()
        .map(|&name| {
            let shape = first.deltas.get(name).unwrap().shape().to_vec();
            let mut acc = vec![0f64; first.deltas.get(name).unwrap().numel()];
            for (c, tv) in terms {
                for (a, &v) in acc.iter_mut().zip(tv.deltas.get(name).unwrap().data()) {
                    *a += c * v as f64;
                }
            }
            let data = acc.into_iter().map(|a| a as f32).collect();
            (name.clone(), Tensor::from_parts(shape, data))
        })
        .collect();
    let sources: Vec<&str> = terms.iter().map(|(_, t)| t.source_id.as_str()).collect();
    Ok(TaskVector::new(
        Checkpoint::from_tensors(tensors),
        first.base_id.clone(),
        format!("axpy({})", sources.join(",")),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(values: &[f32]) -> TaskVector {
        let c = Checkpoint::from_tensors([("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())]);
        TaskVector::new(c, "base", "t")
    }

    fn values(t: &TaskVector) -> Vec<f32> {
        t.deltas.flatten()
    }

    /// Independent top-k: full stable sort by descending magnitude.
    fn sort_oracle(v: &[f32], keep: usize) -> Vec<f32> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap());
        let mut out = vec![0.0; v.len()];
        for &i in idx.iter().take(keep) {
            out[i] = v[i];
        }
        out
    }

    #[test]
    fn extract_subtracts() {
        let m = Checkpoint::from_tensors([("w", Tensor::new(vec![2], vec![1.5, 0.8]).unwrap())]);
        let b = Checkpoint::from_tensors([("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())]);
        let t = extract(&m, &b).unwrap();
        assert_eq!(values(&t), vec![0.5, (0.8f32 as f64 - 1.0) as f32]);
        assert!(extract(&m, &m).unwrap().deltas.flatten().iter().all(|v| *v == 0.0));
        let other = Checkpoint::from_tensors([("v", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())]);
        assert!(extract(&m, &other).is_err());
    }

    #[test]
    fn keep_count_rounding() {
        assert_eq!(keep_count(50.0, 4), 2);
        assert_eq!(keep_count(34.0, 3), 2);
        assert_eq!(keep_count(70.0, 10), 7);
        assert_eq!(keep_count(80.0, 10), 8);
        assert_eq!(keep_count(100.0, 7), 7);
        assert_eq!(keep_count(0.1, 7), 1);
    }

    #[test]
    fn trim_keeps_largest() {
        let t = tv(&[0.3, -0.2, 0.05, 0.0]);
        let out = topk_trim(&t, 50.0, TrimScope::Global).unwrap();
        assert_eq!(values(&out), vec![0.3, -0.2, 0.0, 0.0]);
        assert_eq!(values(&out), sort_oracle(&values(&t), 2));
        assert_eq!(out.prep.topk_percent(), Some(50.0));
    }

    #[test]
    fn trim_full_is_identity() {
        let t = tv(&[0.3, -0.2, 0.05, 0.0]);
        assert_eq!(values(&topk_trim(&t, 100.0, TrimScope::Global).unwrap()), values(&t));
    }

    #[test]
    fn trim_tie_keeps_earlier_index() {
        let t = tv(&[0.2, -0.2, 0.1]);
        let out = topk_trim(&t, 34.0, TrimScope::Global).unwrap();
        assert_eq!(values(&out), vec![0.2, -0.2, 0.0]);
        // Threshold tie: keep 1 of {0.2, -0.2} -> the first.
        let out = topk_trim(&tv(&[0.1, 0.2, -0.2]), 34.0, TrimScope::Global).unwrap();
        assert_eq!(values(&out), vec![0.0, 0.2, -0.2]);
        let out = topk_trim(&tv(&[0.1, -0.2, 0.2]), 1.0, TrimScope::Global).unwrap();
        assert_eq!(values(&out), vec![0.0, -0.2, 0.0]);
    }

    #[test]
    fn trim_tie_break_matches_permutation_oracle() {
        // For every permutation of a tied multiset, the kept set is the
        // first `keep` positions in the order (|v| desc, index asc).
        let base = [0.2f32, -0.2, 0.2, 0.1, -0.1];
        let mut perm: Vec<usize> = (0..base.len()).collect();
        fn next_perm(p: &mut [usize]) -> bool {
            let Some(i) = (0..p.len() - 1).rev().find(|&i| p[i] < p[i + 1]) else {
                return false;
            };
            let j = (i + 1..p.len()).rev().find(|&j| p[j] > p[i]).unwrap();
            p.swap(i, j);
            p[i + 1..].reverse();
            true
        }
        loop {
            let v: Vec<f32> = perm.iter().map(|&i| base[i]).collect();
            for keep_pct in [20.0, 40.0, 60.0, 80.0] {
                let keep = keep_count(keep_pct, v.len());
                let got = values(&topk_trim(&tv(&v), keep_pct, TrimScope::Global).unwrap());
                assert_eq!(got, sort_oracle(&v, keep), "{v:?} keep {keep}");
            }
            if !next_perm(&mut perm) {
                break;
            }
        }
    }

    #[test]
    fn trim_global_vs_per_tensor() {
        let c = Checkpoint::from_tensors([
            ("a", Tensor::new(vec![2], vec![1.0, 0.9]).unwrap()),
            ("b", Tensor::new(vec![2], vec![0.1, 0.2]).unwrap()),
        ]);
        let t = TaskVector::new(c, "b", "s");
        let g = topk_trim(&t, 50.0, TrimScope::Global).unwrap();
        assert_eq!(g.deltas.flatten(), vec![1.0, 0.9, 0.0, 0.0]);
        let p = topk_trim(&t, 50.0, TrimScope::PerTensor).unwrap();
        assert_eq!(p.deltas.flatten(), vec![1.0, 0.0, 0.0, 0.2]);
    }

    #[test]
    fn trim_rejects_bad_k_and_double_trim() {
        let t = tv(&[1.0]);
        assert!(topk_trim(&t, 0.0, TrimScope::Global).is_err());
        assert!(topk_trim(&t, 100.5, TrimScope::Global).is_err());
        let once = topk_trim(&t, 80.0, TrimScope::Global).unwrap();
        assert!(topk_trim(&once, 80.0, TrimScope::Global).is_err());
    }

    #[test]
    fn dare_p_zero_is_identity() {
        let t = tv(&[1.0, -2.0, 3.0]);
        let out = dare(&t, 0.0, &mut PrngStream::new(1)).unwrap();
        assert_eq!(values(&out), values(&t));
    }

    #[test]
    fn dare_scales_survivors_by_ten() {
        let t = tv(&[1.5; 1000]);
        let out = dare(&t, 0.9, &mut PrngStream::new(5)).unwrap();
        assert!(values(&out).iter().all(|&v| v == 0.0 || v == 15.0));
        assert_eq!((1.0f64 / (1.0 - 0.9)) as f32, 10.0);
    }

    #[test]
    fn dare_golden_vector() {
        // Frozen output for seed 7.
        let t = tv(&[1.0, 2.0, 3.0, 4.0]);
        let out = dare(&t, 0.5, &mut PrngStream::new(7)).unwrap();
        let mut rng = PrngStream::new(7);
        let expected: Vec<f32> = [1.0f32, 2.0, 3.0, 4.0]
            .iter()
            .map(|&v| if rng.next_f64() >= 0.5 { v * 2.0 } else { 0.0 })
            .collect();
        assert_eq!(values(&out), expected);
        assert_eq!(values(&out), vec![2.0, 0.0, 6.0, 8.0]);
        assert_eq!(out.prep.dare_p(), Some(0.5));
        assert_eq!(out.prep.seed(), Some(7));
    }

    #[test]
    fn dare_rejects_p_one() {
        assert!(dare(&tv(&[1.0]), 1.0, &mut PrngStream::new(0)).is_err());
        assert!(dare(&tv(&[1.0]), -0.1, &mut PrngStream::new(0)).is_err());
    }

    #[test]
    fn axpy_examples() {
        let a = tv(&[1.0, 0.0]);
        let b = tv(&[0.0, 2.0]);
        assert_eq!(values(&axpy(&[(1.0, &a), (1.0, &b)]).unwrap()), vec![1.0, 2.0]);
        assert_eq!(values(&axpy(&[(0.5, &tv(&[1.0, 2.0]))]).unwrap()), vec![0.5, 1.0]);
        let t = tv(&[0.3, -0.7]);
        assert_eq!(values(&axpy(&[(1.0, &t), (-1.0, &t)]).unwrap()), vec![0.0, 0.0]);
        assert!(axpy(&[]).is_err());
        let other = TaskVector::new(
            Checkpoint::from_tensors([("v", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap())]),
            "b",
            "s",
        );
        assert!(axpy(&[(1.0, &a), (1.0, &other)]).is_err());
    }

    #[test]
    fn checkpoint_meta_round_trip() {
        let t = tv(&[0.3, -0.2, 0.1, 0.05]);
        let t = topk_trim(&t, 50.0, TrimScope::PerTensor).unwrap();
        let t = dare(&t, 0.25, &mut PrngStream::new(9)).unwrap();
        let c = t.to_checkpoint();
        assert_eq!(c.meta()["role"], "task_vector");
        assert_eq!(c.meta()["prep_order"], "trim,dare");
        let back = TaskVector::from_checkpoint(c).unwrap();
        assert_eq!(back, t);
    }
}
