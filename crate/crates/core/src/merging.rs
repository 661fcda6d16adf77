//! Merging task vectors with Task Arithmetic and TIES.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskvector::{topk_trim, TaskVector, TrimScope};
use crate::tensor::{congruence_check, Checkpoint, Tensor};

pub const ROLE_MERGED: &str = "merged_task_vector";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Ta,
    Ties,
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMethod::Ta => "ta",
            MergeMethod::Ties => "ties",
        })
    }
}

impl FromStr for MergeMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ta" => Ok(MergeMethod::Ta),
            "ties" => Ok(MergeMethod::Ties),
            other => Err(Error::invalid(format!("unknown merge method '{other}'"))),
        }
    }
}

/// How a merged task vector was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub alpha: f64,
    pub inputs: Vec<String>,
    /// TopK% applied to inputs before a TIES merge.
    pub k_percent: Option<f64>,
    #[serde(default)]
    pub notes: String,
}

impl MergeRecipe {
    pub fn ties(k_percent: f64, alpha: f64) -> Self {
        Self {
            method: MergeMethod::Ties,
            alpha,
            inputs: Vec::new(),
            k_percent: Some(k_percent),
            notes: String::new(),
        }
    }

    pub fn ta(alpha: f64) -> Self {
        Self {
            method: MergeMethod::Ta,
            alpha,
            inputs: Vec::new(),
            k_percent: None,
            notes: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.method == MergeMethod::Ties && self.k_percent.is_none() {
            return Err(Error::invalid("TIES recipe needs k_percent"));
        }
        Ok(())
    }

    pub(crate) fn write_meta(&self, meta: &mut BTreeMap<String, String>) {
        meta.insert("merge_method".into(), self.method.to_string());
        meta.insert("alpha".into(), self.alpha.to_string());
        meta.insert("inputs".into(), self.inputs.join(","));
        if let Some(k) = self.k_percent {
            meta.insert("k_percent".into(), k.to_string());
        }
        if !self.notes.is_empty() {
            meta.insert("notes".into(), self.notes.clone());
        }
    }

    pub(crate) fn read_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Header(format!("merged task vector lacks meta '{k}'")))
        };
        let parse = |k: &str, v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Header(format!("meta {k}='{v}'")))
        };
        let method = get("merge_method")?.parse()?;
        let alpha = parse("alpha", get("alpha")?)?;
        let inputs = meta
            .get("inputs")
            .map(|s| s.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default();
        let k_percent = meta.get("k_percent").map(|v| parse("k_percent", v)).transpose()?;
        Ok(Self {
            method,
            alpha,
            inputs,
            k_percent,
            notes: meta.get("notes").cloned().unwrap_or_default(),
        })
    }
}

/// A merged task vector together with the recipe that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedTaskVector {
    pub tau: TaskVector,
    pub recipe: MergeRecipe,
}

impl MergedTaskVector {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.tau.to_checkpoint();
        c.set_meta("role", ROLE_MERGED);
        self.recipe.write_meta(c.meta_mut());
        c
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let recipe = MergeRecipe::read_meta(ckpt.meta())?;
        let tau = TaskVector::from_checkpoint(ckpt)?;
        Ok(Self { tau, recipe })
    }
}

fn check_inputs(taus: &[TaskVector]) -> Result<&TaskVector> {
    let first = taus
        .first()
        .ok_or_else(|| Error::invalid("merge needs at least one task vector"))?;
    for t in &taus[1..] {
        congruence_check(&first.deltas, &t.deltas)?;
    }
    Ok(first)
}

fn merged_source(taus: &[TaskVector], method: MergeMethod) -> String {
    let ids: Vec<&str> = taus.iter().map(|t| t.source_id.as_str()).collect();
    format!("{method}({})", ids.join(","))
}

/// Per-element reduction over the aligned values of every input.
fn reduce_elementwise<F>(taus: &[TaskVector], f: F) -> Result<Checkpoint>
where
    F: Fn(&[f32]) -> f32 + Sync,
{
    let first = check_inputs(taus)?;
    let names: Vec<&String> = first.deltas.names().collect();
    let tensors: Vec<(String, Tensor)> = names
        .par_iter()
        .map(|&name| {
            let cols: Vec<&[f32]> = taus.iter().map(|t| t.deltas.get(name).unwrap().data()).collect();
            let shape = first.deltas.get(name).unwrap().shape().to_vec();
            let mut column = vec![0f32; taus.len()];
            let data = (0..cols[0].len())
                .map(|i| {
                    for (slot, c) in column.iter_mut().zip(&cols) {
                        *slot = c[i];
                    }
                    f(&column)
                })
                .collect();
            (name.clone(), Tensor::from_parts(shape, data))
        })
        .collect();
    Ok(Checkpoint::from_tensors(tensors))
}

/// `alpha * sum(taus)`.
pub fn ta_merge(taus: &[TaskVector], alpha: f64) -> Result<TaskVector> {
    let deltas = reduce_elementwise(taus, |col| {
        (alpha * col.iter().map(|&v| v as f64).sum::<f64>()) as f32
    })?;
    Ok(TaskVector::new(deltas, taus[0].base_id.clone(), merged_source(taus, MergeMethod::Ta)))
}

/// Elected sign of one element: the sign of positive mass minus negative
/// mass. Equal nonzero masses elect +1; an all-zero column elects 0.
pub fn elect_sign(column: &[f32]) -> i8 {
    let (mut pos, mut neg) = (0f64, 0f64);
    for &v in column {
        if v > 0.0 {
            pos += v as f64;
        } else if v < 0.0 {
            neg -= v as f64;
        }
    }
    if pos == 0.0 && neg == 0.0 {
        0
    } else if pos >= neg {
        1
    } else {
        -1
    }
}

/// Signs per tensor, in the canonical order of the inputs.
pub type SignMap = BTreeMap<String, Vec<i8>>;

pub fn ties_sign_elect(taus: &[TaskVector]) -> Result<SignMap> {
    let first = check_inputs(taus)?;
    let mut out = SignMap::new();
    for name in first.deltas.names() {
        let cols: Vec<&[f32]> = taus.iter().map(|t| t.deltas.get(name).unwrap().data()).collect();
        let signs = (0..cols[0].len())
            .map(|i| {
                let column: Vec<f32> = cols.iter().map(|c| c[i]).collect();
                elect_sign(&column)
            })
            .collect();
        out.insert(name.clone(), signs);
    }
    Ok(out)
}

/// Disjoint mean of one aligned column under its elected sign.
fn disjoint_mean(column: &[f32]) -> f64 {
    let sign = elect_sign(column);
    if sign == 0 {
        return 0.0;
    }
    let (mut sum, mut count) = (0f64, 0usize);
    for &v in column {
        if (sign > 0 && v > 0.0) || (sign < 0 && v < 0.0) {
            sum += v as f64;
            count += 1;
        }
    }
    sum / count as f64
}

/// TIES: trim each input to its TopK% (global scope), elect a sign per
/// element, average the entries that agree with it, scale by `alpha`.
///
/// Inputs that already carry a trim record are used as they are.
pub fn ties_merge(taus: &[TaskVector], k_percent: f64, alpha: f64) -> Result<TaskVector> {
    check_inputs(taus)?;
    let trimmed: Vec<TaskVector> = taus
        .iter()
        .map(|t| {
            if t.prep.is_trimmed() {
                Ok(t.clone())
            } else {
                topk_trim(t, k_percent, TrimScope::Global)
            }
        })
        .collect::<Result<_>>()?;
    let deltas = reduce_elementwise(&trimmed, |col| (alpha * disjoint_mean(col)) as f32)?;
    Ok(TaskVector::new(deltas, taus[0].base_id.clone(), merged_source(taus, MergeMethod::Ties)))
}

/// Runs the merge described by `recipe`; fills in the recipe's input ids.
pub fn merge(taus: &[TaskVector], recipe: &MergeRecipe) -> Result<MergedTaskVector> {
    recipe.validate()?;
    let tau = match recipe.method {
        MergeMethod::Ta => ta_merge(taus, recipe.alpha)?,
        MergeMethod::Ties => ties_merge(taus, recipe.k_percent.unwrap_or(100.0), recipe.alpha)?,
    };
    let mut recipe = recipe.clone();
    recipe.inputs = taus.iter().map(|t| t.source_id.clone()).collect();
    Ok(MergedTaskVector { tau, recipe })
}

/// `base + scale * tau`, accumulated in f64.
pub fn apply_to_base(base: &Checkpoint, tau: &TaskVector, scale: f64) -> Result<Checkpoint> {
    base.zip_map(&tau.deltas, |b, t| (b as f64 + scale * t as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskvector::extract;

    fn tv(values: &[f32]) -> TaskVector {
        let c = Checkpoint::from_tensors([("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())]);
        TaskVector::new(c, "base", "t")
    }

    fn ck(values: &[f32]) -> Checkpoint {
        Checkpoint::from_tensors([("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())])
    }

    #[test]
    fn ta_examples() {
        let out = ta_merge(&[tv(&[1.0, 0.0]), tv(&[0.0, 2.0])], 0.5).unwrap();
        assert_eq!(out.deltas.flatten(), vec![0.5, 1.0]);
        let t = tv(&[0.3, -0.1]);
        assert_eq!(ta_merge(std::slice::from_ref(&t), 1.0).unwrap().deltas.flatten(), t.deltas.flatten());
        let out = ta_merge(&[tv(&[1.0, -1.0]), tv(&[-1.0, 1.0])], 1.0).unwrap();
        assert_eq!(out.deltas.flatten(), vec![0.0, 0.0]);
        assert!(ta_merge(&[], 1.0).is_err());
    }

    /// Brute-force oracle: signed mass as a plain sum of values.
    fn mass_oracle(col: &[f32]) -> i8 {
        if col.iter().all(|v| *v == 0.0) {
            return 0;
        }
        let s: f64 = col.iter().map(|&v| v as f64).sum();
        if s >= 0.0 {
            1
        } else {
            -1
        }
    }

    #[test]
    fn sign_election_examples() {
        assert_eq!(elect_sign(&[0.3, 0.1]), 1);
        assert_eq!(elect_sign(&[-0.2, 0.4]), 1);
        assert_eq!(elect_sign(&[0.0, 0.0]), 0);
        assert_eq!(elect_sign(&[-0.5, 0.5]), 1);
        assert_eq!(elect_sign(&[-0.5, 0.25]), -1);
        for col in [[0.3f32, 0.1], [-0.2, 0.4], [0.0, 0.0], [-0.5, 0.5], [-0.5, 0.25]] {
            assert_eq!(elect_sign(&col), mass_oracle(&col));
        }
        let signs = ties_sign_elect(&[tv(&[0.3, -0.2, 0.0]), tv(&[0.1, 0.4, 0.0])]).unwrap();
        assert_eq!(signs["w"], vec![1, 1, 0]);
        assert!(ties_sign_elect(&[]).is_err());
    }

    #[test]
    fn ties_example() {
        let out = ties_merge(&[tv(&[0.3, -0.2, 0.0]), tv(&[0.1, 0.4, -0.5])], 100.0, 1.0).unwrap();
        assert_eq!(out.deltas.flatten(), vec![((0.3f32 as f64 + 0.1f32 as f64) / 2.0) as f32, 0.4, -0.5]);
        assert!((out.deltas.flatten()[0] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn ties_single_input_identity() {
        let t = tv(&[0.3, -0.25, 0.0, 1e-8]);
        assert_eq!(ties_merge(std::slice::from_ref(&t), 100.0, 1.0).unwrap().deltas, t.deltas);
    }

    #[test]
    fn ties_disjoint_union() {
        let out = ties_merge(&[tv(&[1.0, 0.0]), tv(&[0.0, 1.0])], 100.0, 1.0).unwrap();
        assert_eq!(out.deltas.flatten(), vec![1.0, 1.0]);
    }

    #[test]
    fn ties_trims_before_election() {
        // K=50 keeps 0.4 of the first and -0.9 of the second input.
        let out = ties_merge(&[tv(&[0.1, 0.4]), tv(&[-0.9, 0.05])], 50.0, 2.0).unwrap();
        assert_eq!(out.deltas.flatten(), vec![-1.8, 0.8]);
    }

    #[test]
    fn apply_examples() {
        let base = ck(&[1.0, 1.0]);
        let t = tv(&[0.2, -0.5]);
        assert_eq!(apply_to_base(&base, &t, 1.0).unwrap().flatten(), vec![1.2, 0.5]);
        assert_eq!(apply_to_base(&base, &t, 0.0).unwrap().flatten(), vec![1.0, 1.0]);
        let m = ck(&[1.37, -0.001]);
        let back = apply_to_base(&base, &extract(&m, &base).unwrap(), 1.0).unwrap();
        for (a, b) in back.flatten().iter().zip(m.flatten()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn recipe_meta_round_trip() {
        let merged = merge(&[tv(&[0.3, -0.2]), tv(&[0.1, 0.4])], &MergeRecipe::ties(80.0, 1.0)).unwrap();
        assert_eq!(merged.recipe.inputs, vec!["t", "t"]);
        let c = merged.to_checkpoint();
        assert_eq!(c.meta()["role"], ROLE_MERGED);
        let back = MergedTaskVector::from_checkpoint(c).unwrap();
        assert_eq!(back, merged);
    }

    #[test]
    fn recipe_rejects_non_positive_alpha() {
        assert!(merge(&[tv(&[1.0])], &MergeRecipe::ta(0.0)).is_err());
        assert!(merge(&[tv(&[1.0])], &MergeRecipe::ta(-1.0)).is_err());
    }
}
