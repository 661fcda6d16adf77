//! Metrics over merged bundles: retention, storage cost, mask density,
//! overlap between modality masks, sign alignment and magnitude.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::ModalityMask;
use crate::taskvector::TaskVector;
use crate::tensor::congruence_check;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRetention {
    pub label: String,
    pub method_score: f64,
    pub original_score: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionReport {
    pub tasks: Vec<TaskRetention>,
    pub mean_ratio: f64,
}

/// Mean over tasks of `method / original`.
pub fn performance_retention(method_scores: &[f64], original_scores: &[f64]) -> Result<RetentionReport> {
    let labels: Vec<String> = (0..method_scores.len()).map(|i| format!("task{i}")).collect();
    performance_retention_labeled(&labels, method_scores, original_scores)
}

pub fn performance_retention_labeled(
    labels: &[String],
    method_scores: &[f64],
    original_scores: &[f64],
) -> Result<RetentionReport> {
    if method_scores.len() != original_scores.len() || labels.len() != method_scores.len() {
        return Err(Error::invalid(format!(
            "score lists differ in length: {} method, {} original",
            method_scores.len(),
            original_scores.len()
        )));
    }
    if method_scores.is_empty() {
        return Err(Error::invalid("at least one task score is required"));
    }
    let mut tasks = Vec::with_capacity(labels.len());
    for ((label, &m), &o) in labels.iter().zip(method_scores).zip(original_scores) {
        if o == 0.0 {
            return Err(Error::invalid(format!("original score for '{label}' is zero")));
        }
        let ratio = m / o;
        if !ratio.is_finite() {
            return Err(Error::invalid(format!("retention ratio for '{label}' is not finite")));
        }
        tasks.push(TaskRetention {
            label: label.clone(),
            method_score: m,
            original_score: o,
            ratio,
        });
    }
    let mean_ratio = tasks.iter().map(|t| t.ratio).sum::<f64>() / tasks.len() as f64;
    Ok(RetentionReport { tasks, mean_ratio })
}

impl RetentionReport {
    /// Mean ratio over the tasks whose labels are not in `exclude`.
    pub fn trimmed_mean(&self, exclude: &[&str]) -> Result<f64> {
        let kept: Vec<f64> = self
            .tasks
            .iter()
            .filter(|t| !exclude.contains(&t.label.as_str()))
            .map(|t| t.ratio)
            .collect();
        if kept.is_empty() {
            return Err(Error::invalid("exclude list removes every task"));
        }
        Ok(kept.iter().sum::<f64>() / kept.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageMethod {
    Originals,
    Naivemc,
    Damc,
    Mmer,
}

impl fmt::Display for StorageMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StorageMethod::Originals => "originals",
            StorageMethod::Naivemc => "naivemc",
            StorageMethod::Damc => "damc",
            StorageMethod::Mmer => "mmer",
        })
    }
}

impl FromStr for StorageMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "originals" => Ok(StorageMethod::Originals),
            "naivemc" => Ok(StorageMethod::Naivemc),
            "damc" => Ok(StorageMethod::Damc),
            "mmer" => Ok(StorageMethod::Mmer),
            other => Err(Error::invalid(format!("unknown storage method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorageLedger {
    pub method: StorageMethod,
    pub n: u64,
    pub p: u64,
    pub p_prime: u64,
    pub p_star: Option<u64>,
    pub bits: u64,
}

/// Storage in bits for `n` models sharing `p` language-model parameters,
/// each with `p_prime` modality-specific parameters, at 32 bits per float.
/// `p_star` is the per-model parameter count DAMC stores twice.
pub fn storage_bits(
    method: StorageMethod,
    n: u64,
    p: u64,
    p_prime: u64,
    p_star: Option<u64>,
) -> Result<StorageLedger> {
    let overflow = || Error::invalid("storage size overflows 64 bits");
    let mul = |a: u64, b: u64| a.checked_mul(b).ok_or_else(overflow);
    let add = |a: u64, b: u64| a.checked_add(b).ok_or_else(overflow);
    let shared = add(mul(32, p)?, mul(32, mul(n, p_prime)?)?)?;
    let bits = match method {
        StorageMethod::Originals => mul(32, mul(n, add(p, p_prime)?)?)?,
        StorageMethod::Naivemc => shared,
        StorageMethod::Damc => {
            let ps = p_star.ok_or_else(|| Error::invalid("damc storage needs P_star"))?;
            add(shared, mul(mul(2, n)?, mul(32, ps)?)?)?
        }
        StorageMethod::Mmer => add(add(shared, mul(32, p)?)?, mul(n, p)?)?,
    };
    Ok(StorageLedger {
        method,
        n,
        p,
        p_prime,
        p_star,
        bits,
    })
}

pub fn mask_density(mask: &ModalityMask) -> f64 {
    mask.density()
}

/// What counts as an element of `tau_i` surviving in the merged vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InclusionRule {
    /// Merged value is nonzero with the same sign.
    #[default]
    SignMatch,
    /// Merged value is nonzero.
    NonzeroOnly,
}

fn same_sign(a: f32, b: f32) -> bool {
    (a > 0.0 && b > 0.0) || (a < 0.0 && b < 0.0)
}

/// Per-tensor counts combined in canonical order.
fn count_pairs<F>(tau_i: &TaskVector, tau_star: &TaskVector, f: F) -> Result<Vec<(u64, u64, f64)>>
where
    F: Fn(f32, f32) -> (bool, bool) + Sync,
{
    congruence_check(&tau_i.deltas, &tau_star.deltas)?;
    let names: Vec<&String> = tau_i.deltas.names().collect();
    Ok(names
        .par_iter()
        .map(|&name| {
            let a = tau_i.deltas.get(name).unwrap().data();
            let s = tau_star.deltas.get(name).unwrap().data();
            let (mut num, mut den, mut mag) = (0u64, 0u64, 0f64);
            for (&x, &y) in a.iter().zip(s) {
                let (hit, counted) = f(x, y);
                num += hit as u64;
                den += counted as u64;
                mag += (x as f64).abs();
            }
            (num, den, mag)
        })
        .collect())
}

/// Fraction of the nonzero entries of `tau_i` that are integrated into
/// `tau_star` under `rule`.
pub fn merged_inclusion(tau_i: &TaskVector, tau_star: &TaskVector, rule: InclusionRule) -> Result<f64> {
    let parts = count_pairs(tau_i, tau_star, |x, y| {
        let hit = match rule {
            InclusionRule::SignMatch => same_sign(x, y),
            InclusionRule::NonzeroOnly => x != 0.0 && y != 0.0,
        };
        (hit, x != 0.0)
    })?;
    let (num, den) = parts.iter().fold((0, 0), |(n, d), p| (n + p.0, d + p.1));
    if den == 0 {
        return Err(Error::invalid(format!("task vector '{}' is all zero", tau_i.source_id)));
    }
    Ok(num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignmentDenominator {
    #[default]
    Nonzero,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentStats {
    pub alignment: f64,
    pub avg_magnitude: f64,
}

/// Share of entries where `tau_i` and `tau_star` have the same nonzero
/// sign, plus the mean of `|tau_i|` over all entries. An all-zero `tau_i`
/// has alignment 0.
pub fn alignment_stats(
    tau_i: &TaskVector,
    tau_star: &TaskVector,
    denominator: AlignmentDenominator,
) -> Result<AlignmentStats> {
    let parts = count_pairs(tau_i, tau_star, |x, y| {
        let counted = match denominator {
            AlignmentDenominator::Nonzero => x != 0.0,
            AlignmentDenominator::All => true,
        };
        (same_sign(x, y), counted)
    })?;
    let (mut num, mut den, mut mag) = (0u64, 0u64, 0f64);
    for (n, d, m) in parts {
        num += n;
        den += d;
        mag += m;
    }
    let total = tau_i.numel();
    Ok(AlignmentStats {
        alignment: if den == 0 { 0.0 } else { num as f64 / den as f64 },
        avg_magnitude: if total == 0 { 0.0 } else { mag / total as f64 },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix {
    pub modalities: Vec<String>,
    pub popcounts: Vec<u64>,
    /// `pairwise[i][j]` counts bits set in both mask i and mask j.
    pub pairwise: Vec<Vec<u64>>,
    /// Bits set in mask i and in no other mask.
    pub exclusive: Vec<u64>,
}

impl OverlapMatrix {
    fn frac(num: u64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    /// `pairwise[i][j]` relative to mask i's popcount.
    pub fn pairwise_fraction(&self, i: usize, j: usize) -> f64 {
        Self::frac(self.pairwise[i][j], self.popcounts[i])
    }

    pub fn exclusive_fraction(&self, i: usize) -> f64 {
        Self::frac(self.exclusive[i], self.popcounts[i])
    }
}

pub fn overlap_matrix(masks: &[&ModalityMask]) -> Result<OverlapMatrix> {
    if masks.len() < 2 {
        return Err(Error::invalid("overlap needs at least two masks"));
    }
    for m in &masks[1..] {
        masks[0].check_same_schema(m)?;
    }
    let n = masks.len();
    let names: Vec<&String> = masks[0].tensors().keys().collect();
    let per_tensor: Vec<(Vec<Vec<u64>>, Vec<u64>)> = names
        .par_iter()
        .map(|&name| {
            let bits: Vec<&[u8]> = masks.iter().map(|m| m.tensors()[name].bytes()).collect();
            let mut pair = vec![vec![0u64; n]; n];
            let mut excl = vec![0u64; n];
            for byte in 0..bits[0].len() {
                for i in 0..n {
                    let bi = bits[i][byte];
                    let mut others = 0u8;
                    for j in 0..n {
                        pair[i][j] += (bi & bits[j][byte]).count_ones() as u64;
                        if j != i {
                            others |= bits[j][byte];
                        }
                    }
                    excl[i] += (bi & !others).count_ones() as u64;
                }
            }
            (pair, excl)
        })
        .collect();
    let mut pairwise = vec![vec![0u64; n]; n];
    let mut exclusive = vec![0u64; n];
    for (pair, excl) in per_tensor {
        for i in 0..n {
            exclusive[i] += excl[i];
            for j in 0..n {
                pairwise[i][j] += pair[i][j];
            }
        }
    }
    Ok(OverlapMatrix {
        modalities: masks.iter().map(|m| m.modality.clone()).collect(),
        popcounts: masks.iter().map(|m| m.popcount()).collect(),
        pairwise,
        exclusive,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReportValue {
    Fraction(f64),
    Real(f64),
    Count(u64),
}

impl fmt::Display for ReportValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportValue::Fraction(v) => write!(f, "{v:.6}"),
            ReportValue::Real(v) => write!(f, "{v}"),
            ReportValue::Count(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub section: String,
    pub subject: String,
    pub metric: String,
    pub value: ReportValue,
}

/// Flat table of metrics written as `report.json` and `report.csv`.
///
/// Both files carry the same rows: `section`, `subject`, `metric`,
/// `value`. Fractions are printed with six decimals, counts as integers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub entries: Vec<ReportEntry>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, section: &str, subject: &str, metric: &str, value: ReportValue) {
        self.entries.push(ReportEntry {
            section: section.into(),
            subject: subject.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn add_retention(&mut self, method: &str, report: &RetentionReport) {
        for t in &report.tasks {
            self.push("retention", &format!("{method}/{}", t.label), "ratio", ReportValue::Fraction(t.ratio));
        }
        self.push("retention", method, "mean_ratio", ReportValue::Fraction(report.mean_ratio));
    }

    pub fn add_storage(&mut self, ledger: &StorageLedger) {
        self.push("storage", &ledger.method.to_string(), "bits", ReportValue::Count(ledger.bits));
    }

    pub fn add_density(&mut self, mask: &ModalityMask) {
        self.push("density", &mask.modality, "popcount", ReportValue::Count(mask.popcount()));
        self.push("density", &mask.modality, "density", ReportValue::Fraction(mask.density()));
    }

    pub fn add_overlap(&mut self, m: &OverlapMatrix) {
        for (i, a) in m.modalities.iter().enumerate() {
            for (j, b) in m.modalities.iter().enumerate() {
                if i != j {
                    let subject = format!("{a}&{b}");
                    self.push("overlap", &subject, "count", ReportValue::Count(m.pairwise[i][j]));
                    self.push("overlap", &subject, "fraction", ReportValue::Fraction(m.pairwise_fraction(i, j)));
                }
            }
            self.push("overlap", a, "exclusive", ReportValue::Count(m.exclusive[i]));
            self.push("overlap", a, "exclusive_fraction", ReportValue::Fraction(m.exclusive_fraction(i)));
        }
    }

    pub fn add_alignment(&mut self, subject: &str, s: &AlignmentStats) {
        self.push("alignment", subject, "alignment", ReportValue::Fraction(s.alignment));
        self.push("alignment", subject, "avg_magnitude", ReportValue::Real(s.avg_magnitude));
    }

    pub fn add_inclusion(&mut self, subject: &str, fraction: f64) {
        self.push("inclusion", subject, "fraction", ReportValue::Fraction(fraction));
    }

    pub fn to_json(&self) -> String {
        let mut out = String::from("{\"entries\":[");
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let quote = |s: &str| serde_json::to_string(s).expect("string serialization");
            let value = match e.value {
                ReportValue::Real(v) if !v.is_finite() => "null".to_string(),
                ReportValue::Real(v) => serde_json::to_string(&v).expect("float serialization"),
                other => other.to_string(),
            };
            write!(
                out,
                "{{\"metric\":{},\"section\":{},\"subject\":{},\"value\":{}}}",
                quote(&e.metric),
                quote(&e.section),
                quote(&e.subject),
                value
            )
            .unwrap();
        }
        out.push_str("]}\n");
        out
    }

    pub fn to_csv(&self) -> String {
        let field = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut out = String::from("section,subject,metric,value\n");
        for e in &self.entries {
            writeln!(out, "{},{},{},{}", field(&e.section), field(&e.subject), field(&e.metric), e.value).unwrap();
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json())?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::BitTensor;
    use crate::tensor::{Checkpoint, Tensor};
    use std::collections::BTreeMap;

    fn tv(v: &[f32]) -> TaskVector {
        let c = Checkpoint::from_tensors([("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap())]);
        TaskVector::new(c, "base", "t")
    }

    fn mask(name: &str, bits: &[bool]) -> ModalityMask {
        let mut t = BTreeMap::new();
        t.insert("w".to_string(), BitTensor::from_bits(&[bits.len()], bits.iter().copied()));
        ModalityMask::new(name, 1.0, t)
    }

    #[test]
    fn retention_examples() {
        let r = performance_retention(&[45.0, 44.0], &[50.0, 40.0]).unwrap();
        assert_eq!(r.tasks[0].ratio, 0.9);
        assert_eq!(r.tasks[1].ratio, 1.1);
        assert_eq!(r.mean_ratio, 1.0);
        assert_eq!(performance_retention(&[3.0, 7.0], &[3.0, 7.0]).unwrap().mean_ratio, 1.0);
        assert!((performance_retention(&[99.4], &[100.0]).unwrap().mean_ratio - 0.994).abs() < 1e-12);
    }

    #[test]
    fn retention_errors() {
        assert!(performance_retention(&[1.0], &[1.0, 2.0]).is_err());
        assert!(performance_retention(&[], &[]).is_err());
        assert!(performance_retention(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn trimmed_mean_excludes_labels() {
        let r = performance_retention(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.trimmed_mean(&["task2"]).unwrap(), 1.5);
        assert_eq!(r.trimmed_mean(&[]).unwrap(), 2.0);
        assert!(r.trimmed_mean(&["task0", "task1", "task2"]).is_err());
    }

    #[test]
    fn storage_examples() {
        let bits = |m| storage_bits(m, 4, 10, 3, None).unwrap().bits;
        assert_eq!(bits(StorageMethod::Mmer), 1064);
        assert_eq!(bits(StorageMethod::Naivemc), 704);
        assert_eq!(bits(StorageMethod::Originals), 1664);
        assert!(storage_bits(StorageMethod::Damc, 4, 10, 3, None).is_err());
        assert_eq!(storage_bits(StorageMethod::Damc, 4, 10, 3, Some(5)).unwrap().bits, 704 + 8 * 160);
        assert!(storage_bits(StorageMethod::Originals, u64::MAX, 2, 0, None).is_err());
    }

    #[test]
    fn density_examples() {
        assert!((mask_density(&mask("a", &[true, false, false])) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_density(&mask("a", &[false; 4])), 0.0);
        assert_eq!(mask_density(&mask("a", &[true; 4])), 1.0);
    }

    #[test]
    fn inclusion_examples() {
        let a = tv(&[1.0, -1.0]);
        assert_eq!(merged_inclusion(&a, &tv(&[0.5, 0.5]), InclusionRule::SignMatch).unwrap(), 0.5);
        assert_eq!(merged_inclusion(&a, &tv(&[0.5, 0.5]), InclusionRule::NonzeroOnly).unwrap(), 1.0);
        assert_eq!(merged_inclusion(&a, &a, InclusionRule::SignMatch).unwrap(), 1.0);
        assert_eq!(merged_inclusion(&a, &tv(&[-1.0, 1.0]), InclusionRule::SignMatch).unwrap(), 0.0);
        assert!(merged_inclusion(&tv(&[0.0, 0.0]), &a, InclusionRule::SignMatch).is_err());
        assert!(merged_inclusion(&a, &tv(&[1.0]), InclusionRule::SignMatch).is_err());
    }

    #[test]
    fn overlap_examples() {
        let m1 = mask("a", &[true, true, false]);
        let m2 = mask("b", &[false, true, true]);
        let o = overlap_matrix(&[&m1, &m2]).unwrap();
        assert_eq!(o.pairwise[0][1], 1);
        assert_eq!(o.exclusive[0], 1);
        assert_eq!(o.exclusive_fraction(0), 0.5);
        let o = overlap_matrix(&[&m1, &m1]).unwrap();
        assert_eq!(o.pairwise[0][1], 2);
        assert_eq!(o.exclusive, vec![0, 0]);
        let m3 = mask("c", &[false, false, true]);
        let o = overlap_matrix(&[&m1, &m3]).unwrap();
        assert_eq!(o.pairwise[0][1], 0);
        assert_eq!(o.exclusive, vec![2, 1]);
        assert!(overlap_matrix(&[&m1]).is_err());
        assert!(overlap_matrix(&[&m1, &mask("d", &[true])]).is_err());
    }

    #[test]
    fn alignment_examples() {
        let s = alignment_stats(&tv(&[0.3, -0.2]), &tv(&[0.2, 0.4]), AlignmentDenominator::Nonzero).unwrap();
        assert_eq!(s.alignment, 0.5);
        assert!((s.avg_magnitude - 0.25).abs() < 1e-7);
        let a = tv(&[0.3, -0.2, 0.0, 0.0]);
        assert_eq!(alignment_stats(&a, &a, AlignmentDenominator::Nonzero).unwrap().alignment, 1.0);
        assert_eq!(alignment_stats(&a, &a, AlignmentDenominator::All).unwrap().alignment, 0.5);
    }

    #[test]
    fn report_formats() {
        let mut r = Report::new();
        r.add_density(&mask("audio", &[true, false, false]));
        r.add_storage(&storage_bits(StorageMethod::Mmer, 4, 10, 3, None).unwrap());
        assert_eq!(
            r.to_csv(),
            "section,subject,metric,value\n\
             density,audio,popcount,1\n\
             density,audio,density,0.333333\n\
             storage,mmer,bits,1064\n"
        );
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["entries"][1]["value"].as_f64(), Some(0.333333));
        assert!(r.to_json().contains("\"value\":0.333333}"));
    }
}
