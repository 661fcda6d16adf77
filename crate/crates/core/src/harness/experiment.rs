//! Retention, forgetting and sweep experiments over synthetic fine-tunes.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{Dataset, MlpParams, MlpShape};
use super::task::SyntheticTask;
use crate::analysis::{performance_retention_labeled, RetentionReport};
use crate::container::write_container;
use crate::error::{Error, Result};
use crate::masking::{mask_bit, MaskVariant};
use crate::merging::{apply_to_base, ta_merge, MergeRecipe};
use crate::prng::PrngStream;
use crate::runtime::{preprocess, BundleOptions, MaskReference, MergedBundle, TextMaskPolicy};
use crate::taskvector::{extract, TaskVector, TrimScope};
use crate::tensor::Checkpoint;

/// Labels given to the first eight modalities.
pub const MODALITIES: [&str; 8] = ["vision", "audio", "video", "point", "depth", "thermal", "imu", "tactile"];

const TAG_BASE: u64 = 0xB45E;
const TAG_SPOT: u64 = 0x5907;
const NEW_TARGET_ID: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Mlp,
    /// The reference transformer; forward-only, so it cannot be fine-tuned.
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mmer,
    Ties,
    Ta,
    NaivemcAvg,
    MmerNoDirection,
    MmerNoDominance,
    MmerNoLambda,
    /// Every task evaluated with the averaged mask.
    Avgmask,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Mmer,
        Method::Ties,
        Method::Ta,
        Method::NaivemcAvg,
        Method::MmerNoDirection,
        Method::MmerNoDominance,
        Method::MmerNoLambda,
        Method::Avgmask,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Mmer => "mmer",
            Method::Ties => "ties",
            Method::Ta => "ta",
            Method::NaivemcAvg => "naivemc-avg",
            Method::MmerNoDirection => "mmer-no-direction",
            Method::MmerNoDominance => "mmer-no-dominance",
            Method::MmerNoLambda => "mmer-no-lambda",
            Method::Avgmask => "avgmask",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgettingSpec {
    /// Index of the modality whose model is fine-tuned further.
    #[serde(default)]
    pub modality: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Allowed relative loss change of reconstructions.
    #[serde(default = "d_tolerance")]
    pub tolerance: f64,
}

impl Default for ForgettingSpec {
    fn default() -> Self {
        Self {
            modality: 0,
            steps: d_steps(),
            lr: d_lr(),
            tolerance: d_tolerance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DareSpec {
    pub p: f64,
    pub seed: u64,
}

/// Full description of an experiment; every output is a pure function of
/// it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "d_n_models")]
    pub n_models: usize,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default = "d_dims")]
    pub dims_per_modality: usize,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_output")]
    pub output_dim: usize,
    #[serde(default = "d_train")]
    pub train_size: usize,
    #[serde(default = "d_eval")]
    pub eval_size: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Steps of multi-task training on every modality's shared map before
    /// the fine-tunes start; zero leaves the base at its random init.
    #[serde(default)]
    pub pretrain_steps: usize,
    /// Distance of each fine-tuning task from its modality's shared map.
    #[serde(default = "d_one")]
    pub task_spread: f64,
    #[serde(default = "d_k")]
    pub k_percent: f64,
    #[serde(default = "d_one")]
    pub alpha: f64,
    /// Lambda for modalities without an entry in `lambdas`.
    #[serde(default = "d_one")]
    pub lambda: f64,
    #[serde(default)]
    pub lambdas: BTreeMap<String, f64>,
    #[serde(default)]
    pub trim_scope: TrimScope,
    #[serde(default)]
    pub mask_reference: MaskReference,
    #[serde(default)]
    pub dare: Option<DareSpec>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub forgetting: ForgettingSpec,
    /// Mask elements re-checked for optimality per modality and run.
    #[serde(default = "d_spot")]
    pub spot_checks: usize,
}

fn d_n_models() -> usize {
    4
}
fn d_dims() -> usize {
    4
}
fn d_hidden() -> usize {
    32
}
fn d_output() -> usize {
    4
}
fn d_train() -> usize {
    128
}
fn d_eval() -> usize {
    256
}
fn d_steps() -> usize {
    400
}
fn d_lr() -> f64 {
    0.1
}
fn d_k() -> f64 {
    80.0
}
fn d_one() -> f64 {
    1.0
}
fn d_tolerance() -> f64 {
    0.05
}
fn d_seeds() -> Vec<u64> {
    (0..10).collect()
}
fn d_methods() -> Vec<Method> {
    vec![Method::Mmer, Method::Ties, Method::Ta, Method::NaivemcAvg]
}
fn d_spot() -> usize {
    64
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

fn in_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(lo..=hi).contains(&v) {
        return Err(Error::invalid(format!("{name} = {v} is outside [{lo}, {hi}]")));
    }
    Ok(())
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture == Architecture::Transformer {
            return Err(Error::invalid(
                "the transformer architecture is forward-only and cannot be fine-tuned; use \"mlp\"",
            ));
        }
        if !(1..=8).contains(&self.n_models) {
            return Err(Error::invalid(format!("n_models = {} is outside 1..=8", self.n_models)));
        }
        in_range("k_percent", self.k_percent, 10.0, 100.0)?;
        in_range("lambda", self.lambda, 0.25, 4.0)?;
        for (m, &l) in &self.lambdas {
            if !MODALITIES[..self.n_models].contains(&m.as_str()) {
                return Err(Error::invalid(format!("lambda given for unknown modality '{m}'")));
            }
            in_range(&format!("lambda[{m}]"), l, 0.25, 4.0)?;
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be > 0"));
        }
        for (name, v) in [
            ("dims_per_modality", self.dims_per_modality),
            ("hidden", self.hidden),
            ("output_dim", self.output_dim),
            ("train_size", self.train_size),
            ("eval_size", self.eval_size),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for lr in [self.lr, self.forgetting.lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid("learning rates must be > 0"));
            }
        }
        if !(self.task_spread >= 0.0 && self.task_spread.is_finite()) {
            return Err(Error::invalid("task_spread must be >= 0"));
        }
        if let Some(d) = &self.dare {
            if !(0.0..1.0).contains(&d.p) {
                return Err(Error::invalid(format!("dare p = {} is outside [0, 1)", d.p)));
            }
        }
        if self.seeds.is_empty() || self.methods.is_empty() {
            return Err(Error::invalid("seeds and methods must be non-empty"));
        }
        if self.forgetting.modality >= self.n_models {
            return Err(Error::invalid("forgetting.modality must index one of the models"));
        }
        Ok(())
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            input: self.dims_per_modality * self.n_models,
            hidden: self.hidden,
            output: self.output_dim,
        }
    }

    pub fn modalities(&self) -> Vec<String> {
        MODALITIES[..self.n_models].iter().map(|s| s.to_string()).collect()
    }

    pub fn task(&self, index: usize, seed: u64) -> SyntheticTask {
        let modality = MODALITIES[index];
        SyntheticTask {
            name: format!("{modality}-task"),
            modality: modality.into(),
            input_dim: self.dims_per_modality * self.n_models,
            input_offset: index * self.dims_per_modality,
            input_dims: self.dims_per_modality,
            output_dim: self.output_dim,
            target_id: index as u64,
            train_size: self.train_size,
            eval_size: self.eval_size,
            seed,
            spread: self.task_spread,
        }
    }

    /// The task the base is pretrained on for one modality.
    pub fn pretrain_task(&self, index: usize, seed: u64) -> SyntheticTask {
        let mut t = self.task(index, seed);
        t.name = format!("{}-pretrain", t.modality);
        t.spread = 0.0;
        t
    }

    /// The follow-up task for the forgetting experiment: same inputs as the
    /// chosen modality, different target map.
    pub fn new_task(&self, seed: u64) -> SyntheticTask {
        let mut t = self.task(self.forgetting.modality, seed);
        t.name = format!("{}-new-task", t.modality);
        t.target_id = NEW_TARGET_ID + self.forgetting.modality as u64;
        t
    }

    pub fn bundle_options(&self) -> BundleOptions {
        let lambdas = self
            .modalities()
            .into_iter()
            .map(|m| {
                let l = self.lambdas.get(&m).copied().unwrap_or(self.lambda);
                (m, l)
            })
            .collect();
        BundleOptions {
            recipe: MergeRecipe::ties(self.k_percent, self.alpha),
            trim_scope: self.trim_scope,
            dare: self.dare.as_ref().map(|d| (d.p, d.seed)),
            lambdas,
            mask_reference: self.mask_reference,
            ..BundleOptions::default()
        }
    }
}

/// Base model plus one fine-tune per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub seed: u64,
    pub base: Checkpoint,
    pub fine_tuned: Vec<Checkpoint>,
    pub tasks: Vec<SyntheticTask>,
}

pub fn synthesize_models(spec: &ExperimentSpec, seed: u64) -> Result<Synthesis> {
    spec.validate()?;
    let shape = spec.shape();
    let mut base_params = MlpParams::init(shape, &mut PrngStream::new(seed).fork(TAG_BASE));
    if spec.pretrain_steps > 0 {
        let parts: Vec<Dataset> = (0..spec.n_models).map(|i| spec.pretrain_task(i, seed).train_set()).collect();
        base_params.train(&Dataset::concat(&parts), spec.pretrain_steps, spec.lr, seed)?;
    }
    let base = base_params.to_checkpoint().with_meta("model_id", format!("base-{seed}"));
    let tasks: Vec<SyntheticTask> = (0..spec.n_models).map(|i| spec.task(i, seed)).collect();
    let mut fine_tuned = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let mut p = MlpParams::from_checkpoint(&base, shape)?;
        p.train(&task.train_set(), spec.steps, spec.lr, seed)?;
        fine_tuned.push(p.to_checkpoint().with_meta("model_id", format!("{}-{seed}", task.modality)));
    }
    Ok(Synthesis {
        seed,
        base,
        fine_tuned,
        tasks,
    })
}

/// `var(y) / (var(y) + mse)`: 1 for a perfect fit, higher is better.
pub fn task_score(ckpt: &Checkpoint, shape: MlpShape, task: &SyntheticTask) -> Result<f64> {
    let data = task.eval_set();
    let mse = task_loss(ckpt, shape, task)?;
    let var = data.target_variance();
    Ok(var / (var + mse))
}

/// Eval-split mean squared error.
pub fn task_loss(ckpt: &Checkpoint, shape: MlpShape, task: &SyntheticTask) -> Result<f64> {
    Ok(MlpParams::from_checkpoint(ckpt, shape)?.loss(&task.eval_set()))
}

/// Re-derives sampled mask bits from the rule and, where lambda is 1,
/// checks them against the per-element optimum of `|m * tau_star - tau_i|`.
fn spot_check(bundle: &MergedBundle, refs: &[(String, TaskVector)], count: usize, seed: u64) -> Result<()> {
    let mut rng = PrngStream::new(seed).fork(TAG_SPOT);
    let names: Vec<&String> = bundle.tau_star.deltas.names().collect();
    for (modality, tau) in refs {
        let mask = bundle.mask(modality)?;
        for _ in 0..count {
            let name = names[rng.below(names.len() as u64) as usize];
            let t = tau.deltas.tensor(name)?.data();
            let i = rng.below(t.len() as u64) as usize;
            let star = bundle.tau_star.deltas.tensor(name)?.data()[i];
            let bit = mask.tensor(name)?.get(i);
            let (ti, ts) = (t[i] as f64, star as f64);
            let cost = |b: bool| ((b as u8 as f64) * ts - ti).abs();
            let rule_ok = bit == mask_bit(t[i], star, mask.lambda, MaskVariant::Full);
            if !rule_ok || (mask.lambda == 1.0 && cost(bit) > cost(!bit)) {
                return Err(Error::invalid(format!(
                    "mask spot-check failed for {modality} at {name}[{i}]"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub report: RetentionReport,
    /// Mean mask density of the bundle used, if the method is mask-based.
    pub density: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRetention {
    pub seed: u64,
    pub original_scores: Vec<f64>,
    pub results: Vec<MethodResult>,
}

impl SeedRetention {
    pub fn result(&self, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }
}

fn mean_density(bundle: &MergedBundle) -> f64 {
    let d: Vec<f64> = bundle.masks.values().map(|m| m.density()).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Builds a bundle and checks its masks against the preprocessed (or raw)
/// references.
fn checked_bundle(
    spec: &ExperimentSpec,
    base: &Checkpoint,
    models: &[(String, Checkpoint)],
    opts: &BundleOptions,
    seed: u64,
) -> Result<MergedBundle> {
    let bundle = MergedBundle::build(base, models, opts)?;
    if spec.spot_checks > 0 {
        let mut refs = Vec::with_capacity(models.len());
        for (i, (m, ckpt)) in models.iter().enumerate() {
            let raw = extract(ckpt, base)?;
            let r = match opts.mask_reference {
                MaskReference::Preprocessed => preprocess(&raw, opts, i)?,
                MaskReference::Raw => raw,
            };
            refs.push((m.clone(), r));
        }
        if opts.variant == MaskVariant::Full {
            spot_check(&bundle, &refs, spec.spot_checks, seed)?;
        }
    }
    Ok(bundle)
}

/// Scores every method in `spec.methods` on every task, relative to the
/// fine-tuned originals.
pub fn evaluate_methods(
    spec: &ExperimentSpec,
    seed: u64,
    base: &Checkpoint,
    fine_tuned: &[Checkpoint],
    tasks: &[SyntheticTask],
) -> Result<SeedRetention> {
    let shape = spec.shape();
    let labels: Vec<String> = tasks.iter().map(|t| t.modality.clone()).collect();
    let models: Vec<(String, Checkpoint)> = labels.iter().cloned().zip(fine_tuned.iter().cloned()).collect();
    let original_scores = fine_tuned
        .iter()
        .zip(tasks)
        .map(|(m, t)| task_score(m, shape, t))
        .collect::<Result<Vec<_>>>()?;
    let opts = spec.bundle_options();
    let bundle = checked_bundle(spec, base, &models, &opts, seed)?;
    let raws = fine_tuned.iter().map(|m| extract(m, base)).collect::<Result<Vec<_>>>()?;
    let score_all = |ckpts: &dyn Fn(usize) -> Result<Checkpoint>| -> Result<Vec<f64>> {
        (0..tasks.len()).map(|i| task_score(&ckpts(i)?, shape, &tasks[i])).collect()
    };
    let mut results = Vec::new();
    for &method in &spec.methods {
        let (scores, density) = match method {
            Method::Mmer => (score_all(&|i| bundle.reconstruct(&labels[i]))?, Some(mean_density(&bundle))),
            Method::Ties => {
                let merged = apply_to_base(base, &bundle.tau_star, 1.0)?;
                (score_all(&|_| Ok(merged.clone()))?, None)
            }
            Method::Ta | Method::NaivemcAvg => {
                let alpha = if method == Method::Ta {
                    spec.alpha
                } else {
                    1.0 / raws.len() as f64
                };
                let merged = apply_to_base(base, &ta_merge(&raws, alpha)?, 1.0)?;
                (score_all(&|_| Ok(merged.clone()))?, None)
            }
            Method::MmerNoDirection | Method::MmerNoDominance | Method::MmerNoLambda => {
                let mut o = opts.clone();
                match method {
                    Method::MmerNoDirection => o.variant = MaskVariant::NoDirection,
                    Method::MmerNoDominance => o.variant = MaskVariant::NoDominance,
                    _ => o.lambdas.clear(),
                }
                let b = checked_bundle(spec, base, &models, &o, seed)?;
                (score_all(&|i| b.reconstruct(&labels[i]))?, Some(mean_density(&b)))
            }
            Method::Avgmask => {
                let text = bundle.reconstruct_text(TextMaskPolicy::AllMasks, &[])?;
                (score_all(&|_| Ok(text.clone()))?, None)
            }
        };
        results.push(MethodResult {
            method,
            report: performance_retention_labeled(&labels, &scores, &original_scores)?,
            density,
        });
    }
    Ok(SeedRetention {
        seed,
        original_scores,
        results,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionOutcome {
    pub runs: Vec<SeedRetention>,
}

impl RetentionOutcome {
    /// Seeds on which `a`'s mean retention is at least `b`'s.
    pub fn wins(&self, a: Method, b: Method) -> usize {
        self.runs
            .iter()
            .filter(|r| match (r.result(a), r.result(b)) {
                (Some(x), Some(y)) => x.report.mean_ratio >= y.report.mean_ratio,
                _ => false,
            })
            .count()
    }

    /// Columns: `seed,method,task,original_score,method_score,ratio`; a
    /// `mean` task row closes each method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,method,task,original_score,method_score,ratio\n");
        for run in &self.runs {
            for r in &run.results {
                for t in &r.report.tasks {
                    writeln!(
                        out,
                        "{},{},{},{:.6},{:.6},{:.6}",
                        run.seed, r.method, t.label, t.original_score, t.method_score, t.ratio
                    )
                    .unwrap();
                }
                writeln!(out, "{},{},mean,,,{:.6}", run.seed, r.method, r.report.mean_ratio).unwrap();
            }
        }
        out
    }
}

pub fn run_retention_experiment(spec: &ExperimentSpec) -> Result<RetentionOutcome> {
    spec.validate()?;
    let runs = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let s = synthesize_models(spec, seed)?;
            evaluate_methods(spec, seed, &s.base, &s.fine_tuned, &s.tasks)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetentionOutcome { runs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossPair {
    pub model: String,
    pub task: String,
    pub reference: f64,
    pub loss: f64,
}

impl LossPair {
    pub fn relative_change(&self) -> f64 {
        (self.loss - self.reference) / self.reference
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedForgetting {
    pub seed: u64,
    pub modality: String,
    pub tolerance: f64,
    /// Old-task loss of the original vs the further fine-tuned model.
    pub forgetting: LossPair,
    /// New-task loss of the original vs the further fine-tuned model.
    pub adaptation: LossPair,
    /// Old-task loss of each reconstructed original vs the original.
    pub reconstructed: Vec<LossPair>,
    /// New-task loss of the reconstructed new model vs the fine-tuned one.
    pub reconstructed_new: LossPair,
}

impl SeedForgetting {
    pub fn forgetting_occurred(&self) -> bool {
        self.forgetting.loss > self.forgetting.reference
    }

    /// Reconstructions of modalities other than the further-tuned one stay
    /// within tolerance.
    pub fn others_retained(&self) -> bool {
        self.reconstructed
            .iter()
            .filter(|p| p.task != format!("{}-task", self.modality))
            .all(|p| p.relative_change().abs() <= self.tolerance)
    }

    pub fn new_task_retained(&self) -> bool {
        self.reconstructed_new.relative_change().abs() <= self.tolerance
    }

    pub fn passed(&self) -> bool {
        self.forgetting_occurred() && self.others_retained() && self.new_task_retained()
    }
}

pub fn run_forgetting_seed(spec: &ExperimentSpec, seed: u64, new_task: &SyntheticTask) -> Result<SeedForgetting> {
    let shape = spec.shape();
    let s = synthesize_models(spec, seed)?;
    let j = spec.forgetting.modality;
    let old_task = &s.tasks[j];
    let mut p = MlpParams::from_checkpoint(&s.fine_tuned[j], shape)?;
    p.train(&new_task.train_set(), spec.forgetting.steps, spec.forgetting.lr, seed)?;
    let tuned = p.to_checkpoint();
    let new_label = format!("{}-new", old_task.modality);

    let mut models: Vec<(String, Checkpoint)> = s
        .tasks
        .iter()
        .map(|t| t.modality.clone())
        .zip(s.fine_tuned.iter().cloned())
        .collect();
    models.push((new_label.clone(), tuned.clone()));
    let mut opts = spec.bundle_options();
    let new_lambda = opts.lambdas.get(&old_task.modality).copied().unwrap_or(spec.lambda);
    opts.lambdas.insert(new_label.clone(), new_lambda);
    let bundle = checked_bundle(spec, &s.base, &models, &opts, seed)?;

    let loss = |c: &Checkpoint, t: &SyntheticTask| task_loss(c, shape, t);
    let pair = |model: &str, t: &SyntheticTask, reference: f64, l: f64| LossPair {
        model: model.into(),
        task: t.name.clone(),
        reference,
        loss: l,
    };
    let orig_old = loss(&s.fine_tuned[j], old_task)?;
    let forgetting = pair("finetuned", old_task, orig_old, loss(&tuned, old_task)?);
    let tuned_new = loss(&tuned, new_task)?;
    let adaptation = pair("finetuned", new_task, loss(&s.fine_tuned[j], new_task)?, tuned_new);
    let mut reconstructed = Vec::new();
    for (t, m) in s.tasks.iter().zip(&s.fine_tuned) {
        let r = bundle.reconstruct(&t.modality)?;
        reconstructed.push(pair(&format!("reconstructed-{}", t.modality), t, loss(m, t)?, loss(&r, t)?));
    }
    let r_new = bundle.reconstruct(&new_label)?;
    let reconstructed_new = pair(&format!("reconstructed-{new_label}"), new_task, tuned_new, loss(&r_new, new_task)?);
    Ok(SeedForgetting {
        seed,
        modality: old_task.modality.clone(),
        tolerance: spec.forgetting.tolerance,
        forgetting,
        adaptation,
        reconstructed,
        reconstructed_new,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingOutcome {
    pub runs: Vec<SeedForgetting>,
}

impl ForgettingOutcome {
    pub fn passed_seeds(&self) -> usize {
        self.runs.iter().filter(|r| r.passed()).count()
    }

    /// Columns: `seed,model,task,reference_loss,loss,relative_change`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,model,task,reference_loss,loss,relative_change\n");
        for run in &self.runs {
            let rows = [&run.forgetting, &run.adaptation]
                .into_iter()
                .chain(&run.reconstructed)
                .chain([&run.reconstructed_new]);
            for p in rows {
                writeln!(
                    out,
                    "{},{},{},{:.6},{:.6},{:.6}",
                    run.seed,
                    p.model,
                    p.task,
                    p.reference,
                    p.loss,
                    p.relative_change()
                )
                .unwrap();
            }
        }
        out
    }
}

/// Runs the forgetting experiment on every seed, with the new task built
/// by [`ExperimentSpec::new_task`].
pub fn run_forgetting_experiment(spec: &ExperimentSpec) -> Result<ForgettingOutcome> {
    spec.validate()?;
    let runs = spec
        .seeds
        .par_iter()
        .map(|&seed| run_forgetting_seed(spec, seed, &spec.new_task(seed)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForgettingOutcome { runs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    K,
    Lambda,
    NModels,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Lambda => "lambda",
            SweepAxis::NModels => "n_models",
        }
    }

    pub fn default_values(&self) -> Vec<f64> {
        match self {
            SweepAxis::K => vec![10.0, 20.0, 40.0, 60.0, 80.0, 100.0],
            SweepAxis::Lambda => vec![0.25, 0.5, 1.0, 1.5, 2.0, 4.0],
            SweepAxis::NModels => (1..=8).map(f64::from).collect(),
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" | "K" => Ok(SweepAxis::K),
            "lambda" => Ok(SweepAxis::Lambda),
            "n_models" | "n-models" => Ok(SweepAxis::NModels),
            other => Err(Error::invalid(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub method: Method,
    pub mean_retention: f64,
    pub density: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl Sweep {
    /// Columns: `<axis>,seed,method,mean_retention,mean_density`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},seed,method,mean_retention,mean_density\n", self.axis.name());
        for r in &self.rows {
            let density = r.density.map(|d| format!("{d:.6}")).unwrap_or_default();
            writeln!(out, "{},{},{},{:.6},{}", r.value, r.seed, r.method, r.mean_retention, density).unwrap();
        }
        out
    }
}

fn with_axis(spec: &ExperimentSpec, axis: SweepAxis, value: f64) -> Result<ExperimentSpec> {
    let mut s = spec.clone();
    match axis {
        SweepAxis::K => s.k_percent = value,
        SweepAxis::Lambda => {
            s.lambda = value;
            s.lambdas.clear();
        }
        SweepAxis::NModels => {
            if value.fract() != 0.0 {
                return Err(Error::invalid(format!("n_models sweep value {value} is not an integer")));
            }
            s.n_models = value as usize;
            s.forgetting.modality = 0;
            s.lambdas.retain(|m, _| MODALITIES[..(value as usize).min(8)].contains(&m.as_str()));
        }
    }
    s.validate()?;
    Ok(s)
}

/// Evaluates the spec's methods along one axis, everything else fixed.
pub fn run_sweep(spec: &ExperimentSpec, axis: SweepAxis, values: Option<&[f64]>) -> Result<Sweep> {
    spec.validate()?;
    let values = values.map(<[f64]>::to_vec).unwrap_or_else(|| axis.default_values());
    let specs = values
        .iter()
        .map(|&v| with_axis(spec, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let per_seed = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut rows = Vec::new();
            let shared = if axis == SweepAxis::NModels {
                None
            } else {
                Some(synthesize_models(spec, seed)?)
            };
            for (s, &v) in specs.iter().zip(&values) {
                let fresh;
                let syn = match &shared {
                    Some(x) => x,
                    None => {
                        fresh = synthesize_models(s, seed)?;
                        &fresh
                    }
                };
                let run = evaluate_methods(s, seed, &syn.base, &syn.fine_tuned, &syn.tasks)?;
                for r in run.results {
                    rows.push(SweepRow {
                        value: v,
                        seed,
                        method: r.method,
                        mean_retention: r.report.mean_ratio,
                        density: r.density,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<SweepRow> = per_seed.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then(a.seed.cmp(&b.seed))
            .then(a.method.cmp(&b.method))
    });
    Ok(Sweep { axis, rows })
}

/// Writes the task definitions and, for every seed, the base, the
/// fine-tunes and the MMER bundle under `dir`.
pub fn write_artifacts(spec: &ExperimentSpec, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("tasks"))?;
    for &seed in &spec.seeds {
        let s = synthesize_models(spec, seed)?;
        let seed_dir = dir.join(format!("seed_{seed}"));
        fs::create_dir_all(seed_dir.join("models"))?;
        write_container(&s.base, seed_dir.join("base.mtc"))?;
        let mut models = Vec::new();
        for (t, m) in s.tasks.iter().zip(&s.fine_tuned) {
            let json = serde_json::to_string_pretty(t).map_err(|e| Error::invalid(e.to_string()))?;
            fs::write(dir.join("tasks").join(format!("{}-seed{seed}.json", t.modality)), json)?;
            write_container(m, seed_dir.join("models").join(format!("{}.mtc", t.modality)))?;
            models.push((t.modality.clone(), m.clone()));
        }
        MergedBundle::build(&s.base, &models, &spec.bundle_options())?.save(seed_dir.join("bundle"))?;
    }
    Ok(())
}
