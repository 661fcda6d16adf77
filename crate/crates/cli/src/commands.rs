use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use mmer_core::analysis::{
    alignment_stats, merged_inclusion, overlap_matrix, performance_retention, performance_retention_labeled,
    storage_bits, AlignmentDenominator, InclusionRule, RetentionReport, StorageMethod,
};
use mmer_core::harness::mlp::{L1_WEIGHT, L2_WEIGHT};
use mmer_core::harness::{
    run_forgetting_experiment, run_retention_experiment, run_sweep, task_score, write_artifacts, ExperimentSpec,
    MlpShape, SweepAxis, SyntheticTask,
};
use mmer_core::masking::MaskVariant;
use mmer_core::merging::MergeMethod;
use mmer_core::runtime::{
    decoupled_forward, BundleOptions, DecoupleOptions, MaskReference, MergedBundle, SegmentedSequence,
    ToyModelConfig,
};
use mmer_core::taskvector::TrimScope;
use mmer_core::{
    average_masks, build_mask_ablation, dare, decode_container, encode_container, extract, merge, pack_mask,
    topk_trim, unpack_mask, Checkpoint, MergeRecipe, MergedTaskVector, ModalityMask, PrngStream, TaskVector,
};

use crate::args::*;
use crate::config::{self, check_dare_p, check_k, pick, Lambdas, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::provenance::{read_bytes, Provenance};

pub struct Ctx {
    pub json: bool,
    pub config: PipelineConfig,
    pub argv: Vec<String>,
}

impl Ctx {
    fn provenance(&self) -> Provenance {
        Provenance::new(&self.argv)
    }

    fn emit(&self, text: impl AsRef<str>, value: Value) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(&value).expect("json value"));
        } else {
            println!("{}", text.as_ref());
        }
    }

    fn output(&self, flag: &Option<PathBuf>) -> CliResult<PathBuf> {
        flag.clone()
            .or_else(|| self.config.output.clone())
            .ok_or_else(|| CliError::Usage("missing output path (-o/--output)".into()))
    }

    fn base(&self, flag: &Option<PathBuf>) -> CliResult<PathBuf> {
        flag.clone()
            .or_else(|| self.config.base.clone())
            .ok_or_else(|| CliError::Usage("missing --base".into()))
    }
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let ckpt = decode_container(&bytes).map_err(|e| with_path(path, e))?;
    Ok((ckpt, bytes))
}

fn load_mask(path: &Path) -> CliResult<(ModalityMask, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let mask = unpack_mask(&bytes).map_err(|e| with_path(path, e))?;
    Ok((mask, bytes))
}

/// Prefixes data errors with the file they came from, keeping their class.
fn with_path(path: &Path, e: mmer_core::Error) -> CliError {
    if e.is_data_error() {
        CliError::Io(format!("{}: {e}", path.display()))
    } else {
        CliError::Core(e)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn save_checkpoint(mut ckpt: Checkpoint, path: &Path, prov: &Provenance) -> CliResult<()> {
    prov.stamp(ckpt.meta_mut());
    write_file(path, &encode_container(&ckpt)?)?;
    prov.log(path)
}

fn save_mask(mut mask: ModalityMask, path: &Path, prov: &Provenance) -> CliResult<()> {
    prov.stamp(&mut mask.meta);
    write_file(path, &pack_mask(&mask)?)?;
    prov.log(path)
}

fn load_task_vector(path: &Path, prov: &mut Provenance) -> CliResult<TaskVector> {
    let (ckpt, bytes) = load_checkpoint(path)?;
    prov.input(path, &bytes).inherit(ckpt.meta());
    Ok(TaskVector::from_checkpoint(ckpt)?)
}

/// `MODALITY=PATH`, or a bare path labelled by its file stem.
fn parse_model_arg(arg: &str) -> CliResult<(String, PathBuf)> {
    if let Some((label, path)) = arg.split_once('=') {
        if label.is_empty() || path.is_empty() {
            return Err(CliError::Usage(format!("bad model argument '{arg}'")));
        }
        return Ok((label.to_string(), PathBuf::from(path)));
    }
    let path = PathBuf::from(arg);
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::Usage(format!("cannot derive a modality name from '{arg}'")))?
        .to_string();
    Ok((stem, path))
}

pub fn extract_cmd(ctx: &Ctx, a: &ExtractArgs) -> CliResult<()> {
    let base_path = ctx.base(&a.base)?;
    let model_path = match &a.model {
        Some(p) => p.clone(),
        None => match ctx.config.models.as_slice() {
            [one] => parse_model_arg(one)?.1,
            _ => return Err(CliError::Usage("extract needs exactly one model".into())),
        },
    };
    let out = ctx.output(&a.output)?;
    let mut prov = ctx.provenance();
    let (base, base_bytes) = load_checkpoint(&base_path)?;
    let (model, model_bytes) = load_checkpoint(&model_path)?;
    prov.input(&base_path, &base_bytes)
        .input(&model_path, &model_bytes)
        .inherit(model.meta());
    let tau = extract(&model, &base)?;
    let nonzero = tau.nonzero_count();
    let numel = tau.numel();
    save_checkpoint(tau.to_checkpoint(), &out, &prov)?;
    ctx.emit(
        format!("wrote {} ({nonzero}/{numel} nonzero)", out.display()),
        json!({"output": out, "numel": numel, "nonzero": nonzero}),
    );
    Ok(())
}

pub fn trim_cmd(ctx: &Ctx, a: &TrimArgs) -> CliResult<()> {
    let k = pick(a.k, ctx.config.k, config::DEFAULT_K);
    check_k(k)?;
    let scope: TrimScope = pick(a.scope, ctx.config.trim_scope, TrimScope::Global);
    let out = ctx.output(&a.output)?;
    let mut prov = ctx.provenance();
    prov.param("k", k).param("scope", scope);
    let tau = load_task_vector(&a.input, &mut prov)?;
    let trimmed = topk_trim(&tau, k, scope)?;
    let nonzero = trimmed.nonzero_count();
    save_checkpoint(trimmed.to_checkpoint(), &out, &prov)?;
    ctx.emit(
        format!("wrote {} (K={k}%, {nonzero} nonzero)", out.display()),
        json!({"output": out, "k": k, "scope": scope.to_string(), "nonzero": nonzero}),
    );
    Ok(())
}

pub fn dare_cmd(ctx: &Ctx, a: &DareArgs) -> CliResult<()> {
    let p = a
        .p
        .or(ctx.config.dare_p)
        .ok_or_else(|| CliError::Usage("dare needs --p".into()))?;
    check_dare_p(p)?;
    let seed = pick(a.seed, ctx.config.seed, 0);
    let out = ctx.output(&a.output)?;
    let mut prov = ctx.provenance();
    prov.param("p", p).param("seed", seed);
    let tau = load_task_vector(&a.input, &mut prov)?;
    let dropped = dare(&tau, p, &mut PrngStream::new(seed))?;
    let nonzero = dropped.nonzero_count();
    save_checkpoint(dropped.to_checkpoint(), &out, &prov)?;
    ctx.emit(
        format!("wrote {} (p={p}, seed={seed}, {nonzero} nonzero)", out.display()),
        json!({"output": out, "p": p, "seed": seed, "nonzero": nonzero}),
    );
    Ok(())
}

struct MergeSettings {
    recipe: MergeRecipe,
    scope: TrimScope,
    dare: Option<(f64, u64)>,
}

fn merge_settings(
    ctx: &Ctx,
    method: Option<Method>,
    k: Option<f64>,
    alpha: Option<f64>,
    scope: Option<Scope>,
    dare_p: Option<f64>,
    seed: Option<u64>,
) -> CliResult<MergeSettings> {
    let cfg = &ctx.config;
    let method: MergeMethod = pick(method, cfg.method, MergeMethod::Ties);
    let k = pick(k, cfg.k, config::DEFAULT_K);
    let alpha = pick(alpha, cfg.alpha, config::DEFAULT_ALPHA);
    check_k(k)?;
    config::check_alpha(alpha)?;
    let dare_p = dare_p.or(cfg.dare_p);
    if let Some(p) = dare_p {
        check_dare_p(p)?;
    }
    let seed = pick(seed, cfg.seed, 0);
    let recipe = match method {
        MergeMethod::Ties => MergeRecipe::ties(k, alpha),
        MergeMethod::Ta => MergeRecipe::ta(alpha),
    };
    Ok(MergeSettings {
        recipe,
        scope: pick(scope, cfg.trim_scope, TrimScope::Global),
        dare: dare_p.map(|p| (p, seed)),
    })
}

impl MergeSettings {
    fn record(&self, prov: &mut Provenance) {
        prov.param("method", self.recipe.method).param("alpha", self.recipe.alpha);
        if let Some(k) = self.recipe.k_percent {
            prov.param("k", k).param("scope", self.scope);
        }
        if let Some((p, seed)) = self.dare {
            prov.param("dare_p", p).param("seed", seed);
        }
    }
}

pub fn merge_cmd(ctx: &Ctx, a: &MergeArgs) -> CliResult<()> {
    if a.inputs.is_empty() {
        return Err(CliError::Usage("merge needs at least one task vector".into()));
    }
    let s = merge_settings(ctx, a.method, a.k, a.alpha, a.scope, a.dare_p, a.seed)?;
    let out = ctx.output(&a.output)?;
    let mut prov = ctx.provenance();
    s.record(&mut prov);
    let mut taus = Vec::with_capacity(a.inputs.len());
    for (i, path) in a.inputs.iter().enumerate() {
        let mut t = load_task_vector(path, &mut prov)?;
        if s.recipe.method == MergeMethod::Ties && !t.prep.is_trimmed() {
            t = topk_trim(&t, s.recipe.k_percent.unwrap_or(100.0), s.scope)?;
        }
        if let Some((p, seed)) = s.dare {
            t = dare(&t, p, &mut PrngStream::new(seed).fork(i as u64 + 1))?;
        }
        taus.push(t);
    }
    let mut recipe = s.recipe.clone();
    if let Some((p, seed)) = s.dare {
        recipe.notes = format!("dare p={p} seed={seed}");
    }
    let merged = merge(&taus, &recipe)?;
    let nonzero = merged.tau.nonzero_count();
    save_checkpoint(merged.to_checkpoint(), &out, &prov)?;
    ctx.emit(
        format!(
            "wrote {} ({} of {} inputs, {nonzero} nonzero)",
            out.display(),
            merged.recipe.method,
            taus.len()
        ),
        json!({
            "output": out,
            "method": merged.recipe.method.to_string(),
            "k_percent": merged.recipe.k_percent,
            "alpha": merged.recipe.alpha,
            "inputs": merged.recipe.inputs,
            "nonzero": nonzero,
        }),
    );
    Ok(())
}

pub fn mask_cmd(ctx: &Ctx, a: &MaskArgs) -> CliResult<()> {
    let lambda = Lambdas::parse(&a.lambda, ctx.config.lambda.as_ref())?.for_modality(&a.modality);
    let variant: MaskVariant = pick(a.variant, ctx.config.variant, MaskVariant::Full);
    let out = ctx.output(&a.output)?;
    let mut prov = ctx.provenance();
    prov.param("modality", &a.modality).param("lambda", lambda).param("variant", variant);
    let tau = load_task_vector(&a.tau, &mut prov)?;
    let merged = load_task_vector(&a.merged, &mut prov)?;
    let mask = build_mask_ablation(&tau, &merged, &a.modality, lambda, variant)?;
    let density = mask.density();
    save_mask(mask, &out, &prov)?;
    ctx.emit(
        format!("wrote {} (lambda={lambda}, density {density:.6})", out.display()),
        json!({"output": out, "modality": a.modality, "lambda": lambda, "density": density}),
    );
    Ok(())
}

pub fn avgmask_cmd(ctx: &Ctx, a: &AvgmaskArgs) -> CliResult<()> {
    if a.masks.is_empty() {
        return Err(CliError::Usage("avgmask needs at least one mask".into()));
    }
    let out = ctx.output(&a.output)?;
    let mut prov = ctx.provenance();
    let mut masks = Vec::new();
    for path in &a.masks {
        let (m, bytes) = load_mask(path)?;
        prov.input(path, &bytes);
        masks.push(m);
    }
    let refs: Vec<&ModalityMask> = masks.iter().collect();
    let avg = average_masks(&refs)?;
    save_checkpoint(avg.into_checkpoint(), &out, &prov)?;
    ctx.emit(
        format!("wrote {} (average of {} masks)", out.display(), masks.len()),
        json!({"output": out, "masks": masks.len()}),
    );
    Ok(())
}

pub fn bundle_cmd(ctx: &Ctx, a: &BundleArgs) -> CliResult<()> {
    let base_path = ctx.base(&a.base)?;
    let model_args = if a.models.is_empty() { &ctx.config.models } else { &a.models };
    if model_args.is_empty() {
        return Err(CliError::Usage("bundle needs at least one fine-tuned model".into()));
    }
    let models: Vec<(String, PathBuf)> = model_args.iter().map(|m| parse_model_arg(m)).collect::<CliResult<_>>()?;
    let s = merge_settings(ctx, a.method, a.k, a.alpha, a.scope, a.dare_p, a.seed)?;
    let lambdas = Lambdas::parse(&a.lambda, ctx.config.lambda.as_ref())?;
    let variant: MaskVariant = pick(a.variant, ctx.config.variant, MaskVariant::Full);
    let out = ctx.output(&a.output)?;

    let mut prov = ctx.provenance();
    s.record(&mut prov);
    prov.param("variant", variant);
    let (base, bytes) = load_checkpoint(&base_path)?;
    prov.input(&base_path, &bytes);
    let mut loaded = Vec::new();
    for (label, path) in &models {
        let (ckpt, bytes) = load_checkpoint(path)?;
        prov.input(path, &bytes).param(&format!("lambda.{label}"), lambdas.for_modality(label));
        loaded.push((label.clone(), ckpt));
    }
    let opts = BundleOptions {
        recipe: s.recipe,
        trim_scope: s.scope,
        dare: s.dare,
        lambdas: models.iter().map(|(l, _)| (l.clone(), lambdas.for_modality(l))).collect(),
        variant,
        unmasked: Vec::new(),
        mask_reference: if a.raw_reference {
            MaskReference::Raw
        } else {
            MaskReference::Preprocessed
        },
    };
    let mut bundle = MergedBundle::build(&base, &loaded, &opts)?;
    prov.stamp(bundle.tau_star.deltas.meta_mut());
    for mask in bundle.masks.values_mut() {
        prov.stamp(&mut mask.meta);
    }
    bundle.save(&out).map_err(|e| with_path(&out, e))?;
    prov.log(&out)?;
    let densities: BTreeMap<&String, f64> = bundle.masks.iter().map(|(k, m)| (k, m.density())).collect();
    let text = densities
        .iter()
        .map(|(k, d)| format!("{k} {d:.6}"))
        .collect::<Vec<_>>()
        .join(", ");
    ctx.emit(
        format!("wrote bundle {} (mask densities: {text})", out.display()),
        json!({"output": out, "densities": densities}),
    );
    Ok(())
}

fn merged_parts(path: &Path, prov: &mut Provenance) -> CliResult<(TaskVector, MergeRecipe)> {
    let (ckpt, bytes) = load_checkpoint(path)?;
    prov.input(path, &bytes);
    match MergedTaskVector::from_checkpoint(ckpt.clone()) {
        Ok(m) => Ok((m.tau, m.recipe)),
        Err(_) => Ok((TaskVector::from_checkpoint(ckpt)?, MergeRecipe::ta(1.0))),
    }
}

fn bundle_from_parts(
    ctx: &Ctx,
    base: &Option<PathBuf>,
    merged: &Option<PathBuf>,
    masks: &[PathBuf],
    prov: &mut Provenance,
) -> CliResult<MergedBundle> {
    let base_path = ctx.base(base)?;
    let merged_path = merged.clone().ok_or_else(|| CliError::Usage("missing --merged".into()))?;
    if masks.is_empty() {
        return Err(CliError::Usage("missing --mask".into()));
    }
    let (base, bytes) = load_checkpoint(&base_path)?;
    prov.input(&base_path, &bytes);
    let (tau, recipe) = merged_parts(&merged_path, prov)?;
    let mut map = BTreeMap::new();
    for path in masks {
        let (m, bytes) = load_mask(path)?;
        prov.input(path, &bytes);
        map.insert(m.modality.clone(), m);
    }
    Ok(MergedBundle::new(base, tau, map, recipe)?)
}

fn load_bundle(dir: &Path, prov: &mut Provenance) -> CliResult<MergedBundle> {
    for name in ["bundle.json", "base.mtc", "merged.mtc"] {
        let p = dir.join(name);
        prov.input(&p, &read_bytes(&p)?);
    }
    let bundle = MergedBundle::load(dir).map_err(|e| with_path(dir, e))?;
    for label in bundle.masks.keys() {
        let p = dir.join("masks").join(format!("{label}.mmk"));
        prov.input(&p, &read_bytes(&p)?);
    }
    Ok(bundle)
}

pub fn reconstruct_cmd(ctx: &Ctx, a: &ReconstructArgs) -> CliResult<()> {
    let out = ctx.output(&a.output)?;
    let mut prov = ctx.provenance();
    let (bundle, modality) = match &a.bundle {
        Some(dir) => {
            let m = a
                .modality
                .clone()
                .ok_or_else(|| CliError::Usage("--bundle needs --modality".into()))?;
            (load_bundle(dir, &mut prov)?, m)
        }
        None => {
            let masks: Vec<PathBuf> = a.mask.iter().cloned().collect();
            let b = bundle_from_parts(ctx, &a.base, &a.merged, &masks, &mut prov)?;
            let m = b.masks.keys().next().cloned().expect("one mask");
            (b, m)
        }
    };
    prov.param("modality", &modality);
    let ckpt = bundle.reconstruct(&modality)?;
    save_checkpoint(ckpt, &out, &prov)?;
    ctx.emit(
        format!("wrote {} (modality {modality})", out.display()),
        json!({"output": out, "modality": modality}),
    );
    Ok(())
}

pub fn infer_cmd(ctx: &Ctx, a: &InferArgs) -> CliResult<()> {
    let mut prov = ctx.provenance();
    let cfg_bytes = read_bytes(&a.model)?;
    prov.input(&a.model, &cfg_bytes);
    let mut model: ToyModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| CliError::Usage(format!("model config {}: {e}", a.model.display())))?;
    model.attention = pick(a.attention, ctx.config.attention, model.attention);
    model.validate()?;
    let options = DecoupleOptions {
        text_mask: pick(a.text_mask, ctx.config.text_mask, Default::default()),
        head: pick(a.head, ctx.config.head, Default::default()),
    };
    let seq_bytes = read_bytes(&a.input)?;
    prov.input(&a.input, &seq_bytes);
    let text = String::from_utf8(seq_bytes).map_err(|_| CliError::Io(format!("{} is not UTF-8", a.input.display())))?;
    let seq = SegmentedSequence::from_json(&text)?;
    let bundle = match &a.bundle {
        Some(dir) => load_bundle(dir, &mut prov)?,
        None => bundle_from_parts(ctx, &a.base, &a.merged, &a.mask, &mut prov)?,
    };
    prov.param("attention", serde_json::to_value(model.attention).expect("enum").as_str().unwrap_or_default())
        .param("text_mask", serde_json::to_value(options.text_mask).expect("enum").as_str().unwrap_or_default())
        .param("head", serde_json::to_value(options.head).expect("enum").as_str().unwrap_or_default());
    let logits = decoupled_forward(&bundle, &model, &seq, &options)?;
    let segments: Vec<Value> = seq
        .segments()
        .iter()
        .map(|s| json!({"modality": s.label.to_string(), "rows": s.tokens.rows()}))
        .collect();
    let doc = json!({"logits": logits, "segments": segments, "provenance": prov.line()});
    match &a.output {
        Some(out) => {
            let mut bytes = serde_json::to_vec_pretty(&doc).expect("json value");
            bytes.push(b'\n');
            write_file(out, &bytes)?;
            prov.log(out)?;
            ctx.emit(
                format!("wrote {} ({} x {} logits)", out.display(), logits.rows(), logits.cols()),
                json!({"output": out, "rows": logits.rows(), "cols": logits.cols()}),
            );
        }
        None => println!("{}", serde_json::to_string_pretty(&doc).expect("json value")),
    }
    Ok(())
}

pub fn stats_cmd(ctx: &Ctx, cmd: &StatsCommand) -> CliResult<()> {
    match cmd {
        StatsCommand::Density { masks } => {
            if masks.is_empty() {
                return Err(CliError::Usage("density needs at least one mask".into()));
            }
            let mut lines = Vec::new();
            let mut rows = Vec::new();
            for path in masks {
                let (m, _) = load_mask(path)?;
                lines.push(format!(
                    "{}\t{}\tlambda={}\t{}/{}\t{:.6}",
                    path.display(),
                    m.modality,
                    m.lambda,
                    m.popcount(),
                    m.numel(),
                    m.density()
                ));
                rows.push(json!({
                    "file": path, "modality": m.modality, "lambda": m.lambda,
                    "popcount": m.popcount(), "numel": m.numel(), "density": m.density(),
                }));
            }
            ctx.emit(lines.join("\n"), Value::Array(rows));
        }
        StatsCommand::Overlap { masks } => {
            if masks.len() < 2 {
                return Err(CliError::Usage("overlap needs at least two masks".into()));
            }
            let loaded: Vec<ModalityMask> = masks.iter().map(|p| load_mask(p).map(|m| m.0)).collect::<CliResult<_>>()?;
            let refs: Vec<&ModalityMask> = loaded.iter().collect();
            let o = overlap_matrix(&refs)?;
            let n = o.modalities.len();
            let mut lines = vec![format!("modality\tpopcount\texclusive\t{}", o.modalities.join("\t"))];
            for i in 0..n {
                let cells: Vec<String> = (0..n).map(|j| format!("{:.6}", o.pairwise_fraction(i, j))).collect();
                lines.push(format!(
                    "{}\t{}\t{:.6}\t{}",
                    o.modalities[i],
                    o.popcounts[i],
                    o.exclusive_fraction(i),
                    cells.join("\t")
                ));
            }
            ctx.emit(
                lines.join("\n"),
                json!({
                    "modalities": o.modalities, "popcounts": o.popcounts,
                    "pairwise": o.pairwise, "exclusive": o.exclusive,
                }),
            );
        }
        StatsCommand::Alignment { tau, merged, all } => {
            let mut prov = ctx.provenance();
            let t = load_task_vector(tau, &mut prov)?;
            let m = load_task_vector(merged, &mut prov)?;
            let den = if *all {
                AlignmentDenominator::All
            } else {
                AlignmentDenominator::Nonzero
            };
            let s = alignment_stats(&t, &m, den)?;
            ctx.emit(
                format!("alignment {:.6}\navg_magnitude {:.6e}", s.alignment, s.avg_magnitude),
                json!({"alignment": s.alignment, "avg_magnitude": s.avg_magnitude}),
            );
        }
        StatsCommand::Inclusion { tau, merged, nonzero_only } => {
            let mut prov = ctx.provenance();
            let t = load_task_vector(tau, &mut prov)?;
            let m = load_task_vector(merged, &mut prov)?;
            let rule = if *nonzero_only {
                InclusionRule::NonzeroOnly
            } else {
                InclusionRule::SignMatch
            };
            let f = merged_inclusion(&t, &m, rule)?;
            ctx.emit(format!("inclusion {f:.6}"), json!({"inclusion": f}));
        }
        StatsCommand::Storage {
            method,
            n,
            p,
            p_prime,
            p_star,
        } => {
            let m = match method {
                StorageKind::Originals => StorageMethod::Originals,
                StorageKind::Naivemc => StorageMethod::Naivemc,
                StorageKind::Damc => StorageMethod::Damc,
                StorageKind::Mmer => StorageMethod::Mmer,
            };
            let l = storage_bits(m, *n, *p, *p_prime, *p_star)?;
            ctx.emit(
                format!("{} bits", l.bits),
                json!({"method": m.to_string(), "n": n, "p": p, "p_prime": p_prime, "p_star": p_star, "bits": l.bits}),
            );
        }
        StatsCommand::Retention(r) => {
            if !r.scores.is_empty() || !r.original_scores.is_empty() {
                if !r.models.task.is_empty() {
                    return Err(CliError::Usage("give either scores or task/model files, not both".into()));
                }
                let report = performance_retention(&r.scores, &r.original_scores)?;
                emit_retention(ctx, &report);
            } else {
                retention_cmd(ctx, &r.models)?;
            }
        }
    }
    Ok(())
}

fn emit_retention(ctx: &Ctx, report: &RetentionReport) {
    let mut lines: Vec<String> = report
        .tasks
        .iter()
        .map(|t| format!("{}\t{:.6}\t{:.6}\t{:.6}", t.label, t.method_score, t.original_score, t.ratio))
        .collect();
    lines.push(format!("retention {:.6}", report.mean_ratio));
    let tasks: Vec<Value> = report
        .tasks
        .iter()
        .map(|t| json!({"task": t.label, "method_score": t.method_score, "original_score": t.original_score, "ratio": t.ratio}))
        .collect();
    ctx.emit(lines.join("\n"), json!({"tasks": tasks, "retention": report.mean_ratio}));
}

fn mlp_shape(ckpt: &Checkpoint) -> CliResult<MlpShape> {
    let w1 = ckpt.tensor(L1_WEIGHT)?.shape();
    let w2 = ckpt.tensor(L2_WEIGHT)?.shape();
    match (w1, w2) {
        ([input, hidden], [h2, output]) if hidden == h2 => Ok(MlpShape {
            input: *input,
            hidden: *hidden,
            output: *output,
        }),
        _ => Err(CliError::Usage(format!("checkpoint does not hold a two-layer MLP ({w1:?}, {w2:?})"))),
    }
}

pub fn retention_cmd(ctx: &Ctx, a: &RetentionModelArgs) -> CliResult<()> {
    let n = a.task.len();
    if n == 0 || a.original.len() != n || a.candidate.len() != n {
        return Err(CliError::Usage(format!(
            "retention needs matching --task/--original/--candidate lists, got {}/{}/{}",
            n,
            a.original.len(),
            a.candidate.len()
        )));
    }
    let mut labels = Vec::new();
    let mut method_scores = Vec::new();
    let mut original_scores = Vec::new();
    for i in 0..n {
        let text = read_bytes(&a.task[i])?;
        let task: SyntheticTask = serde_json::from_slice(&text)
            .map_err(|e| CliError::Usage(format!("task {}: {e}", a.task[i].display())))?;
        task.validate()?;
        let (orig, _) = load_checkpoint(&a.original[i])?;
        let (cand, _) = load_checkpoint(&a.candidate[i])?;
        let shape = mlp_shape(&orig)?;
        original_scores.push(task_score(&orig, shape, &task)?);
        method_scores.push(task_score(&cand, shape, &task)?);
        labels.push(task.name.clone());
    }
    let report = performance_retention_labeled(&labels, &method_scores, &original_scores)?;
    emit_retention(ctx, &report);
    Ok(())
}

pub fn experiment_cmd(ctx: &Ctx, a: &ExperimentArgs) -> CliResult<()> {
    let text = read_bytes(&a.spec)?;
    let text = String::from_utf8(text).map_err(|_| CliError::Usage(format!("{} is not UTF-8", a.spec.display())))?;
    let spec = ExperimentSpec::from_json(&text)?;
    let axes: Vec<SweepAxis> = if a.no_sweep {
        Vec::new()
    } else if a.sweep.is_empty() {
        vec![SweepAxis::K, SweepAxis::Lambda, SweepAxis::NModels]
    } else {
        a.sweep
            .iter()
            .map(|x| match x {
                Axis::K => SweepAxis::K,
                Axis::Lambda => SweepAxis::Lambda,
                Axis::NModels => SweepAxis::NModels,
            })
            .collect()
    };
    let dir = &a.output;
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut prov = ctx.provenance();
    prov.input(&a.spec, text.as_bytes());
    let mut files = Vec::new();

    let retention = run_retention_experiment(&spec)?;
    write_file(&dir.join("retention.csv"), retention.to_csv().as_bytes())?;
    files.push("retention.csv".to_string());
    let mut summary = serde_json::Map::new();
    let mut lines = Vec::new();
    for &m in &spec.methods {
        let mean = retention
            .runs
            .iter()
            .filter_map(|r| r.result(m))
            .map(|r| r.report.mean_ratio)
            .sum::<f64>()
            / retention.runs.len() as f64;
        lines.push(format!("retention {m}: {mean:.6}"));
        summary.insert(format!("retention.{m}"), json!(mean));
    }

    if !a.no_forgetting {
        let f = run_forgetting_experiment(&spec)?;
        write_file(&dir.join("forgetting.csv"), f.to_csv().as_bytes())?;
        files.push("forgetting.csv".into());
        lines.push(format!("forgetting: passed on {}/{} seeds", f.passed_seeds(), f.runs.len()));
        summary.insert("forgetting.passed_seeds".into(), json!(f.passed_seeds()));
    }
    for axis in axes {
        let sweep = run_sweep(&spec, axis, None)?;
        let name = format!("sweep_{}.csv", axis.name());
        write_file(&dir.join(&name), sweep.to_csv().as_bytes())?;
        files.push(name);
    }
    if !a.no_artifacts {
        write_artifacts(&spec, dir).map_err(|e| with_path(dir, e))?;
    }
    let manifest = json!({"provenance": prov.line(), "files": files});
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("json value");
    bytes.push(b'\n');
    write_file(&dir.join("manifest.json"), &bytes)?;
    prov.log(dir)?;
    summary.insert("output".into(), json!(dir));
    summary.insert("files".into(), json!(files));
    lines.push(format!("wrote {}", dir.display()));
    ctx.emit(lines.join("\n"), Value::Object(summary));
    Ok(())
}

pub fn validate_cmd(ctx: &Ctx, a: &ValidateArgs) -> CliResult<()> {
    let mut first_error: Option<CliError> = None;
    let mut rows = Vec::new();
    for path in &a.files {
        let result = validate_one(path);
        match &result {
            Ok(desc) => {
                if !ctx.json {
                    println!("ok\t{}\t{desc}", path.display());
                }
                rows.push(json!({"file": path, "ok": true, "detail": desc}));
            }
            Err(e) => {
                if !ctx.json {
                    println!("error\t{}\t{e}", path.display());
                }
                rows.push(json!({"file": path, "ok": false, "detail": e.to_string()}));
            }
        }
        if let Err(e) = result {
            first_error.get_or_insert(e);
        }
    }
    if ctx.json {
        println!("{}", serde_json::to_string_pretty(&rows).expect("json value"));
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn validate_one(path: &Path) -> CliResult<String> {
    let bytes = read_bytes(path)?;
    match decode_container(&bytes) {
        Ok(c) => {
            let role = c.meta().get("role").map(String::as_str).unwrap_or("checkpoint");
            return Ok(format!("container, {role}, {} tensors, {} elements", c.len(), c.numel()));
        }
        Err(mmer_core::Error::BadMagic { .. }) => {}
        Err(e) => return Err(with_path(path, e)),
    }
    match unpack_mask(&bytes) {
        Ok(m) => Ok(format!(
            "mask, modality {}, lambda {}, {} bits, density {:.6}",
            m.modality,
            m.lambda,
            m.numel(),
            m.density()
        )),
        Err(mmer_core::Error::BadMagic { found, .. }) => Err(CliError::Io(format!(
            "{}: bad magic: expected \"MTC1\" or \"MMK1\", found {found:?}",
            path.display()
        ))),
        Err(e) => Err(with_path(path, e)),
    }
}
