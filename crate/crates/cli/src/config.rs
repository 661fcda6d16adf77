//! Pipeline config file and the resolution of flags against it.
//!
//! Precedence, highest first: command-line flag, config file, built-in
//! default (K=80, alpha=1, lambda=1, DARE off).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use mmer_core::masking::MaskVariant;
use mmer_core::merging::MergeMethod;
use mmer_core::runtime::{AttentionMode, HeadPolicy, TextMaskPolicy};
use mmer_core::taskvector::TrimScope;

use crate::args;
use crate::error::{CliError, CliResult};

pub const DEFAULT_K: f64 = 80.0;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    All(f64),
    PerModality(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub base: Option<PathBuf>,
    #[serde(default)]
    pub models: Vec<String>,
    pub output: Option<PathBuf>,
    pub method: Option<MergeMethod>,
    pub k: Option<f64>,
    pub alpha: Option<f64>,
    pub lambda: Option<LambdaSpec>,
    pub dare_p: Option<f64>,
    pub seed: Option<u64>,
    pub trim_scope: Option<TrimScope>,
    pub variant: Option<MaskVariant>,
    pub attention: Option<AttentionMode>,
    pub text_mask: Option<TextMaskPolicy>,
    pub head: Option<HeadPolicy>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if let Some(k) = self.k {
            check_k(k)?;
        }
        if let Some(a) = self.alpha {
            check_alpha(a)?;
        }
        if let Some(p) = self.dare_p {
            check_dare_p(p)?;
        }
        match &self.lambda {
            Some(LambdaSpec::All(l)) => check_lambda(*l)?,
            Some(LambdaSpec::PerModality(m)) => m.values().try_for_each(|&l| check_lambda(l))?,
            None => {}
        }
        Ok(())
    }
}

pub fn check_k(k: f64) -> CliResult<()> {
    if k > 0.0 && k <= 100.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("k must be in (0, 100], got {k}")))
    }
}

pub fn check_alpha(a: f64) -> CliResult<()> {
    if a > 0.0 && a.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("alpha must be > 0, got {a}")))
    }
}

pub fn check_lambda(l: f64) -> CliResult<()> {
    if l > 0.0 && l.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("lambda must be > 0, got {l}")))
    }
}

pub fn check_dare_p(p: f64) -> CliResult<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("dare p must be in [0, 1), got {p}")))
    }
}

/// `--lambda` values: bare `VALUE` sets the default, `MODALITY=VALUE` one
/// modality.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lambdas {
    pub default: Option<f64>,
    pub per_modality: BTreeMap<String, f64>,
}

impl Lambdas {
    pub fn parse(flags: &[String], config: Option<&LambdaSpec>) -> CliResult<Self> {
        let mut out = Lambdas::default();
        match config {
            Some(LambdaSpec::All(l)) => out.default = Some(*l),
            Some(LambdaSpec::PerModality(m)) => out.per_modality = m.clone(),
            None => {}
        }
        for f in flags {
            let (key, value) = match f.split_once('=') {
                Some((k, v)) => (Some(k.trim()), v),
                None => (None, f.as_str()),
            };
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad --lambda value '{f}'")))?;
            check_lambda(v)?;
            match key {
                Some("") => return Err(CliError::Usage(format!("bad --lambda value '{f}'"))),
                Some(k) => {
                    out.per_modality.insert(k.to_string(), v);
                }
                None => out.default = Some(v),
            }
        }
        Ok(out)
    }

    pub fn for_modality(&self, modality: &str) -> f64 {
        self.per_modality
            .get(modality)
            .copied()
            .or(self.default)
            .unwrap_or(DEFAULT_LAMBDA)
    }
}

impl From<args::Method> for MergeMethod {
    fn from(m: args::Method) -> Self {
        match m {
            args::Method::Ties => MergeMethod::Ties,
            args::Method::Ta => MergeMethod::Ta,
        }
    }
}

impl From<args::Scope> for TrimScope {
    fn from(s: args::Scope) -> Self {
        match s {
            args::Scope::Global => TrimScope::Global,
            args::Scope::PerTensor => TrimScope::PerTensor,
        }
    }
}

impl From<args::Variant> for MaskVariant {
    fn from(v: args::Variant) -> Self {
        match v {
            args::Variant::Full => MaskVariant::Full,
            args::Variant::NoDirection => MaskVariant::NoDirection,
            args::Variant::NoDominance => MaskVariant::NoDominance,
        }
    }
}

impl From<args::Attention> for AttentionMode {
    fn from(a: args::Attention) -> Self {
        match a {
            args::Attention::Causal => AttentionMode::Causal,
            args::Attention::Bidirectional => AttentionMode::Bidirectional,
        }
    }
}

impl From<args::TextMask> for TextMaskPolicy {
    fn from(t: args::TextMask) -> Self {
        match t {
            args::TextMask::AllMasks => TextMaskPolicy::AllMasks,
            args::TextMask::PresentOnly => TextMaskPolicy::PresentOnly,
        }
    }
}

impl From<args::Head> for HeadPolicy {
    fn from(h: args::Head) -> Self {
        match h {
            args::Head::PerSegment => HeadPolicy::PerSegment,
            args::Head::Text => HeadPolicy::Text,
        }
    }
}

/// First of flag, config value, default.
pub fn pick<T, F: Into<T>>(flag: Option<F>, config: Option<T>, default: T) -> T {
    flag.map(Into::into).or(config).unwrap_or(default)
}
