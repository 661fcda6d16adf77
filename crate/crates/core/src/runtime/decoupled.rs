//! Forward pass where every input segment runs on its own parameters.
//!
//! Modality segments use `theta_pre + m_i * tau_star`; text segments use
//! `theta_pre + mean(m) * tau_star`. Within attention, queries, keys and
//! values are projected per segment, concatenated in input order, attended
//! jointly over the whole sequence, split back and passed through each
//! segment's own output projection. Normalization gains, feed-forward
//! weights and the output head follow the same per-segment rule.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{MaskRef, MergedBundle, TextMaskPolicy, TEXT_LABEL};
use super::linalg::{gelu, rms_norm, Matrix};
use super::model::{add_positions, AttentionMode, Positional, ToyModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Checkpoint;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SegmentLabel {
    Text,
    Modality(String),
}

impl SegmentLabel {
    pub fn parse(s: &str) -> Self {
        if s == TEXT_LABEL {
            SegmentLabel::Text
        } else {
            SegmentLabel::Modality(s.to_string())
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            SegmentLabel::Text => TEXT_LABEL,
            SegmentLabel::Modality(m) => m,
        }
    }
}

impl fmt::Display for SegmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub label: SegmentLabel,
    pub tokens: Matrix,
}

/// Concatenated per-modality token blocks, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedSequence {
    segments: Vec<Segment>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    modality: String,
    tokens: Matrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSequence {
    segments: Vec<RawSegment>,
}

impl SegmentedSequence {
    /// Segments must be non-empty and share one width.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invalid("sequence has no segments"));
        }
        let width = segments[0].tokens.cols();
        for (i, s) in segments.iter().enumerate() {
            if s.tokens.rows() == 0 {
                return Err(Error::invalid(format!("segment {i} ({}) is empty", s.label)));
            }
            if s.tokens.cols() != width || width == 0 {
                return Err(Error::invalid(format!(
                    "segment {i} has width {}, expected {width}",
                    s.tokens.cols()
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.tokens.rows()).sum()
    }

    pub fn width(&self) -> usize {
        self.segments[0].tokens.cols()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.tokens.rows()).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawSequence =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("sequence file: {e}")))?;
        Self::new(
            raw.segments
                .into_iter()
                .map(|s| Segment {
                    label: SegmentLabel::parse(&s.modality),
                    tokens: s.tokens,
                })
                .collect(),
        )
    }

    pub fn to_json(&self) -> String {
        let raw = RawSequence {
            segments: self
                .segments
                .iter()
                .map(|s| RawSegment {
                    modality: s.label.to_string(),
                    tokens: s.tokens.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("sequence serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Rows of all segments stacked in input order.
    pub fn concat(&self) -> Matrix {
        Matrix::vstack(&self.segments.iter().map(|s| &s.tokens).collect::<Vec<_>>())
    }

    /// Splits `m` back into this sequence's segment lengths and labels.
    pub fn split_like(&self, m: &Matrix) -> SegmentedSequence {
        let mut start = 0;
        let segments = self
            .segments
            .iter()
            .map(|s| {
                let len = s.tokens.rows();
                let part = m.slice_rows(start, len);
                start += len;
                Segment {
                    label: s.label.clone(),
                    tokens: part,
                }
            })
            .collect();
        SegmentedSequence { segments }
    }

    fn map_segments(
        &self,
        mut f: impl FnMut(&SegmentLabel, &Matrix) -> Result<Matrix>,
    ) -> Result<SegmentedSequence> {
        let segments = self
            .segments
            .iter()
            .map(|s| {
                Ok(Segment {
                    label: s.label.clone(),
                    tokens: f(&s.label, &s.tokens)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SegmentedSequence { segments })
    }
}

/// Which parameters produce the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadPolicy {
    /// Each segment's rows use that segment's own head.
    #[default]
    PerSegment,
    /// All rows use the text-masked head.
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecoupleOptions {
    pub text_mask: TextMaskPolicy,
    pub head: HeadPolicy,
}

/// Effective parameter set per segment label.
pub type SegmentParams = BTreeMap<SegmentLabel, Checkpoint>;

/// Materializes the parameters for every label in `seq` (and for text when
/// the head policy needs it).
pub fn segment_params(
    bundle: &MergedBundle,
    seq: &SegmentedSequence,
    options: &DecoupleOptions,
) -> Result<SegmentParams> {
    let mut labels: Vec<SegmentLabel> = seq.segments.iter().map(|s| s.label.clone()).collect();
    if options.head == HeadPolicy::Text {
        labels.push(SegmentLabel::Text);
    }
    labels.sort();
    labels.dedup();
    let present: Vec<&str> = labels
        .iter()
        .filter_map(|l| match l {
            SegmentLabel::Modality(m) => Some(m.as_str()),
            SegmentLabel::Text => None,
        })
        .collect();
    let mut out = SegmentParams::new();
    for label in &labels {
        let params = match label {
            SegmentLabel::Modality(m) => bundle.reconstruct(m)?,
            SegmentLabel::Text => {
                let avg = bundle.text_mask(options.text_mask, &present)?;
                bundle.blend(|name| Ok(MaskRef::Fraction(avg.tensor(name)?.data())))?
            }
        };
        out.insert(label.clone(), params);
    }
    Ok(out)
}

fn params_for<'a>(params: &'a SegmentParams, label: &SegmentLabel) -> Result<&'a Checkpoint> {
    params
        .get(label)
        .ok_or_else(|| Error::UnknownModality(label.to_string()))
}

/// Softmax attention of already-projected `q`, `k`, `v` over one sequence.
fn attend(config: &ToyModelConfig, q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    let n = q.rows();
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(n, config.d_model);
    let mut weights = vec![0f64; n];
    for h in 0..config.n_heads {
        let off = h * dh;
        for i in 0..n {
            let visible = match config.attention {
                AttentionMode::Causal => i + 1,
                AttentionMode::Bidirectional => n,
            };
            let qi = &q.row(i)[off..off + dh];
            let mut max = f64::NEG_INFINITY;
            for (j, w) in weights.iter_mut().enumerate().take(visible) {
                let kj = &k.row(j)[off..off + dh];
                *w = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*w);
            }
            let mut z = 0.0;
            for w in weights.iter_mut().take(visible) {
                *w = (*w - max).exp();
                z += *w;
            }
            let o = &mut out.row_mut(i)[off..off + dh];
            for (j, w) in weights.iter().enumerate().take(visible) {
                let vj = &v.row(j)[off..off + dh];
                for (ov, vv) in o.iter_mut().zip(vj) {
                    *ov += w / z * vv;
                }
            }
        }
    }
    out
}

/// One decoupled attention block (projections, joint attention, split,
/// per-segment output projection) for layer `layer`.
pub fn decoupled_attention(
    config: &ToyModelConfig,
    layer: usize,
    params: &SegmentParams,
    seq: &SegmentedSequence,
) -> Result<SegmentedSequence> {
    if seq.width() != config.d_model {
        return Err(Error::invalid(format!(
            "tokens have width {}, model expects {}",
            seq.width(),
            config.d_model
        )));
    }
    let name = |w: &str| format!("layers.{layer}.attn.{w}");
    let project = |w: &str| -> Result<Matrix> {
        let parts = seq
            .segments
            .iter()
            .map(|s| s.tokens.matmul(params_for(params, &s.label)?.tensor(&name(w))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Matrix::vstack(&parts.iter().collect::<Vec<_>>()))
    };
    let (q, k, v) = (project("wq")?, project("wk")?, project("wv")?);
    let joint = attend(config, &q, &k, &v);
    seq.split_like(&joint)
        .map_segments(|label, x| x.matmul(params_for(params, label)?.tensor(&name("wo"))?))
}

/// Runs the full model over `seq` with per-segment parameters and returns
/// logits, one row per input token in input order.
pub fn decoupled_forward(
    bundle: &MergedBundle,
    config: &ToyModelConfig,
    seq: &SegmentedSequence,
    options: &DecoupleOptions,
) -> Result<Matrix> {
    config.validate()?;
    config.check_params(&bundle.base)?;
    for s in &seq.segments {
        if let SegmentLabel::Modality(m) = &s.label {
            bundle.mask(m)?;
        }
    }
    let params = segment_params(bundle, seq, options)?;
    decoupled_forward_with(&params, config, seq, options)
}

/// As [`decoupled_forward`], reusing materialized parameters.
pub fn decoupled_forward_with(
    params: &SegmentParams,
    config: &ToyModelConfig,
    seq: &SegmentedSequence,
    options: &DecoupleOptions,
) -> Result<Matrix> {
    if seq.width() != config.d_model {
        return Err(Error::invalid(format!(
            "tokens have width {}, model expects {}",
            seq.width(),
            config.d_model
        )));
    }
    let mut x = seq.clone();
    if config.positional == Positional::Sinusoidal {
        let mut all = x.concat();
        add_positions(&mut all);
        x = x.split_like(&all);
    }
    for l in 0..config.n_layers {
        let t = |label: &SegmentLabel, s: &str| -> Result<_> {
            params_for(params, label)?.tensor(&format!("layers.{l}.{s}"))
        };
        let h = x.map_segments(|label, m| Ok(rms_norm(m, t(label, "attn_norm.gain")?)))?;
        let a = decoupled_attention(config, l, params, &h)?;
        x = x.map_segments_zip(&a, |m, am| {
            let mut out = m.clone();
            out.add_assign(am);
            out
        });
        x = x.map_segments(|label, m| {
            let h = rms_norm(m, t(label, "ffn_norm.gain")?);
            let mut f = h.matmul(t(label, "ffn.w1")?)?;
            f.add_row_bias(t(label, "ffn.b1")?);
            f.map_in_place(gelu);
            let mut f = f.matmul(t(label, "ffn.w2")?)?;
            f.add_row_bias(t(label, "ffn.b2")?);
            let mut out = m.clone();
            out.add_assign(&f);
            Ok(out)
        })?;
    }
    let logits = x.map_segments(|label, m| {
        let norm = rms_norm(m, params_for(params, label)?.tensor("final_norm.gain")?);
        let head_label = match options.head {
            HeadPolicy::PerSegment => label,
            HeadPolicy::Text => &SegmentLabel::Text,
        };
        norm.matmul(params_for(params, head_label)?.tensor("head.weight")?)
    })?;
    Ok(logits.concat())
}

impl SegmentedSequence {
    fn map_segments_zip(&self, other: &SegmentedSequence, f: impl Fn(&Matrix, &Matrix) -> Matrix) -> SegmentedSequence {
        SegmentedSequence {
            segments: self
                .segments
                .iter()
                .zip(&other.segments)
                .map(|(a, b)| Segment {
                    label: a.label.clone(),
                    tokens: f(&a.tokens, &b.tokens),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{BitTensor, ModalityMask};
    use crate::merging::MergeRecipe;
    use crate::prng::PrngStream;
    use crate::runtime::model::forward;
    use crate::taskvector::TaskVector;
    use crate::tensor::Tensor;

    fn config(attention: AttentionMode) -> ToyModelConfig {
        ToyModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            vocab_size: 6,
            attention,
            positional: Positional::None,
        }
    }

    fn random_bundle(c: &ToyModelConfig, seed: u64, modalities: &[&str], zero_tau: bool) -> MergedBundle {
        let base = c.init_params(seed).unwrap();
        let mut rng = PrngStream::new(seed + 100);
        let mut tau = Checkpoint::new();
        for (name, t) in base.iter() {
            let data = (0..t.numel())
                .map(|_| if zero_tau { 0.0 } else { (0.3 * rng.normal()) as f32 })
                .collect();
            tau.insert(name.clone(), Tensor::new(t.shape().to_vec(), data).unwrap());
        }
        let mut masks = BTreeMap::new();
        for m in modalities {
            let tensors = base
                .iter()
                .map(|(n, t)| (n.clone(), BitTensor::from_bits(t.shape(), (0..t.numel()).map(|_| rng.next_f64() < 0.4))))
                .collect();
            masks.insert(m.to_string(), ModalityMask::new(*m, 1.0, tensors));
        }
        MergedBundle::new(base, TaskVector::new(tau, "b", "m"), masks, MergeRecipe::ties(80.0, 1.0)).unwrap()
    }

    fn tokens(rng: &mut PrngStream, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn seq(parts: Vec<(&str, Matrix)>) -> SegmentedSequence {
        SegmentedSequence::new(
            parts
                .into_iter()
                .map(|(l, t)| Segment {
                    label: SegmentLabel::parse(l),
                    tokens: t,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_segment_matches_reconstructed_model() {
        let c = config(AttentionMode::Causal);
        let b = random_bundle(&c, 1, &["audio", "video"], false);
        let mut rng = PrngStream::new(9);
        let t = tokens(&mut rng, 5, 8);
        let out = decoupled_forward(&b, &c, &seq(vec![("video", t.clone())]), &DecoupleOptions::default()).unwrap();
        let plain = forward(&b.reconstruct("video").unwrap(), &c, &t).unwrap();
        assert!(out.max_abs_diff(&plain) <= 1e-9);
    }

    #[test]
    fn zero_tau_matches_base() {
        let c = config(AttentionMode::Bidirectional);
        let b = random_bundle(&c, 2, &["audio", "video"], true);
        let mut rng = PrngStream::new(3);
        let s = seq(vec![("audio", tokens(&mut rng, 2, 8)), ("text", tokens(&mut rng, 3, 8)), ("video", tokens(&mut rng, 2, 8))]);
        let out = decoupled_forward(&b, &c, &s, &DecoupleOptions::default()).unwrap();
        let plain = forward(&b.base, &c, &s.concat()).unwrap();
        assert!(out.max_abs_diff(&plain) <= 1e-9);
    }

    #[test]
    fn all_ones_masks_match_full_merge() {
        let c = config(AttentionMode::Causal);
        let mut b = random_bundle(&c, 4, &["audio", "video"], false);
        for m in b.masks.values_mut() {
            *m = ModalityMask::ones_like(m.modality.clone(), &b.base);
        }
        let mut rng = PrngStream::new(5);
        let s = seq(vec![("audio", tokens(&mut rng, 3, 8)), ("video", tokens(&mut rng, 4, 8))]);
        let out = decoupled_forward(&b, &c, &s, &DecoupleOptions::default()).unwrap();
        let full = crate::merging::apply_to_base(&b.base, &b.tau_star, 1.0).unwrap();
        let plain = forward(&full, &c, &s.concat()).unwrap();
        assert!(out.max_abs_diff(&plain) <= 1e-9);
    }

    #[test]
    fn attention_preserves_segmentation() {
        let c = config(AttentionMode::Causal);
        let b = random_bundle(&c, 6, &["audio"], false);
        let mut rng = PrngStream::new(7);
        let s = seq(vec![("text", tokens(&mut rng, 2, 8)), ("audio", tokens(&mut rng, 3, 8)), ("text", tokens(&mut rng, 1, 8))]);
        let params = segment_params(&b, &s, &DecoupleOptions::default()).unwrap();
        let out = decoupled_attention(&c, 0, &params, &s).unwrap();
        assert_eq!(out.lengths(), s.lengths());
        let labels: Vec<_> = out.segments().iter().map(|x| x.label.clone()).collect();
        assert_eq!(labels, s.segments().iter().map(|x| x.label.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn bidirectional_permutation_symmetry() {
        let c = config(AttentionMode::Bidirectional);
        let b = random_bundle(&c, 8, &["audio", "video"], false);
        let mut rng = PrngStream::new(10);
        let a = tokens(&mut rng, 3, 8);
        let tx = tokens(&mut rng, 2, 8);
        let mut swapped = a.clone();
        let (r0, r2) = (a.row(0).to_vec(), a.row(2).to_vec());
        swapped.row_mut(0).copy_from_slice(&r2);
        swapped.row_mut(2).copy_from_slice(&r0);
        let opts = DecoupleOptions::default();
        let out = decoupled_forward(&b, &c, &seq(vec![("audio", a), ("text", tx.clone())]), &opts).unwrap();
        let out2 = decoupled_forward(&b, &c, &seq(vec![("audio", swapped), ("text", tx)]), &opts).unwrap();
        for (i, j) in [(0, 2), (1, 1), (2, 0), (3, 3), (4, 4)] {
            for (x, y) in out.row(i).iter().zip(out2.row(j)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn validation_errors() {
        let c = config(AttentionMode::Causal);
        let b = random_bundle(&c, 1, &["audio"], false);
        assert!(SegmentedSequence::new(vec![Segment { label: SegmentLabel::Text, tokens: Matrix::zeros(0, 8) }]).is_err());
        let mut rng = PrngStream::new(1);
        let s = seq(vec![("point", tokens(&mut rng, 2, 8))]);
        assert!(matches!(decoupled_forward(&b, &c, &s, &DecoupleOptions::default()), Err(Error::UnknownModality(_))));
        let s = seq(vec![("audio", tokens(&mut rng, 2, 7))]);
        assert!(decoupled_forward(&b, &c, &s, &DecoupleOptions::default()).is_err());
    }

    #[test]
    fn text_head_policy_uses_averaged_head() {
        let c = config(AttentionMode::Causal);
        let b = random_bundle(&c, 12, &["audio", "video"], false);
        let mut rng = PrngStream::new(2);
        let s = seq(vec![("audio", tokens(&mut rng, 2, 8))]);
        let per = decoupled_forward(&b, &c, &s, &DecoupleOptions::default()).unwrap();
        let text = decoupled_forward(&b, &c, &s, &DecoupleOptions { head: HeadPolicy::Text, ..Default::default() }).unwrap();
        assert!(per.max_abs_diff(&text) > 1e-6);
    }

    #[test]
    fn sequence_json_round_trip() {
        let text = r#"{"segments":[{"modality":"audio","tokens":[[1.0,2.0],[3.0,4.0]]},{"modality":"text","tokens":[[0.5,0.25]]}]}"#;
        let s = SegmentedSequence::from_json(text).unwrap();
        assert_eq!(s.lengths(), vec![2, 1]);
        assert_eq!(s.segments()[1].label, SegmentLabel::Text);
        assert_eq!(SegmentedSequence::from_json(&s.to_json()).unwrap(), s);
        assert!(SegmentedSequence::from_json(r#"{"segments":[{"modality":"a","tokens":[[1.0],[1.0,2.0]]}]}"#).is_err());
        assert!(SegmentedSequence::from_json(r#"{"segments":[{"modality":"a","tokens":[]}]}"#).is_err());
    }
}
