use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::masking::{
    average_masks, build_mask_ablation, read_mask, write_mask, BitTensor, FractionalMask,
    MaskVariant, ModalityMask,
};
use crate::merging::{merge, MergeMethod, MergeRecipe, MergedTaskVector};
use crate::prng::PrngStream;
use crate::taskvector::{dare, extract, topk_trim, TaskVector, TrimScope};
use crate::tensor::{congruence_check, Checkpoint, Tensor};

/// Label reserved for text segments.
pub const TEXT_LABEL: &str = "text";

/// Mask values for one tensor: binary bits or fractional weights.
#[derive(Debug, Clone, Copy)]
pub enum MaskRef<'a> {
    Bits(&'a BitTensor),
    Fraction(&'a [f32]),
    /// Every element selected.
    Ones,
}

impl MaskRef<'_> {
    fn value(&self, i: usize) -> f64 {
        match self {
            MaskRef::Bits(b) => b.get(i) as u8 as f64,
            MaskRef::Fraction(f) => f[i] as f64,
            MaskRef::Ones => 1.0,
        }
    }

    fn len(&self) -> Option<usize> {
        match self {
            MaskRef::Bits(b) => Some(b.len()),
            MaskRef::Fraction(f) => Some(f.len()),
            MaskRef::Ones => None,
        }
    }
}

/// `mask * w_star + w_pre`, element-wise in f64 and rounded once.
pub fn masked_weight(w_pre: &Tensor, w_star: &Tensor, mask: MaskRef<'_>) -> Result<Tensor> {
    if w_pre.shape() != w_star.shape() {
        return Err(Error::ShapeMismatch {
            name: "masked_weight".into(),
            left: w_pre.shape().to_vec(),
            right: w_star.shape().to_vec(),
        });
    }
    if let Some(n) = mask.len() {
        if n != w_pre.numel() {
            return Err(Error::invalid(format!(
                "mask has {n} elements, weight has {}",
                w_pre.numel()
            )));
        }
    }
    let data = w_pre
        .data()
        .iter()
        .zip(w_star.data())
        .enumerate()
        .map(|(i, (&p, &s))| (mask.value(i) * s as f64 + p as f64) as f32)
        .collect();
    Ok(Tensor::from_parts(w_pre.shape().to_vec(), data))
}

/// Which masks form the averaged text mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextMaskPolicy {
    /// Average over every mask in the bundle.
    #[default]
    AllMasks,
    /// Average over the masks of modalities present in the input only.
    PresentOnly,
}

/// Which reference task vector the masks are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskReference {
    /// The preprocessed (trimmed / DARE) vectors that entered the merge.
    #[default]
    Preprocessed,
    /// The raw `theta_i - theta_pre` differences.
    Raw,
}

/// Everything needed to go from fine-tuned checkpoints to a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleOptions {
    pub recipe: MergeRecipe,
    pub trim_scope: TrimScope,
    /// DARE drop probability and seed, applied after trimming.
    pub dare: Option<(f64, u64)>,
    /// Per-modality lambda; modalities not listed use 1.0.
    pub lambdas: BTreeMap<String, f64>,
    pub variant: MaskVariant,
    /// Tensors excluded from masking: every modality uses the full merged
    /// delta for them.
    pub unmasked: Vec<String>,
    pub mask_reference: MaskReference,
}

impl Default for BundleOptions {
    fn default() -> Self {
        Self {
            recipe: MergeRecipe::ties(80.0, 1.0),
            trim_scope: TrimScope::Global,
            dare: None,
            lambdas: BTreeMap::new(),
            variant: MaskVariant::Full,
            unmasked: Vec::new(),
            mask_reference: MaskReference::Preprocessed,
        }
    }
}

/// The stored artifact replacing N fine-tuned models: the shared base, the
/// merged task vector and one binary mask per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedBundle {
    pub base: Checkpoint,
    pub tau_star: TaskVector,
    pub masks: BTreeMap<String, ModalityMask>,
    pub lambdas: BTreeMap<String, f64>,
    pub recipe: MergeRecipe,
}

/// Preprocesses one task vector the way a bundle build does.
pub fn preprocess(tau: &TaskVector, opts: &BundleOptions, index: usize) -> Result<TaskVector> {
    let mut t = tau.clone();
    if opts.recipe.method == MergeMethod::Ties {
        t = topk_trim(&t, opts.recipe.k_percent.unwrap_or(100.0), opts.trim_scope)?;
    }
    if let Some((p, seed)) = opts.dare {
        let mut rng = PrngStream::new(seed).fork(index as u64 + 1);
        t = dare(&t, p, &mut rng)?;
    }
    Ok(t)
}

impl MergedBundle {
    pub fn new(
        base: Checkpoint,
        tau_star: TaskVector,
        masks: BTreeMap<String, ModalityMask>,
        recipe: MergeRecipe,
    ) -> Result<Self> {
        congruence_check(&base, &tau_star.deltas)?;
        if masks.is_empty() {
            return Err(Error::invalid("bundle needs at least one modality mask"));
        }
        for (label, m) in &masks {
            if label == TEXT_LABEL {
                return Err(Error::invalid(format!("'{TEXT_LABEL}' is reserved for text segments")));
            }
            if &m.modality != label {
                return Err(Error::invalid(format!(
                    "mask keyed '{label}' is labelled '{}'",
                    m.modality
                )));
            }
            m.check_congruent(&base)?;
        }
        let lambdas = masks.iter().map(|(k, m)| (k.clone(), m.lambda)).collect();
        Ok(Self {
            base,
            tau_star,
            masks,
            lambdas,
            recipe,
        })
    }

    /// Full pipeline: extract, preprocess, merge, and build one mask per
    /// `(modality, fine-tuned checkpoint)` pair.
    pub fn build(base: &Checkpoint, models: &[(String, Checkpoint)], opts: &BundleOptions) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::invalid("bundle needs at least one fine-tuned model"));
        }
        let mut raw = Vec::with_capacity(models.len());
        let mut prepped = Vec::with_capacity(models.len());
        for (i, (modality, model)) in models.iter().enumerate() {
            let mut tau = extract(model, base)?;
            tau.source_id = modality.clone();
            prepped.push(preprocess(&tau, opts, i)?);
            raw.push(tau);
        }
        let merged = merge(&prepped, &opts.recipe)?;
        let mut masks = BTreeMap::new();
        for (i, (modality, _)) in models.iter().enumerate() {
            let lambda = opts.lambdas.get(modality).copied().unwrap_or(1.0);
            let reference = match opts.mask_reference {
                MaskReference::Preprocessed => &prepped[i],
                MaskReference::Raw => &raw[i],
            };
            let mut mask = build_mask_ablation(reference, &merged.tau, modality, lambda, opts.variant)?;
            for name in &opts.unmasked {
                let bits = mask
                    .tensor_mut(name)
                    .ok_or_else(|| Error::MissingTensor(name.clone()))?;
                for j in 0..bits.len() {
                    bits.set(j, true);
                }
            }
            if masks.insert(modality.clone(), mask).is_some() {
                return Err(Error::invalid(format!("duplicate modality '{modality}'")));
            }
        }
        Self::new(base.clone(), merged.tau, masks, merged.recipe)
    }

    pub fn modalities(&self) -> impl Iterator<Item = &String> {
        self.masks.keys()
    }

    pub fn mask(&self, modality: &str) -> Result<&ModalityMask> {
        self.masks
            .get(modality)
            .ok_or_else(|| Error::UnknownModality(modality.to_string()))
    }

    /// Averaged mask used for text tokens.
    pub fn text_mask(&self, policy: TextMaskPolicy, present: &[&str]) -> Result<FractionalMask> {
        let masks: Vec<&ModalityMask> = match policy {
            TextMaskPolicy::AllMasks => self.masks.values().collect(),
            TextMaskPolicy::PresentOnly => {
                let chosen: Vec<&ModalityMask> = self
                    .masks
                    .iter()
                    .filter(|(k, _)| present.contains(&k.as_str()))
                    .map(|(_, m)| m)
                    .collect();
                if chosen.is_empty() {
                    self.masks.values().collect()
                } else {
                    chosen
                }
            }
        };
        average_masks(&masks)
    }

    /// Parameters with every tensor blended by `mask_for(name)`.
    pub(crate) fn blend<'a>(&'a self, mask_for: impl Fn(&str) -> Result<MaskRef<'a>>) -> Result<Checkpoint> {
        let mut out = Checkpoint::new();
        for (name, w_pre) in self.base.iter() {
            let w_star = self.tau_star.deltas.tensor(name)?;
            out.insert(name.clone(), masked_weight(w_pre, w_star, mask_for(name)?)?);
        }
        Ok(out)
    }

    /// `theta_pre + m_i * tau_star` for one modality.
    pub fn reconstruct(&self, modality: &str) -> Result<Checkpoint> {
        let mask = self.mask(modality)?;
        let mut out = self.blend(|name| Ok(MaskRef::Bits(mask.tensor(name)?)))?;
        out.set_meta("role", "reconstructed");
        out.set_meta("modality", modality);
        Ok(out)
    }

    /// `theta_pre + m_bar * tau_star`, the parameters text tokens see.
    pub fn reconstruct_text(&self, policy: TextMaskPolicy, present: &[&str]) -> Result<Checkpoint> {
        let avg = self.text_mask(policy, present)?;
        let mut out = self.blend(|name| Ok(MaskRef::Fraction(avg.tensor(name)?.data())))?;
        out.set_meta("role", "reconstructed");
        out.set_meta("modality", TEXT_LABEL);
        Ok(out)
    }

    /// Writes `base.mtc`, `merged.mtc`, `masks/<modality>.mmk` and an index.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("masks"))?;
        write_container(&self.base, dir.join("base.mtc"))?;
        let merged = MergedTaskVector {
            tau: self.tau_star.clone(),
            recipe: self.recipe.clone(),
        };
        write_container(&merged.to_checkpoint(), dir.join("merged.mtc"))?;
        for (label, mask) in &self.masks {
            write_mask(mask, dir.join("masks").join(format!("{label}.mmk")))?;
        }
        let index = BundleIndex {
            modalities: self.masks.keys().cloned().collect(),
        };
        fs::write(dir.join("bundle.json"), serde_json::to_vec(&index).map_err(|e| Error::Header(e.to_string()))?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index: BundleIndex = serde_json::from_slice(&fs::read(dir.join("bundle.json"))?)
            .map_err(|e| Error::Header(format!("bundle.json: {e}")))?;
        let base = read_container(dir.join("base.mtc"))?;
        let merged = MergedTaskVector::from_checkpoint(read_container(dir.join("merged.mtc"))?)?;
        let mut masks = BTreeMap::new();
        for label in index.modalities {
            let m = read_mask(dir.join("masks").join(format!("{label}.mmk")))?;
            masks.insert(label, m);
        }
        Self::new(base, merged.tau, masks, merged.recipe)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleIndex {
    modalities: Vec<String>,
}

/// Free-function form of [`MergedBundle::reconstruct`].
pub fn reconstruct(bundle: &MergedBundle, modality: &str) -> Result<Checkpoint> {
    bundle.reconstruct(modality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merging::apply_to_base;

    fn ck(values: &[f32]) -> Checkpoint {
        Checkpoint::from_tensors([("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())])
    }

    fn tiny_bundle(mask_bits: &[bool]) -> MergedBundle {
        let base = ck(&[1.0, 1.0, 1.0]);
        let tau = TaskVector::new(ck(&[0.2, 0.4, -0.5]), "b", "m");
        let mask = ModalityMask::new(
            "audio",
            1.0,
            [("w".to_string(), BitTensor::from_bits(&[3], mask_bits.iter().copied()))].into(),
        );
        MergedBundle::new(base, tau, [("audio".to_string(), mask)].into(), MergeRecipe::ties(100.0, 1.0)).unwrap()
    }

    #[test]
    fn reconstruct_formula() {
        let b = tiny_bundle(&[true, false, false]);
        let r = b.reconstruct("audio").unwrap();
        assert_eq!(r.flatten(), vec![1.2, 1.0, 1.0]);
        assert!(matches!(b.reconstruct("video"), Err(Error::UnknownModality(_))));
    }

    #[test]
    fn all_ones_mask_equals_apply_to_base() {
        let b = tiny_bundle(&[true, true, true]);
        let r = b.reconstruct("audio").unwrap();
        let full = apply_to_base(&b.base, &b.tau_star, 1.0).unwrap();
        assert_eq!(r.flatten(), full.flatten());
    }

    #[test]
    fn masked_weight_examples() {
        let pre = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let star = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let one = BitTensor::from_bits(&[1, 1], [true]);
        let zero = BitTensor::from_bits(&[1, 1], [false]);
        assert_eq!(masked_weight(&pre, &star, MaskRef::Bits(&one)).unwrap().data(), &[1.5]);
        assert_eq!(masked_weight(&pre, &star, MaskRef::Bits(&zero)).unwrap().data(), &[1.0]);
        assert_eq!(masked_weight(&pre, &star, MaskRef::Fraction(&[0.5])).unwrap().data(), &[1.25]);
        let wide = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(masked_weight(&pre, &wide, MaskRef::Ones).is_err());
    }

    #[test]
    fn single_model_pipeline_is_identity() {
        let base = ck(&[0.5, -1.0, 2.0, 0.0]);
        let model = ck(&[0.7, -1.3, 2.0, 0.01]);
        let opts = BundleOptions {
            recipe: MergeRecipe::ties(100.0, 1.0),
            ..Default::default()
        };
        let b = MergedBundle::build(&base, &[("audio".into(), model.clone())], &opts).unwrap();
        let r = b.reconstruct("audio").unwrap();
        for (a, e) in r.flatten().iter().zip(model.flatten()) {
            assert!((a - e).abs() <= 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn unmasked_tensors_take_full_delta() {
        let base = Checkpoint::from_tensors([
            ("a", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()),
            ("b", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()),
        ]);
        let m1 = Checkpoint::from_tensors([
            ("a", Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()),
            ("b", Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()),
        ]);
        let m2 = Checkpoint::from_tensors([
            ("a", Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()),
            ("b", Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()),
        ]);
        let opts = BundleOptions {
            recipe: MergeRecipe::ties(100.0, 1.0),
            unmasked: vec!["b".into()],
            ..Default::default()
        };
        let b = MergedBundle::build(&base, &[("x".into(), m1), ("y".into(), m2)], &opts).unwrap();
        let r = b.reconstruct("x").unwrap();
        assert_eq!(r.tensor("a").unwrap().data(), &[1.0, 0.0]);
        assert_eq!(r.tensor("b").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn rejects_reserved_and_mislabelled_masks() {
        let base = ck(&[1.0]);
        let tau = TaskVector::new(ck(&[0.1]), "b", "m");
        let mask = ModalityMask::new("text", 1.0, [("w".to_string(), BitTensor::zeros(&[1]))].into());
        let r = MergedBundle::new(base.clone(), tau.clone(), [("text".to_string(), mask.clone())].into(), MergeRecipe::ta(1.0));
        assert!(r.is_err());
        let r = MergedBundle::new(base.clone(), tau.clone(), [("audio".to_string(), mask)].into(), MergeRecipe::ta(1.0));
        assert!(r.is_err());
        assert!(MergedBundle::new(base, tau, BTreeMap::new(), MergeRecipe::ta(1.0)).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle(&[true, false, true]);
        b.save(dir.path()).unwrap();
        let back = MergedBundle::load(dir.path()).unwrap();
        assert_eq!(back.masks, b.masks);
        assert_eq!(back.base, b.base);
        assert_eq!(back.tau_star.deltas, b.tau_star.deltas);
        assert_eq!(back.recipe, b.recipe);
    }
}
