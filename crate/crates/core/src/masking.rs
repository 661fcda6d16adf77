//! Modality-specific binary masks over a merged task vector.
//!
//! A mask bit selects a merged element for a modality when the original
//! task vector agrees in sign with the merged one (directional congruence)
//! and carries at least `lambda * 50%` of its magnitude (dominant
//! significance). At `lambda = 1` this is the element-wise minimizer of
//! `sum |m * tau_star - tau_i|` over binary masks.
//!
//! Conventions: `sign(0)` matches nothing, so a zero in either vector
//! yields bit 0; the boundary `|tau_i| == lambda * 0.5 * |tau_star|` yields 1.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::split_header;
use crate::error::{Error, Result};
use crate::taskvector::TaskVector;
use crate::tensor::{congruence_check, schema_digest, Checkpoint, Tensor};

pub const MASK_MAGIC: &[u8; 4] = b"MMK1";

/// Row-major bit array, LSB-first within each byte. Padding bits in the
/// last byte are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    len: usize,
    bytes: Vec<u8>,
}

impl BitTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            len,
            bytes: vec![0; len.div_ceil(8)],
        }
    }

    pub fn from_bits(shape: &[usize], bits: impl IntoIterator<Item = bool>) -> Self {
        let mut out = Self::zeros(shape);
        let mut n = 0;
        for (i, b) in bits.into_iter().enumerate() {
            assert!(i < out.len, "more bits than elements");
            if b {
                out.bytes[i / 8] |= 1 << (i % 8);
            }
            n += 1;
        }
        assert_eq!(n, out.len, "bit count does not match shape");
        out
    }

    fn from_bytes(shape: Vec<usize>, bytes: Vec<u8>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Truncated(format!(
                "expected {} mask bytes, got {}",
                len.div_ceil(8),
                bytes.len()
            )));
        }
        if len % 8 != 0 && bytes[bytes.len() - 1] >> (len % 8) != 0 {
            return Err(Error::Header("nonzero padding bits in mask payload".into()));
        }
        Ok(Self { shape, len, bytes })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len);
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len);
        if value {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    pub fn popcount(&self) -> u64 {
        self.bytes.iter().map(|b| b.count_ones() as u64).sum()
    }
}

/// Binary mask for one modality, congruent with a merged task vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMask {
    pub modality: String,
    pub lambda: f64,
    /// Ids of the task vectors the mask was built from (original, merged).
    pub sources: Vec<String>,
    /// Free-form provenance recorded in the packed header.
    pub meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, BitTensor>,
}

impl ModalityMask {
    pub fn new(modality: impl Into<String>, lambda: f64, tensors: BTreeMap<String, BitTensor>) -> Self {
        Self {
            modality: modality.into(),
            lambda,
            sources: Vec::new(),
            meta: BTreeMap::new(),
            tensors,
        }
    }

    /// Mask with every bit set, congruent with `schema`.
    pub fn ones_like(modality: impl Into<String>, schema: &Checkpoint) -> Self {
        let tensors = schema
            .iter()
            .map(|(n, t)| (n.clone(), BitTensor::from_bits(t.shape(), std::iter::repeat(true).take(t.numel()))))
            .collect();
        Self::new(modality, 1.0, tensors)
    }

    pub fn tensors(&self) -> &BTreeMap<String, BitTensor> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&BitTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut BitTensor> {
        self.tensors.get_mut(name)
    }

    pub fn numel(&self) -> u64 {
        self.tensors.values().map(|b| b.len() as u64).sum()
    }

    pub fn popcount(&self) -> u64 {
        self.tensors.values().map(BitTensor::popcount).sum()
    }

    /// Fraction of set bits; zero for an empty mask.
    pub fn density(&self) -> f64 {
        let n = self.numel();
        if n == 0 {
            0.0
        } else {
            self.popcount() as f64 / n as f64
        }
    }

    pub fn schema_digest(&self) -> String {
        schema_digest(self.tensors.iter().map(|(n, b)| (n.as_str(), b.shape())))
    }

    /// Verifies that the mask covers exactly the tensors of `schema`.
    pub fn check_congruent(&self, schema: &Checkpoint) -> Result<()> {
        for (name, t) in schema.iter() {
            let bits = self.tensor(name)?;
            if bits.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    left: bits.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|n| schema.get(n).is_none()) {
            return Err(Error::MissingTensor(extra.clone()));
        }
        Ok(())
    }

    pub(crate) fn check_same_schema(&self, other: &ModalityMask) -> Result<()> {
        for (name, b) in &self.tensors {
            let o = other.tensor(name)?;
            if o.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    left: b.shape().to_vec(),
                    right: o.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.tensors.keys().find(|n| !self.tensors.contains_key(*n)) {
            return Err(Error::MissingTensor(extra.clone()));
        }
        Ok(())
    }
}

/// Which mask rule to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskVariant {
    /// Sign agreement and dominant magnitude.
    #[default]
    Full,
    /// Magnitude condition only.
    NoDirection,
    /// Sign agreement only.
    NoDominance,
}

impl fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskVariant::Full => "full",
            MaskVariant::NoDirection => "no-direction",
            MaskVariant::NoDominance => "no-dominance",
        })
    }
}

impl FromStr for MaskVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "full" => Ok(MaskVariant::Full),
            "no-direction" => Ok(MaskVariant::NoDirection),
            "no-dominance" => Ok(MaskVariant::NoDominance),
            other => Err(Error::invalid(format!("unknown mask variant '{other}'"))),
        }
    }
}

/// The per-element mask rule.
pub fn mask_bit(tau_i: f32, tau_star: f32, lambda: f64, variant: MaskVariant) -> bool {
    if tau_i == 0.0 {
        return false;
    }
    let congruent = (tau_i > 0.0 && tau_star > 0.0) || (tau_i < 0.0 && tau_star < 0.0);
    let dominant = (tau_i.abs() as f64) >= lambda * 0.5 * (tau_star.abs() as f64);
    match variant {
        MaskVariant::Full => congruent && dominant,
        MaskVariant::NoDirection => dominant,
        MaskVariant::NoDominance => congruent,
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be > 0, got {lambda}")));
    }
    Ok(())
}

pub fn build_mask(
    tau_i: &TaskVector,
    tau_star: &TaskVector,
    modality: &str,
    lambda: f64,
) -> Result<ModalityMask> {
    build_mask_ablation(tau_i, tau_star, modality, lambda, MaskVariant::Full)
}

pub fn build_mask_ablation(
    tau_i: &TaskVector,
    tau_star: &TaskVector,
    modality: &str,
    lambda: f64,
    variant: MaskVariant,
) -> Result<ModalityMask> {
    check_lambda(lambda)?;
    congruence_check(&tau_i.deltas, &tau_star.deltas)?;
    let names: Vec<&String> = tau_i.deltas.names().collect();
    let tensors: BTreeMap<String, BitTensor> = names
        .par_iter()
        .map(|&name| {
            let a = tau_i.deltas.get(name).unwrap();
            let s = tau_star.deltas.get(name).unwrap();
            let bits = a
                .data()
                .iter()
                .zip(s.data())
                .map(|(&x, &y)| mask_bit(x, y, lambda, variant));
            (name.clone(), BitTensor::from_bits(a.shape(), bits))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    let mut mask = ModalityMask::new(modality, lambda, tensors);
    mask.sources = vec![tau_i.source_id.clone(), tau_star.source_id.clone()];
    if variant != MaskVariant::Full {
        mask.meta.insert("variant".into(), variant.to_string());
    }
    Ok(mask)
}

/// `sum_p |m_p * tau_star_p - tau_i_p|`, accumulated in f64.
pub fn mask_l1(tau_i: &TaskVector, tau_star: &TaskVector, mask: &ModalityMask) -> Result<f64> {
    congruence_check(&tau_i.deltas, &tau_star.deltas)?;
    mask.check_congruent(&tau_i.deltas)?;
    let mut total = 0f64;
    for (name, a) in tau_i.deltas.iter() {
        let s = tau_star.deltas.get(name).unwrap();
        let bits = mask.tensor(name)?;
        for (i, (&x, &y)) in a.data().iter().zip(s.data()).enumerate() {
            let recon = if bits.get(i) { y as f64 } else { 0.0 };
            total += (recon - x as f64).abs();
        }
    }
    Ok(total)
}

/// Element-wise mean of binary masks, with values in `{0, 1/N, ..., 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalMask {
    values: Checkpoint,
}

impl FractionalMask {
    pub fn values(&self) -> &Checkpoint {
        &self.values
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.values.tensor(name)
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.values
    }

    /// Accepts a checkpoint as a fractional mask if every value is in [0, 1].
    pub fn from_checkpoint(values: Checkpoint) -> Result<Self> {
        for (name, t) in values.iter() {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("fractional mask '{name}' has values outside [0, 1]")));
            }
        }
        Ok(Self { values })
    }
}

pub fn average_masks(masks: &[&ModalityMask]) -> Result<FractionalMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("average_masks needs at least one mask"))?;
    for m in &masks[1..] {
        first.check_same_schema(m)?;
    }
    let n = masks.len() as f64;
    let mut values = Checkpoint::new();
    for (name, bits) in first.tensors() {
        let mut counts = vec![0u32; bits.len()];
        for m in masks {
            for (c, b) in counts.iter_mut().zip(m.tensors[name].iter()) {
                *c += b as u32;
            }
        }
        let data = counts.into_iter().map(|c| (c as f64 / n) as f32).collect();
        values.insert(name.clone(), Tensor::from_parts(bits.shape().to_vec(), data));
    }
    values.set_meta("role", "fractional_mask");
    values.set_meta(
        "modalities",
        masks.iter().map(|m| m.modality.as_str()).collect::<Vec<_>>().join(","),
    );
    Ok(FractionalMask { values })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    bit_offset: u64,
    nbits: u64,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskHeader {
    lambda: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
    modality: String,
    schema_digest: String,
    #[serde(default)]
    sources: Vec<String>,
    tensors: BTreeMap<String, MaskEntry>,
}

/// Encodes a mask as `MMK1 | u64 LE header_len | JSON header | bits`.
///
/// Each tensor's bits start on a byte boundary and occupy
/// `ceil(elements / 8)` bytes; `bit_offset` in the header is the bit
/// position of that start within the payload.
pub fn pack_mask(mask: &ModalityMask) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut tensors = BTreeMap::new();
    for (name, bits) in &mask.tensors {
        tensors.insert(
            name.clone(),
            MaskEntry {
                bit_offset: offset * 8,
                nbits: bits.len() as u64,
                shape: bits.shape().to_vec(),
            },
        );
        offset += bits.bytes().len() as u64;
    }
    let header = MaskHeader {
        lambda: mask.lambda,
        meta: mask.meta.clone(),
        modality: mask.modality.clone(),
        schema_digest: mask.schema_digest(),
        sources: mask.sources.clone(),
        tensors,
    };
    let text = serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + text.len() + offset as usize);
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    for bits in mask.tensors.values() {
        out.extend_from_slice(bits.bytes());
    }
    Ok(out)
}

pub fn unpack_mask(bytes: &[u8]) -> Result<ModalityMask> {
    let (header_bytes, end) = split_header(bytes, MASK_MAGIC)?;
    let header: MaskHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Header(e.to_string()))?;
    let payload = &bytes[end..];
    let mut tensors = BTreeMap::new();
    let mut cursor = 0usize;
    for (name, e) in header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.shape.is_empty() || e.shape.contains(&0) || numel as u64 != e.nbits {
            return Err(Error::Header(format!(
                "mask tensor '{name}': nbits {} does not match shape {:?}",
                e.nbits, e.shape
            )));
        }
        if e.bit_offset != cursor as u64 * 8 {
            return Err(Error::Overlap(name));
        }
        let nbytes = numel.div_ceil(8);
        if cursor + nbytes > payload.len() {
            return Err(Error::Truncated(format!("mask payload too short for '{name}'")));
        }
        let bits = BitTensor::from_bytes(e.shape, payload[cursor..cursor + nbytes].to_vec())?;
        cursor += nbytes;
        tensors.insert(name, bits);
    }
    if cursor != payload.len() {
        return Err(Error::Header(format!("{} trailing mask bytes", payload.len() - cursor)));
    }
    let mut mask = ModalityMask::new(header.modality, header.lambda, tensors);
    mask.sources = header.sources;
    mask.meta = header.meta;
    if mask.schema_digest() != header.schema_digest {
        return Err(Error::Header("schema digest does not match mask tensors".into()));
    }
    Ok(mask)
}

pub fn write_mask(mask: &ModalityMask, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, pack_mask(mask)?)?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<ModalityMask> {
    unpack_mask(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(values: &[f32]) -> TaskVector {
        let c = Checkpoint::from_tensors([("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())]);
        TaskVector::new(c, "base", "t")
    }

    fn bits(m: &ModalityMask) -> Vec<bool> {
        m.tensors()["w"].iter().collect()
    }

    /// Exhaustive minimizer over all 2^P masks; ties go to the mask whose
    /// bits are smallest as a binary number read from the last element.
    fn brute_force(tau_i: &[f32], tau_star: &[f32]) -> (f64, Vec<bool>) {
        let p = tau_i.len();
        let mut best = (f64::INFINITY, vec![]);
        for code in 0u32..(1 << p) {
            let m: Vec<bool> = (0..p).map(|j| code >> j & 1 == 1).collect();
            let cost: f64 = (0..p)
                .map(|j| ((if m[j] { tau_star[j] as f64 } else { 0.0 }) - tau_i[j] as f64).abs())
                .sum();
            if cost < best.0 {
                best = (cost, m);
            }
        }
        best
    }

    #[test]
    fn build_mask_example_matches_brute_force() {
        let ti = tv(&[0.3, -0.2, 0.0]);
        let ts = tv(&[0.2, 0.4, -0.5]);
        let m = build_mask(&ti, &ts, "a", 1.0).unwrap();
        assert_eq!(bits(&m), vec![true, false, false]);
        let (cost, best) = brute_force(&[0.3, -0.2, 0.0], &[0.2, 0.4, -0.5]);
        assert_eq!(best, bits(&m));
        assert_eq!(mask_l1(&ti, &ts, &m).unwrap(), cost);
    }

    #[test]
    fn lambda_threshold() {
        let ti = tv(&[0.08]);
        let ts = tv(&[0.2]);
        assert_eq!(bits(&build_mask(&ti, &ts, "a", 1.0).unwrap()), vec![false]);
        assert_eq!(bits(&build_mask(&ti, &ts, "a", 0.5).unwrap()), vec![true]);
    }

    #[test]
    fn identical_vectors_give_full_mask() {
        let t = tv(&[0.1, -0.4, 2.0]);
        let m = build_mask(&t, &t, "a", 1.0).unwrap();
        assert_eq!(bits(&m), vec![true; 3]);
        assert_eq!(mask_l1(&t, &t, &m).unwrap(), 0.0);
    }

    #[test]
    fn boundary_is_included() {
        assert!(mask_bit(0.25, 0.5, 1.0, MaskVariant::Full));
        assert!(!mask_bit(0.0, 0.0, 1.0, MaskVariant::Full));
        assert!(!mask_bit(0.3, 0.0, 1.0, MaskVariant::Full));
    }

    #[test]
    fn ablation_examples() {
        let ti = tv(&[-0.2]);
        let ts = tv(&[0.4]);
        let nd = build_mask_ablation(&ti, &ts, "a", 1.0, MaskVariant::NoDirection).unwrap();
        assert_eq!(bits(&nd), vec![true]);
        let ns = build_mask_ablation(&ti, &ts, "a", 1.0, MaskVariant::NoDominance).unwrap();
        assert_eq!(bits(&ns), vec![false]);
        let small = build_mask_ablation(&tv(&[0.01]), &ts, "a", 1.0, MaskVariant::NoDominance).unwrap();
        assert_eq!(bits(&small), vec![true]);
    }

    #[test]
    fn rejects_bad_lambda_and_schema() {
        let t = tv(&[0.1]);
        assert!(build_mask(&t, &t, "a", 0.0).is_err());
        assert!(build_mask(&t, &t, "a", -1.0).is_err());
        assert!(build_mask(&t, &tv(&[0.1, 0.2]), "a", 1.0).is_err());
    }

    #[test]
    fn l1_examples() {
        let ti = tv(&[0.3, -0.2, 0.0]);
        let ts = tv(&[0.2, 0.4, -0.5]);
        let m = ModalityMask::new("a", 1.0, [("w".to_string(), BitTensor::from_bits(&[3], [true, false, false]))].into());
        let l1 = mask_l1(&ti, &ts, &m).unwrap();
        assert!((l1 - 0.3).abs() < 1e-7);
        let zero = ModalityMask::new("a", 1.0, [("w".to_string(), BitTensor::zeros(&[3]))].into());
        assert!((mask_l1(&ti, &ts, &zero).unwrap() - 0.5).abs() < 1e-7);
    }

    fn mask_of(b: &[u8]) -> ModalityMask {
        let bits = BitTensor::from_bits(&[b.len()], b.iter().map(|&x| x == 1));
        ModalityMask::new("m", 1.0, [("w".to_string(), bits)].into())
    }

    #[test]
    fn average_examples() {
        let ms = [
            mask_of(&[1, 0, 1]),
            mask_of(&[1, 1, 0]),
            mask_of(&[0, 0, 0]),
            mask_of(&[0, 1, 1]),
        ];
        let refs: Vec<&ModalityMask> = ms.iter().collect();
        let avg = average_masks(&refs).unwrap();
        assert_eq!(avg.values().flatten(), vec![0.5, 0.5, 0.5]);
        let one = average_masks(&refs[..1]).unwrap();
        assert_eq!(one.values().flatten(), vec![1.0, 0.0, 1.0]);
        let ones = [mask_of(&[1, 1]), mask_of(&[1, 1])];
        let avg = average_masks(&ones.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(avg.values().flatten(), vec![1.0, 1.0]);
        assert!(average_masks(&[]).is_err());
        assert!(average_masks(&[&ms[0], &ones[0]]).is_err());
    }

    #[test]
    fn packing_lsb_first() {
        let m = mask_of(&[1, 0, 1, 1, 0, 0, 0, 0]);
        assert_eq!(m.tensors()["w"].bytes(), &[0x0D]);
        let packed = pack_mask(&m).unwrap();
        assert_eq!(*packed.last().unwrap(), 0x0D);
    }

    #[test]
    fn ten_bits_take_two_bytes() {
        let m = mask_of(&[1, 1, 1, 1, 1, 1, 1, 1, 1, 1]);
        let packed = pack_mask(&m).unwrap();
        let header_len = u64::from_le_bytes(packed[4..12].try_into().unwrap()) as usize;
        assert_eq!(packed.len() - 12 - header_len, 2);
        assert_eq!(&packed[packed.len() - 2..], &[0xFF, 0x03]);
    }

    #[test]
    fn pack_round_trip_and_errors() {
        let mut m = mask_of(&[1, 0, 1, 1, 0, 0, 1, 0, 1]);
        m.sources = vec!["a".into(), "merged".into()];
        m.meta.insert("provenance".into(), "test".into());
        let packed = pack_mask(&m).unwrap();
        assert_eq!(unpack_mask(&packed).unwrap(), m);

        assert!(matches!(unpack_mask(&packed[..packed.len() - 1]), Err(Error::Truncated(_))));
        let mut bad = packed.clone();
        bad[..4].copy_from_slice(b"MTC1");
        assert!(matches!(unpack_mask(&bad), Err(Error::BadMagic { .. })));
        let mut padded = packed.clone();
        *padded.last_mut().unwrap() |= 0x80;
        assert!(unpack_mask(&padded).is_err());
        let mut extra = packed;
        extra.push(0);
        assert!(unpack_mask(&extra).is_err());
    }

    #[test]
    fn density_is_popcount_ratio() {
        assert!((mask_of(&[1, 0, 0]).density() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_of(&[0, 0]).density(), 0.0);
        assert_eq!(mask_of(&[1, 1]).density(), 1.0);
    }
}
