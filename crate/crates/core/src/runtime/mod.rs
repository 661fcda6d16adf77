//! Reconstruction of per-modality models and the decoupled forward pass.

mod bundle;
mod decoupled;
pub mod linalg;
pub mod model;

pub use bundle::{
    masked_weight, preprocess, reconstruct, BundleOptions, MaskRef, MaskReference, MergedBundle,
    TextMaskPolicy, TEXT_LABEL,
};
pub use decoupled::{
    decoupled_attention, decoupled_forward, decoupled_forward_with, segment_params,
    DecoupleOptions, HeadPolicy, Segment, SegmentLabel, SegmentParams, SegmentedSequence,
};
pub use linalg::Matrix;
pub use model::{forward, AttentionMode, Positional, ToyModelConfig};
