//! Checkpoint arithmetic for composing fine-tuned models that share a base.
//!
//! The pipeline: [`extract`] task vectors from fine-tuned checkpoints,
//! merge them ([`ties_merge`], [`ta_merge`], optionally preprocessed by
//! [`dare`]), build one binary mask per modality against the merged vector
//! ([`build_mask`]), then either [`reconstruct`] a near-original model per
//! modality or run [`decoupled_forward`], where each input segment is
//! processed by its own masked parameters.

pub mod analysis;
pub mod container;
pub mod error;
pub mod harness;
pub mod masking;
pub mod merging;
pub mod prng;
pub mod runtime;
pub mod taskvector;
pub mod tensor;

pub use container::{decode_container, encode_container, read_container, write_container};
pub use error::{Error, Result};
pub use masking::{
    average_masks, build_mask, build_mask_ablation, mask_l1, pack_mask, read_mask, unpack_mask,
    write_mask, BitTensor, FractionalMask, MaskVariant, ModalityMask,
};
pub use merging::{
    apply_to_base, merge, ta_merge, ties_merge, ties_sign_elect, MergeMethod, MergeRecipe,
    MergedTaskVector,
};
pub use prng::PrngStream;
pub use runtime::{
    decoupled_forward, masked_weight, reconstruct, MergedBundle, SegmentedSequence, ToyModelConfig,
};
pub use taskvector::{axpy, dare, extract, topk_trim, TaskVector, TrimScope};
pub use tensor::{congruence_check, Checkpoint, Tensor};
