//! Seeded inputs shared by the kernel benchmarks.

use mmer_core::runtime::{Matrix, Segment, SegmentLabel, SegmentedSequence, ToyModelConfig};
use mmer_core::{Checkpoint, MergedBundle, PrngStream, TaskVector, Tensor};

/// `count` task vectors of `len` standard-normal entries in one tensor.
pub fn task_vectors(count: usize, len: usize, seed: u64) -> Vec<TaskVector> {
    let mut rng = PrngStream::new(seed);
    (0..count)
        .map(|i| {
            let data = (0..len).map(|_| rng.normal() as f32).collect();
            let ckpt = Checkpoint::from_tensors([("w", Tensor::new(vec![len], data).unwrap())]);
            TaskVector::new(ckpt, "base", format!("t{i}"))
        })
        .collect()
}

pub fn toy_config() -> ToyModelConfig {
    ToyModelConfig {
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        d_ff: 128,
        vocab_size: 32,
        attention: Default::default(),
        positional: Default::default(),
    }
}

/// Bundle of two perturbed copies of a toy transformer.
pub fn toy_bundle(config: &ToyModelConfig, seed: u64) -> MergedBundle {
    let base = config.init_params(seed).unwrap();
    let models: Vec<(String, Checkpoint)> = ["vision", "audio"]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let other = config.init_params(seed + 1 + i as u64).unwrap();
            let mut m = Checkpoint::new();
            for (t, w) in base.iter() {
                let o = other.tensor(t).unwrap();
                let data = w.data().iter().zip(o.data()).map(|(a, b)| a + 0.05 * b).collect();
                m.insert(t.clone(), Tensor::new(w.shape().to_vec(), data).unwrap());
            }
            (name.to_string(), m)
        })
        .collect();
    MergedBundle::build(&base, &models, &Default::default()).unwrap()
}

/// Vision, text and audio segments of `rows` tokens each.
pub fn toy_sequence(config: &ToyModelConfig, rows: usize, seed: u64) -> SegmentedSequence {
    let mut rng = PrngStream::new(seed);
    let segments = ["vision", "text", "audio"]
        .iter()
        .map(|label| {
            let data = (0..rows * config.d_model).map(|_| rng.normal()).collect();
            Segment {
                label: SegmentLabel::parse(label),
                tokens: Matrix::from_vec(rows, config.d_model, data).unwrap(),
            }
        })
        .collect();
    SegmentedSequence::new(segments).unwrap()
}
