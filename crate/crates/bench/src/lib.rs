//! Shared inputs for the criterion benchmarks.

use mixtts_core::dsp::{logmel, speechlike, MelSpectrogram, Waveform};
use mixtts_core::model::ModelConfig;
use mixtts_core::nn::Tensor;
use mixtts_core::trainer::{TrainConfig, Trainer};
use mixtts_core::fixtures;

pub fn babble(secs: f64) -> Waveform {
    speechlike::babble(secs, 17)
}

pub fn target(secs: f64) -> MelSpectrogram {
    logmel(&babble(secs), false, None).expect("clip is long enough")
}

/// Deterministic pseudo-random matrix in [-1, 1).
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(&[rows, cols], |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

/// A desk-scale trainer over five synthetic utterances.
pub fn desk_trainer() -> Trainer {
    let cfg = TrainConfig {
        model: ModelConfig::desk(),
        batch_size: 4,
        tbptt_length: 32,
        ..TrainConfig::default()
    };
    Trainer::new(cfg, fixtures::corpus(5, 600, 3).expect("fixture corpus")).expect("valid config")
}
