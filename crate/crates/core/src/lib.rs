//! Core algorithms for a mixed character/phoneme text-to-speech model:
//! text frontend, neural network primitives, acoustic model, training loop
//! and waveform inversion.

pub mod decoder;
pub mod dsp;
pub mod embedding;
pub mod encoder;
pub mod fixtures;
pub mod frontend;
pub mod inversion;
pub mod model;
pub mod nn;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use decoder::{DecoderState, Generation};
pub use dsp::{MelSpectrogram, MelStats, Waveform};
pub use embedding::{embed_mixed, EmbeddedSequence, EmbeddingTables};
pub use encoder::EncoderOutput;
pub use frontend::{Lexicon, MixedSequence, SymbolInventory, UtteranceRecord};
pub use model::{Mode, ModelConfig, ModelError, ParamStore};
pub use nn::{Tensor, LstmCellState};
