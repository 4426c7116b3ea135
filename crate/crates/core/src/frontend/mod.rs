//! Text frontend: normalization, lexicon ingestion and word-level
//! character/phoneme mixing.

mod inventory;
mod lexicon;
mod mixing;
mod normalize;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

pub use inventory::{SymbolInventory, PHONEMES, VOCAB_SIZE};
pub use lexicon::{load_lexicon, Lexicon};
pub use mixing::{encode_fixed, mix_with_choices, mix_words, words, EncodeMode, MixedSequence, Rendering, SpanSource, WordSpan};
pub use normalize::{cardinal, normalize_text};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FrontendError {
    #[error("malformed line {0}")]
    MalformedLine(usize),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed manifest line {0}")]
    ManifestLine(usize),
    #[error("utterance {0:?} has no words")]
    EmptyUtterance(String),
    #[error("symbol {0:?} is not in the character inventory")]
    UnknownSymbol(char),
    #[error("phoneme {0:?} is not in the inventory")]
    UnknownPhoneme(String),
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
}

impl SymbolInventory {
    /// The default inventory shared by the whole pipeline.
    pub fn standard() -> &'static SymbolInventory {
        static INV: OnceLock<SymbolInventory> = OnceLock::new();
        INV.get_or_init(SymbolInventory::default)
    }
}

/// One transcript with its audio location.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub raw_text: String,
    pub normalized_text: String,
    pub audio_path: PathBuf,
    pub char_words: Vec<String>,
    /// Per-word phonemes, present only when the lexicon covers every word.
    pub phone_words: Option<Vec<Vec<String>>>,
}

impl UtteranceRecord {
    /// Normalizes `text` and splits it into words.
    pub fn from_text(id: &str, text: &str, lexicon: Option<&Lexicon>) -> Self {
        Self::from_parts(id, text, &normalize_text(text), PathBuf::new(), lexicon)
    }

    /// Builds a record from already normalized text.
    pub fn from_parts(id: &str, raw: &str, normalized: &str, audio_path: PathBuf, lexicon: Option<&Lexicon>) -> Self {
        let char_words = words(normalized);
        let phone_words = lexicon.and_then(|lex| {
            char_words
                .iter()
                .map(|w| lex.get(w).map(<[String]>::to_vec))
                .collect::<Option<Vec<_>>>()
        });
        Self {
            id: id.to_string(),
            raw_text: raw.to_string(),
            normalized_text: normalized.to_string(),
            audio_path,
            char_words,
            phone_words,
        }
    }
}

/// Parses LJSpeech-style `id|raw_text|normalized_text` lines.
///
/// The normalized column (or the raw one when it is empty) is passed
/// through [`normalize_text`]; audio is expected at `wav_dir/<id>.wav`.
pub fn parse_manifest(text: &str, wav_dir: &Path, lexicon: Option<&Lexicon>) -> Result<Vec<UtteranceRecord>, FrontendError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, '|').collect();
        if fields.len() < 2 || fields[0].trim().is_empty() {
            return Err(FrontendError::ManifestLine(i + 1));
        }
        let id = fields[0].trim();
        let raw = fields[1];
        let source = fields.get(2).filter(|s| !s.trim().is_empty()).copied().unwrap_or(raw);
        let normalized = normalize_text(source);
        out.push(UtteranceRecord::from_parts(
            id,
            raw,
            &normalized,
            wav_dir.join(format!("{id}.wav")),
            lexicon,
        ));
    }
    Ok(out)
}
