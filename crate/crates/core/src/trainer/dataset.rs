use std::path::Path;

use super::TrainError;
use crate::dsp::{logmel, read_wav, MelSpectrogram, MelStats, N_MELS};
use crate::frontend::{load_lexicon, parse_manifest, FrontendError, Lexicon, SymbolInventory, UtteranceRecord};
use crate::nn::Tensor;

pub const RECORDS_FILE: &str = "records.tsv";
pub const LEXICON_FILE: &str = "lexicon.txt";
pub const MEL_DIR: &str = "mels";

/// An utterance with its normalized log-mel frames `[N × 80]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainUtterance {
    pub record: UtteranceRecord,
    pub frames: Tensor,
}

impl TrainUtterance {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Training utterances, the lexicon used for mixing, and the per-band
/// normalization statistics of this (training) split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<TrainUtterance>,
    pub lexicon: Lexicon,
    pub stats: MelStats,
}

impl Corpus {
    /// Normalizes raw log-mels with statistics computed from them.
    pub fn from_raw(records: Vec<UtteranceRecord>, mels: Vec<MelSpectrogram>, lexicon: Lexicon) -> Result<Self, TrainError> {
        let stats = MelStats::from_spectrograms(&mels);
        Self::with_stats(records, mels, lexicon, stats)
    }

    pub fn with_stats(
        records: Vec<UtteranceRecord>,
        mels: Vec<MelSpectrogram>,
        lexicon: Lexicon,
        stats: MelStats,
    ) -> Result<Self, TrainError> {
        if records.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        if records.len() != mels.len() {
            return Err(TrainError::Invalid("records and spectrograms differ in count".into()));
        }
        let utterances = records
            .into_iter()
            .zip(mels)
            .map(|(record, mel)| TrainUtterance {
                record,
                frames: mel.normalized_with(&stats).frames,
            })
            .collect();
        Ok(Self {
            utterances,
            lexicon,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn frame_counts(&self) -> Vec<usize> {
        self.utterances.iter().map(TrainUtterance::n_frames).collect()
    }

    /// Loads a directory written by [`prepare`].
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let lexicon = load_lexicon(&dir.join(LEXICON_FILE))?;
        let text = read_text(&dir.join(RECORDS_FILE))?;
        let mut records = Vec::new();
        let mut mels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, raw, normalized] = fields[..] else {
                return Err(FrontendError::ManifestLine(i + 1).into());
            };
            let mel_path = dir.join(MEL_DIR).join(format!("{id}.mel"));
            let mut f = std::fs::File::open(&mel_path).map_err(|_| FrontendError::MissingFile(mel_path.clone()))?;
            mels.push(MelSpectrogram::read_from(&mut f)?);
            records.push(UtteranceRecord::from_parts(id, raw, normalized, mel_path, Some(&lexicon)));
        }
        Self::from_raw(records, mels, lexicon)
    }
}

fn read_text(path: &Path) -> Result<String, TrainError> {
    std::fs::read_to_string(path).map_err(|_| FrontendError::MissingFile(path.to_path_buf()).into())
}

/// Outcome of [`prepare`].
#[derive(Clone, Debug, PartialEq)]
pub struct PrepareSummary {
    pub utterances: usize,
    pub frames: usize,
    /// Words across the corpus that the lexicon does not cover.
    pub oov_words: usize,
}

/// Validates an `id|raw|normalized` manifest with audio in `wavs/<id>.wav`
/// next to it, and caches normalized records, the lexicon and raw log-mel
/// features under `out`. Output bytes depend only on the inputs.
pub fn prepare(manifest: &Path, lexicon_path: &Path, out: &Path) -> Result<PrepareSummary, TrainError> {
    let lexicon = load_lexicon(lexicon_path)?;
    let text = read_text(manifest)?;
    let wav_dir = manifest.parent().unwrap_or(Path::new(".")).join("wavs");
    let records = parse_manifest(&text, &wav_dir, Some(&lexicon))?;
    if records.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    std::fs::create_dir_all(out.join(MEL_DIR))?;
    let mut table = String::new();
    let mut summary = PrepareSummary {
        utterances: records.len(),
        frames: 0,
        oov_words: 0,
    };
    let inv = SymbolInventory::standard();
    for rec in &records {
        if rec.id.contains(['\t', '/', '\\']) || rec.raw_text.contains(['\t', '\n']) {
            return Err(TrainError::Invalid(format!("utterance id or text for {:?} is not storable", rec.id)));
        }
        if rec.char_words.is_empty() {
            return Err(FrontendError::EmptyUtterance(rec.id.clone()).into());
        }
        debug_assert!(rec.normalized_text.chars().all(|c| inv.char_id(c).is_some()));
        summary.oov_words += rec.char_words.iter().filter(|w| !lexicon.contains(w)).count();
        let wav = read_wav(&rec.audio_path).map_err(|e| TrainError::Data(format!("{}: {e}", rec.audio_path.display())))?;
        let mel = logmel(&wav, false, None)?;
        debug_assert_eq!(mel.frames.cols(), N_MELS);
        summary.frames += mel.n_frames();
        let mut bytes = Vec::new();
        mel.write_to(&mut bytes)?;
        std::fs::write(out.join(MEL_DIR).join(format!("{}.mel", rec.id)), bytes)?;
        table.push_str(&format!("{}\t{}\t{}\n", rec.id, rec.raw_text, rec.normalized_text));
    }
    std::fs::write(out.join(RECORDS_FILE), table)?;
    std::fs::write(out.join(LEXICON_FILE), lexicon.to_text())?;
    Ok(summary)
}
