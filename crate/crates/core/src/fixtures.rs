//! Small synthetic corpora for tests, benchmarks and demos.
//!
//! Audio comes from the speech-like synthesizer in [`crate::dsp::speechlike`],
//! driven by the lexicon pronunciations of each sentence.

use std::path::Path;

use crate::dsp::{logmel, speechlike, write_wav, DspError, Waveform};
use crate::frontend::{Lexicon, SymbolInventory, UtteranceRecord};
use crate::trainer::{Corpus, TrainError};

/// A handful of common words with ARPAbet pronunciations.
pub const LEXICON_TEXT: &str = "\
a\tAH0
big\tB IH1 G
birds\tB ER1 D Z
blew\tB L UW1
cat\tK AE1 T
dog\tD AO1 G
down\tD AW1 N
fish\tF IH1 SH
green\tG R IY1 N
hill\tHH IH1 L
in\tIH0 N
is\tIH1 Z
mat\tM AE1 T
moon\tM UW1 N
on\tAA1 N
park\tP AA1 R K
ran\tR AE1 N
red\tR EH1 D
river\tR IH1 V ER0
sat\tS AE1 T
sing\tS IH1 NG
sun\tS AH1 N
the\tDH AH0
wind\tW IH1 N D
";

pub const SENTENCES: &[&str] = &[
    "the cat sat.",
    "a red dog ran",
    "birds sing, fish swim",
    "the sun is big",
    "wind blew down the hill",
    "the moon is green",
    "a cat in the park",
    "the river ran down",
    "red fish, green fish",
    "the dog sat on a mat",
    "birds blew in the wind",
    "the big sun sat on the hill",
];

pub fn lexicon() -> Lexicon {
    Lexicon::parse(LEXICON_TEXT, SymbolInventory::standard()).expect("built-in lexicon parses")
}

/// Sentence `i` (cycling) as a record.
pub fn record(i: usize) -> UtteranceRecord {
    let text = SENTENCES[i % SENTENCES.len()];
    UtteranceRecord::from_text(&format!("toy{i:03}"), text, Some(&lexicon()))
}

/// Speech-like audio for a record; words missing from the lexicon are
/// voiced letter by letter as schwas.
pub fn audio(rec: &UtteranceRecord, samples_per_phone: usize, seed: u64) -> Waveform {
    let lex = lexicon();
    let words: Vec<Vec<String>> = rec
        .char_words
        .iter()
        .map(|w| match lex.get(w) {
            Some(p) => p.to_vec(),
            None => w.chars().map(|_| "ah".to_string()).collect(),
        })
        .collect();
    speechlike::utterance(&words, samples_per_phone, seed)
}

/// `n` utterances with raw log-mels, statistics taken from them.
pub fn corpus(n: usize, samples_per_phone: usize, seed: u64) -> Result<Corpus, TrainError> {
    let records: Vec<UtteranceRecord> = (0..n).map(record).collect();
    let mels = records
        .iter()
        .enumerate()
        .map(|(i, r)| logmel(&audio(r, samples_per_phone, seed + i as u64), false, None))
        .collect::<Result<Vec<_>, DspError>>()?;
    Corpus::from_raw(records, mels, lexicon())
}

/// Writes an LJSpeech-style dataset: `metadata.csv`, `wavs/<id>.wav` and
/// `lexicon.txt` under `dir`.
pub fn write_dataset(dir: &Path, n: usize, samples_per_phone: usize, seed: u64) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir.join("wavs"))?;
    let mut manifest = String::new();
    for i in 0..n {
        let rec = record(i);
        let raw = SENTENCES[i % SENTENCES.len()];
        manifest.push_str(&format!("{}|{}|{}\n", rec.id, raw, raw));
        write_wav(&dir.join("wavs").join(format!("{}.wav", rec.id)), &audio(&rec, samples_per_phone, seed + i as u64))?;
    }
    std::fs::write(dir.join("metadata.csv"), manifest)?;
    std::fs::write(dir.join("lexicon.txt"), LEXICON_TEXT)?;
    Ok(())
}
