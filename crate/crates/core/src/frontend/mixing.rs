use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FrontendError, Lexicon, SymbolInventory, UtteranceRecord};

/// Where a span of a [`MixedSequence`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanSource {
    /// A word spelled out in characters.
    Chars,
    /// A word rendered as its lexicon phonemes.
    Phones,
    /// A space or punctuation character.
    Separator,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
    pub source: SpanSource,
}

/// Interleaved character/phoneme ids with a 0/1 mask (1 = phoneme).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedSequence {
    pub symbols: Vec<usize>,
    pub mask: Vec<u8>,
    pub word_spans: Vec<WordSpan>,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Human-readable rendering, phonemes marked with `@` as in `@k@ah@t`.
    pub fn display(&self, inv: &SymbolInventory) -> String {
        let mut out = String::new();
        for span in &self.word_spans {
            for i in span.start..span.end {
                match span.source {
                    SpanSource::Phones => {
                        out.push('@');
                        out.push_str(&inv.phone_symbols()[self.symbols[i]]);
                    }
                    _ => out.push_str(&inv.char_symbols()[self.symbols[i]]),
                }
            }
        }
        out
    }
}

/// Choice for one word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rendering {
    Chars,
    Phones,
}

/// Fixed inference-time encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    /// Every word as characters.
    Chars,
    /// Phonemes where the lexicon has the word, characters otherwise.
    Pwcb,
}

enum Piece<'a> {
    Word(&'a str),
    Sep(char),
}

fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let in_word = c.is_alphabetic() || c == '\'';
        match (in_word, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Piece::Word(&text[s..i]));
                start = None;
                out.push(Piece::Sep(c));
            }
            (false, None) => out.push(Piece::Sep(c)),
            (true, Some(_)) => {}
        }
    }
    if let Some(s) = start {
        out.push(Piece::Word(&text[s..]));
    }
    out
}

/// Words of a normalized transcript, in order.
pub fn words(text: &str) -> Vec<String> {
    pieces(text)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Word(w) => Some(w.to_string()),
            Piece::Sep(_) => None,
        })
        .collect()
}

/// Renders each word with `choose(word_index, word)`. A phoneme choice for a
/// word missing from the lexicon falls back to characters.
fn render<F>(record: &UtteranceRecord, lexicon: &Lexicon, mut choose: F) -> Result<MixedSequence, FrontendError>
where
    F: FnMut(usize, &str) -> Rendering,
{
    let inv = SymbolInventory::standard();
    let parts = pieces(&record.normalized_text);
    if !parts.iter().any(|p| matches!(p, Piece::Word(_))) {
        return Err(FrontendError::EmptyUtterance(record.id.clone()));
    }
    let mut seq = MixedSequence {
        symbols: Vec::new(),
        mask: Vec::new(),
        word_spans: Vec::new(),
    };
    let char_id = |c: char| inv.char_id(c).ok_or(FrontendError::UnknownSymbol(c));
    let mut word_index = 0;
    for part in parts {
        let start = seq.symbols.len();
        let source = match part {
            Piece::Sep(c) => {
                seq.symbols.push(char_id(c)?);
                seq.mask.push(0);
                SpanSource::Separator
            }
            Piece::Word(w) => {
                let choice = choose(word_index, w);
                word_index += 1;
                match (choice, lexicon.get(w)) {
                    (Rendering::Phones, Some(phones)) => {
                        for p in phones {
                            let id = inv
                                .phone_id(p)
                                .ok_or_else(|| FrontendError::UnknownPhoneme(p.clone()))?;
                            seq.symbols.push(id);
                            seq.mask.push(1);
                        }
                        SpanSource::Phones
                    }
                    _ => {
                        for c in w.chars() {
                            seq.symbols.push(char_id(c)?);
                            seq.mask.push(0);
                        }
                        SpanSource::Chars
                    }
                }
            }
        };
        seq.word_spans.push(WordSpan {
            start,
            end: seq.symbols.len(),
            source,
        });
    }
    Ok(seq)
}

/// Word-level random mixing: each word independently becomes phonemes with
/// probability `p_phone` (when the lexicon knows it), characters otherwise.
///
/// One uniform draw is consumed per word, in order, whether or not the word
/// is in the lexicon.
pub fn mix_words<R: Rng + ?Sized>(
    record: &UtteranceRecord,
    lexicon: &Lexicon,
    p_phone: f64,
    rng: &mut R,
) -> Result<MixedSequence, FrontendError> {
    if !(0.0..=1.0).contains(&p_phone) {
        return Err(FrontendError::BadProbability(p_phone));
    }
    render(record, lexicon, |_, _| {
        if rng.gen::<f64>() < p_phone {
            Rendering::Phones
        } else {
            Rendering::Chars
        }
    })
}

/// Mixing with explicit per-word choices; missing choices mean characters.
pub fn mix_with_choices(
    record: &UtteranceRecord,
    lexicon: &Lexicon,
    choices: &[Rendering],
) -> Result<MixedSequence, FrontendError> {
    render(record, lexicon, |i, _| choices.get(i).copied().unwrap_or(Rendering::Chars))
}

pub fn encode_fixed(record: &UtteranceRecord, lexicon: &Lexicon, mode: EncodeMode) -> Result<MixedSequence, FrontendError> {
    render(record, lexicon, |_, _| match mode {
        EncodeMode::Chars => Rendering::Chars,
        EncodeMode::Pwcb => Rendering::Phones,
    })
}
