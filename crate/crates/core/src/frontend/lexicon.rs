use std::collections::HashMap;
use std::path::Path;

use super::inventory::SymbolInventory;
use super::FrontendError;

/// Word → phoneme list, keyed by lowercase word.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    entries: HashMap<String, Vec<String>>,
    /// Lines skipped because their word was already present.
    pub duplicates: usize,
}

impl Lexicon {
    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, word: &str, phones: Vec<String>) {
        self.entries.insert(word.to_lowercase(), phones);
    }

    /// Canonical dump, sorted by word, that [`Lexicon::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut words: Vec<&String> = self.entries.keys().collect();
        words.sort();
        words
            .into_iter()
            .map(|w| format!("{w}\t{}\n", self.entries[w].join(" ")))
            .collect()
    }

    /// Parses `word<TAB>ph1 ph2 ...` lines. Stress digits are stripped and
    /// symbols lowercased; blank lines are ignored.
    pub fn parse(text: &str, inventory: &SymbolInventory) -> Result<Self, FrontendError> {
        let mut lex = Lexicon::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let Some((word, phones)) = line.split_once('\t') else {
                return Err(FrontendError::MalformedLine(line_no));
            };
            let word = word.trim().to_lowercase();
            if word.is_empty() || word.contains(char::is_whitespace) {
                return Err(FrontendError::MalformedLine(line_no));
            }
            let phones: Vec<String> = phones
                .split_whitespace()
                .map(|p| p.trim_end_matches(|c: char| c.is_ascii_digit()).to_lowercase())
                .collect();
            if phones.is_empty() || phones.iter().any(|p| !inventory.is_phoneme(p)) {
                return Err(FrontendError::MalformedLine(line_no));
            }
            if lex.entries.contains_key(&word) {
                lex.duplicates += 1;
                continue;
            }
            lex.entries.insert(word, phones);
        }
        if lex.duplicates > 0 {
            log::warn!("lexicon: {} duplicate entries ignored", lex.duplicates);
        }
        Ok(lex)
    }
}

/// Reads a lexicon file with the default inventory.
pub fn load_lexicon(path: &Path) -> Result<Lexicon, FrontendError> {
    let text = std::fs::read_to_string(path).map_err(|_| FrontendError::MissingFile(path.to_path_buf()))?;
    Lexicon::parse(&text, &SymbolInventory::default())
}
