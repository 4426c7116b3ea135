use std::collections::HashMap;

use super::normalize::PUNCTUATION;

/// The 39 ARPAbet phonemes, stress markers removed.
pub const PHONEMES: [&str; 39] = [
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er", "ey", "f", "g", "hh", "ih", "iy", "jh", "k",
    "l", "m", "n", "ng", "ow", "oy", "p", "r", "s", "sh", "t", "th", "uh", "uw", "v", "w", "y", "z", "zh",
];

/// Shared size of the character and phoneme tables.
pub const VOCAB_SIZE: usize = 49;

/// Character and phoneme symbol tables.
///
/// Both inventories are padded with reserved symbols to a common size so
/// one id space serves both embedding tables. Id 0 is a reserved padding
/// symbol in each.
#[derive(Clone, Debug)]
pub struct SymbolInventory {
    char_symbols: Vec<String>,
    phone_symbols: Vec<String>,
    char_ids: HashMap<char, usize>,
    phone_ids: HashMap<String, usize>,
}

impl Default for SymbolInventory {
    fn default() -> Self {
        let mut chars: Vec<String> = vec!["<pad>".into(), " ".into(), "'".into()];
        chars.extend(PUNCTUATION.iter().map(|c| c.to_string()));
        chars.extend(('a'..='z').map(|c| c.to_string()));
        let mut phones: Vec<String> = vec!["<pad>".into()];
        phones.extend(PHONEMES.iter().map(|p| p.to_string()));
        Self::from_symbols(chars, phones, VOCAB_SIZE)
    }
}

impl SymbolInventory {
    /// Builds an inventory, padding both lists with `<rN>` symbols up to
    /// `max(min_size, |chars|, |phones|)`.
    pub fn from_symbols(mut chars: Vec<String>, mut phones: Vec<String>, min_size: usize) -> Self {
        let size = min_size.max(chars.len()).max(phones.len());
        for list in [&mut chars, &mut phones] {
            while list.len() < size {
                list.push(format!("<r{}>", list.len()));
            }
        }
        let char_ids = chars
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Some((c, i)),
                    _ => None,
                }
            })
            .collect();
        let phone_ids = phones.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self {
            char_symbols: chars,
            phone_symbols: phones,
            char_ids,
            phone_ids,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.char_symbols.len().max(self.phone_symbols.len())
    }

    pub fn char_symbols(&self) -> &[String] {
        &self.char_symbols
    }

    pub fn phone_symbols(&self) -> &[String] {
        &self.phone_symbols
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        self.char_ids.get(&c).copied()
    }

    pub fn phone_id(&self, p: &str) -> Option<usize> {
        self.phone_ids.get(p).copied()
    }

    pub fn is_phoneme(&self, p: &str) -> bool {
        self.phone_ids.contains_key(p) && !p.starts_with('<')
    }
}
