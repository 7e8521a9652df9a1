use std::collections::HashMap;

use crate::dictionary::{Dictionary, UNKNOWN_PHONEME};

/// Dense character ids. Id 0 is reserved for characters outside the vocabulary,
/// then come dictionary characters in record order, then characters that appear only
/// inside glosses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<Option<char>>,
    ids: HashMap<char, usize>,
}

pub const UNK_ID: usize = 0;

impl CharVocab {
    pub fn from_dictionary(dict: &Dictionary) -> Self {
        let mut v = Self {
            chars: vec![None],
            ids: HashMap::new(),
        };
        for r in dict.records() {
            v.insert(r.character);
        }
        for r in dict.records() {
            for e in &r.entries {
                for &t in &e.gloss.tokens {
                    v.insert(t);
                }
            }
        }
        v
    }

    fn insert(&mut self, ch: char) {
        if !self.ids.contains_key(&ch) {
            self.ids.insert(ch, self.chars.len());
            self.chars.push(Some(ch));
        }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.len() <= 1
    }

    pub fn id(&self, ch: char) -> usize {
        self.ids.get(&ch).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, text: &[char]) -> Vec<usize> {
        text.iter().map(|&c| self.id(c)).collect()
    }

    pub fn char(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied().flatten()
    }
}

/// Phoneme symbol ids; id 0 is the unknown phoneme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeVocab {
    symbols: Vec<String>,
    ids: HashMap<String, usize>,
}

impl PhonemeVocab {
    pub fn from_dictionary(dict: &Dictionary) -> Self {
        let mut symbols = vec![UNKNOWN_PHONEME.to_string()];
        symbols.extend(dict.phoneme_inventory().iter().filter(|p| *p != UNKNOWN_PHONEME).cloned());
        let ids = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { symbols, ids }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() <= 1
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.ids.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }
}
