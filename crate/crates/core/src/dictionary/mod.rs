//! Pronunciation dictionary: every character with its candidate pronunciations and
//! the gloss text attached to each one.
//!
//! The text form is one JSON object per line after a `dictg2p-dict v1` header:
//!
//! ```text
//! dictg2p-dict v1
//! {"char":"乐","prons":[{"p":"L E4","gloss":"快乐；欢乐"},{"p":"Y UE4","gloss":"音乐"}]}
//! ```
//!
//! Several senses listed under the same pronunciation are merged into one gloss entry.

mod parse;
mod snapshot;

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::BinError;

pub use parse::{parse_dictionary, parse_dictionary_lenient, write_dictionary, ParseOptions, ParseReport};
pub use snapshot::{decode_snapshot, encode_snapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

pub const HEADER: &str = "dictg2p-dict v1";
/// Phoneme emitted for characters missing from the dictionary.
pub const UNKNOWN_PHONEME: &str = "<unk>";
pub const DEFAULT_MAX_GLOSS_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pronunciation {
    pub phonemes: Vec<String>,
    /// Position `j` among the character's pronunciations.
    pub index: usize,
}

impl Pronunciation {
    pub fn new(phonemes: Vec<String>, index: usize) -> Self {
        Self { phonemes, index }
    }

    /// Space-separated form, e.g. `"H UO3"`.
    pub fn text(&self) -> String {
        self.phonemes.join(" ")
    }

    /// Tone digit carried by the last phoneme, if any.
    pub fn tone(&self) -> Option<u32> {
        self.phonemes.last()?.chars().last()?.to_digit(10)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossEntry {
    pub tokens: Vec<char>,
}

impl GlossEntry {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictEntry {
    pub pron: Pronunciation,
    pub gloss: GlossEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterRecord {
    pub character: char,
    pub entries: Vec<DictEntry>,
}

impl CharacterRecord {
    /// Number of candidate pronunciations `m`.
    pub fn pron_count(&self) -> usize {
        self.entries.len()
    }

    pub fn is_polyphone(&self) -> bool {
        self.entries.len() > 1
    }

    pub fn total_gloss_tokens(&self) -> usize {
        self.entries.iter().map(|e| e.gloss.token_count()).sum()
    }

    pub fn pronunciation(&self, j: usize) -> Option<&Pronunciation> {
        self.entries.get(j).map(|e| &e.pron)
    }

    /// Reserved record used for characters outside the dictionary.
    pub fn unknown(ch: char) -> Self {
        Self {
            character: ch,
            entries: vec![DictEntry {
                pron: Pronunciation::new(vec![UNKNOWN_PHONEME.to_string()], 0),
                gloss: GlossEntry { tokens: vec![ch] },
            }],
        }
    }

    fn validate(&self) -> Result<(), RecordError> {
        if self.entries.is_empty() {
            return Err(RecordError::NoPronunciations);
        }
        for (j, e) in self.entries.iter().enumerate() {
            if e.pron.index != j {
                return Err(RecordError::PronIndex {
                    expected: j,
                    found: e.pron.index,
                });
            }
            if e.pron.phonemes.is_empty() || e.pron.phonemes.iter().any(String::is_empty) {
                return Err(RecordError::EmptyPhonemes(j));
            }
            if e.gloss.tokens.is_empty() {
                return Err(RecordError::EmptyGloss(j));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("record has no pronunciations")]
    NoPronunciations,
    #[error("pronunciation {0} has no phonemes")]
    EmptyPhonemes(usize),
    #[error("pronunciation {0} has an empty gloss")]
    EmptyGloss(usize),
    #[error("pronunciation index {found} at position {expected}")]
    PronIndex { expected: usize, found: usize },
    #[error("`{0}` is not a single character")]
    NotSingleCharacter(String),
    #[error("unknown escape sequence: {0}")]
    UnknownEscape(String),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("empty line")]
    EmptyLine,
    #[error("duplicate character {ch} (first defined on line {first_line})")]
    DuplicateCharacter { ch: char, first_line: usize },
}

#[derive(Debug, Error)]
pub enum DictError {
    #[error("line {line}: {source}")]
    Line { line: usize, source: RecordError },
    #[error("missing `{HEADER}` header, found {0:?}")]
    MissingHeader(String),
    #[error("duplicate character {0}")]
    DuplicateCharacter(char),
    #[error("record for {ch}: {source}")]
    InvalidRecord { ch: char, source: RecordError },
    #[error("character {0} is not in the dictionary")]
    OutOfVocabulary(char),
    #[error("corrupt dictionary snapshot: {0}")]
    Snapshot(#[from] BinError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable character → record store.
#[derive(Debug, Clone)]
pub struct Dictionary {
    records: Vec<CharacterRecord>,
    index: HashMap<char, usize>,
    phoneme_inventory: BTreeSet<String>,
}

impl PartialEq for Dictionary {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records && self.phoneme_inventory == other.phoneme_inventory
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictStats {
    pub characters: usize,
    pub polyphones: usize,
    pub max_prons: usize,
    pub max_gloss_tokens: usize,
    pub phonemes: usize,
}

impl std::fmt::Display for DictStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "characters={} polyphones={} max_prons={} max_gloss_tokens={} phonemes={}",
            self.characters, self.polyphones, self.max_prons, self.max_gloss_tokens, self.phonemes
        )
    }
}

impl Dictionary {
    pub fn from_records(records: Vec<CharacterRecord>) -> Result<Self, DictError> {
        let mut index = HashMap::with_capacity(records.len());
        let mut phoneme_inventory = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            r.validate().map_err(|source| DictError::InvalidRecord {
                ch: r.character,
                source,
            })?;
            if index.insert(r.character, i).is_some() {
                return Err(DictError::DuplicateCharacter(r.character));
            }
            for e in &r.entries {
                phoneme_inventory.extend(e.pron.phonemes.iter().cloned());
            }
        }
        Ok(Self {
            records,
            index,
            phoneme_inventory,
        })
    }

    pub fn empty() -> Self {
        Self::from_records(Vec::new()).expect("empty dictionary is valid")
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CharacterRecord] {
        &self.records
    }

    pub fn phoneme_inventory(&self) -> &BTreeSet<String> {
        &self.phoneme_inventory
    }

    pub fn contains(&self, ch: char) -> bool {
        self.index.contains_key(&ch)
    }

    /// Position of `ch` in record order.
    pub fn position(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    pub fn lookup(&self, ch: char) -> Result<&CharacterRecord, DictError> {
        self.index
            .get(&ch)
            .map(|&i| &self.records[i])
            .ok_or(DictError::OutOfVocabulary(ch))
    }

    /// Like [`Dictionary::lookup`] but falls back to [`CharacterRecord::unknown`].
    pub fn lookup_or_unknown(&self, ch: char) -> Cow<'_, CharacterRecord> {
        match self.index.get(&ch) {
            Some(&i) => Cow::Borrowed(&self.records[i]),
            None => Cow::Owned(CharacterRecord::unknown(ch)),
        }
    }

    pub fn stats(&self) -> DictStats {
        DictStats {
            characters: self.records.len(),
            polyphones: self.records.iter().filter(|r| r.is_polyphone()).count(),
            max_prons: self.records.iter().map(CharacterRecord::pron_count).max().unwrap_or(0),
            max_gloss_tokens: self
                .records
                .iter()
                .flat_map(|r| r.entries.iter().map(|e| e.gloss.token_count()))
                .max()
                .unwrap_or(0),
            phonemes: self.phoneme_inventory.len(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DictError> {
        std::fs::write(path, encode_snapshot(self))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DictError> {
        decode_snapshot(&std::fs::read(path)?)
    }

    /// Reads the line-delimited text form.
    pub fn load_text(path: impl AsRef<Path>) -> Result<Self, DictError> {
        let f = std::fs::File::open(path)?;
        parse_dictionary(std::io::BufReader::new(f), &ParseOptions::default())
    }

    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<(), DictError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        write_dictionary(self, &mut w)?;
        Ok(())
    }

    /// Loads either format, telling them apart by the snapshot magic.
    pub fn load_any(path: impl AsRef<Path>) -> Result<Self, DictError> {
        let bytes = std::fs::read(&path)?;
        if bytes.starts_with(SNAPSHOT_MAGIC) {
            decode_snapshot(&bytes)
        } else {
            parse_dictionary(bytes.as_slice(), &ParseOptions::default())
        }
    }
}

/// Dictionary-statistics free function form.
pub fn dictionary_stats(dict: &Dictionary) -> DictStats {
    dict.stats()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(ch: char, prons: &[&str]) -> CharacterRecord {
        CharacterRecord {
            character: ch,
            entries: prons
                .iter()
                .enumerate()
                .map(|(j, p)| DictEntry {
                    pron: Pronunciation::new(p.split(' ').map(String::from).collect(), j),
                    gloss: GlossEntry { tokens: vec!['x'; j + 1] },
                })
                .collect(),
        }
    }

    #[test]
    fn stats_count_polyphones() {
        let d = Dictionary::from_records(vec![record('火', &["H UO3"]), record('行', &["X ING2", "H ANG2"])]).unwrap();
        let s = d.stats();
        assert_eq!(s.characters, 2);
        assert_eq!(s.polyphones, 1);
        assert_eq!(s.max_prons, 2);
        assert_eq!(s.max_gloss_tokens, 2);
        assert_eq!(s.phonemes, 5);
    }

    #[test]
    fn empty_stats() {
        let s = Dictionary::empty().stats();
        assert_eq!(s.characters, 0);
        assert_eq!(s.polyphones, 0);
    }

    #[test]
    fn lookup_and_oov() {
        let d = Dictionary::from_records(vec![record('火', &["H UO3"])]).unwrap();
        assert_eq!(d.lookup('火').unwrap().pron_count(), 1);
        assert!(matches!(d.lookup('水'), Err(DictError::OutOfVocabulary('水'))));
        let unk = d.lookup_or_unknown('水');
        assert_eq!(unk.entries[0].pron.phonemes, vec![UNKNOWN_PHONEME.to_string()]);
    }

    #[test]
    fn duplicate_rejected() {
        let r = Dictionary::from_records(vec![record('火', &["H UO3"]), record('火', &["H UO3"])]);
        assert!(matches!(r, Err(DictError::DuplicateCharacter('火'))));
    }

    #[test]
    fn tone_from_last_phoneme() {
        assert_eq!(Pronunciation::new(vec!["D".into(), "UAN4".into()], 0).tone(), Some(4));
        assert_eq!(Pronunciation::new(vec!["<unk>".into()], 0).tone(), None);
    }
}
