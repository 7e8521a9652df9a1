//! Gloss-token key vectors, one row per `(character, pronunciation, token)`.
//!
//! Key import files (`DKEY`) hold precomputed vectors, e.g. averaged language-model
//! layers: magic, `u32` version, `u32` d_model, `u64` row count, then per row the
//! character as a `u32` scalar value, `u32` pronunciation index, `u32` token index and
//! `d_model` little-endian `f32` values.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::dictionary::{CharacterRecord, Dictionary};
use crate::numerics::{Real, Tensor};

use super::vocab::CharVocab;
use super::EncoderError;

pub const KEY_MAGIC: &[u8; 4] = b"DKEY";
pub const KEY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct KeyRow {
    pub character: char,
    pub pron_index: u32,
    pub token_index: u32,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyFile {
    pub d_model: usize,
    pub rows: Vec<KeyRow>,
}

impl KeyFile {
    pub fn encode(&self) -> Result<Vec<u8>, EncoderError> {
        let mut w = ByteWriter::with_header(KEY_MAGIC, KEY_VERSION);
        w.u32(self.d_model as u32);
        w.u64(self.rows.len() as u64);
        for r in &self.rows {
            if r.vector.len() != self.d_model {
                return Err(EncoderError::KeyWidth {
                    expected: self.d_model,
                    found: r.vector.len(),
                });
            }
            w.u32(r.character as u32);
            w.u32(r.pron_index);
            w.u32(r.token_index);
            for &v in &r.vector {
                w.f32(v);
            }
        }
        Ok(w.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EncoderError> {
        let mut r = ByteReader::with_header(bytes, KEY_MAGIC, KEY_VERSION)?;
        let d_model = r.u32()? as usize;
        let n = r.count(12 + 4 * d_model)?;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let character = r.char()?;
            let pron_index = r.u32()?;
            let token_index = r.u32()?;
            let vector = (0..d_model).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            rows.push(KeyRow {
                character,
                pron_index,
                token_index,
                vector,
            });
        }
        r.finish()?;
        Ok(Self { d_model, rows })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KeyMode {
    /// Keys are rows of a learned gloss-token embedding table.
    #[default]
    Trainable,
    /// Keys come from an import file and never change.
    Imported,
}

impl std::str::FromStr for KeyMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trainable" => Ok(KeyMode::Trainable),
            "imported" | "frozen" | "frozen-oracle" => Ok(KeyMode::Imported),
            other => Err(format!("unknown key mode `{other}` (expected trainable or imported)")),
        }
    }
}

impl std::fmt::Display for KeyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KeyMode::Trainable => "trainable",
            KeyMode::Imported => "imported",
        })
    }
}

/// Flattened key rows for the whole dictionary. Record `r` owns rows `span(r)`, in
/// `(pronunciation, token)` order given by `legend(r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyStore<F> {
    d_model: usize,
    mode: KeyMode,
    spans: Vec<Range<usize>>,
    legends: Vec<Vec<(usize, usize)>>,
    token_ids: Vec<usize>,
    vectors: Option<Tensor<F>>,
}

fn layout(dict: &Dictionary) -> (Vec<Range<usize>>, Vec<Vec<(usize, usize)>>) {
    let mut spans = Vec::with_capacity(dict.len());
    let mut legends = Vec::with_capacity(dict.len());
    let mut start = 0;
    for r in dict.records() {
        let legend = record_legend(r);
        spans.push(start..start + legend.len());
        start += legend.len();
        legends.push(legend);
    }
    (spans, legends)
}

/// `(pronunciation, token)` pairs of a record in row order.
pub fn record_legend(r: &CharacterRecord) -> Vec<(usize, usize)> {
    r.entries
        .iter()
        .enumerate()
        .flat_map(|(j, e)| (0..e.gloss.token_count()).map(move |k| (j, k)))
        .collect()
}

impl<F: Real> KeyStore<F> {
    /// Keys tied to a gloss-token embedding table indexed by `vocab`.
    pub fn trainable(dict: &Dictionary, vocab: &CharVocab, d_model: usize) -> Self {
        let (spans, legends) = layout(dict);
        let token_ids = dict
            .records()
            .iter()
            .flat_map(|r| r.entries.iter().flat_map(|e| e.gloss.tokens.iter().map(|&t| vocab.id(t))))
            .collect();
        Self {
            d_model,
            mode: KeyMode::Trainable,
            spans,
            legends,
            token_ids,
            vectors: None,
        }
    }

    /// Frozen keys read from an import file that must cover every gloss token of `dict`.
    pub fn imported(dict: &Dictionary, vocab: &CharVocab, file: &KeyFile, d_model: usize) -> Result<Self, EncoderError> {
        if file.d_model != d_model {
            return Err(EncoderError::KeyWidth {
                expected: d_model,
                found: file.d_model,
            });
        }
        let mut by_slot: HashMap<(char, u32, u32), &[f32]> = HashMap::with_capacity(file.rows.len());
        for row in &file.rows {
            if row.vector.len() != d_model {
                return Err(EncoderError::KeyWidth {
                    expected: d_model,
                    found: row.vector.len(),
                });
            }
            let slot = (row.character, row.pron_index, row.token_index);
            if by_slot.insert(slot, &row.vector).is_some() {
                return Err(EncoderError::DuplicateKeyRow {
                    character: row.character,
                    pron_index: row.pron_index as usize,
                    token_index: row.token_index as usize,
                });
            }
        }
        let mut store = Self::trainable(dict, vocab, d_model);
        let total = store.token_ids.len();
        let mut data = Vec::with_capacity(total * d_model);
        for (r, legend) in dict.records().iter().zip(&store.legends) {
            for &(j, k) in legend {
                let v = by_slot.remove(&(r.character, j as u32, k as u32)).ok_or(EncoderError::MissingKeyRow {
                    character: r.character,
                    pron_index: j,
                    token_index: k,
                })?;
                data.extend(v.iter().map(|&x| F::from_f64_lossy(x as f64)));
            }
        }
        if let Some(((character, j, k), _)) = by_slot.into_iter().min_by_key(|(slot, _)| *slot) {
            return Err(EncoderError::UnexpectedKeyRow {
                character,
                pron_index: j as usize,
                token_index: k as usize,
            });
        }
        store.mode = KeyMode::Imported;
        store.vectors = Some(Tensor::new(vec![total, d_model], data)?);
        Ok(store)
    }

    pub fn mode(&self) -> KeyMode {
        self.mode
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn total_rows(&self) -> usize {
        self.token_ids.len()
    }

    pub fn span(&self, record: usize) -> Range<usize> {
        self.spans[record].clone()
    }

    pub fn legend(&self, record: usize) -> &[(usize, usize)] {
        &self.legends[record]
    }

    /// Gloss-token vocabulary ids of every row, used in trainable mode.
    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    /// Imported vectors, `[total_rows, d_model]`.
    pub fn vectors(&self) -> Option<&Tensor<F>> {
        self.vectors.as_ref()
    }

    /// Rows of record `record` as an owned matrix, reading trainable keys from `table`.
    pub fn matrix(&self, record: usize, table: Option<&Tensor<F>>) -> Option<Tensor<F>> {
        let span = self.span(record);
        let d = self.d_model;
        let data: Vec<F> = match (&self.vectors, table) {
            (Some(v), _) => v.data()[span.start * d..span.end * d].to_vec(),
            (None, Some(t)) => self.token_ids[span.clone()]
                .iter()
                .flat_map(|&id| t.row(id).iter().copied())
                .collect(),
            (None, None) => return None,
        };
        Tensor::new(vec![span.len(), d], data).ok()
    }

    /// Export of imported keys; `None` in trainable mode.
    pub fn to_key_file(&self, dict: &Dictionary) -> Option<KeyFile> {
        let v = self.vectors.as_ref()?;
        let d = self.d_model;
        let mut rows = Vec::with_capacity(self.total_rows());
        for (ri, r) in dict.records().iter().enumerate() {
            for (off, &(j, k)) in self.legends[ri].iter().enumerate() {
                let row = self.spans[ri].start + off;
                rows.push(KeyRow {
                    character: r.character,
                    pron_index: j as u32,
                    token_index: k as u32,
                    vector: v.data()[row * d..(row + 1) * d].iter().map(|x| x.as_f64() as f32).collect(),
                });
            }
        }
        Some(KeyFile { d_model: d, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{parse_dictionary, ParseOptions, HEADER};

    fn dict() -> Dictionary {
        let text = format!(
            "{HEADER}\n{}\n{}\n",
            r#"{"char":"行","prons":[{"p":"X ING2","gloss":"走路"},{"p":"H ANG2","gloss":"行"}]}"#,
            r#"{"char":"路","prons":[{"p":"L U4","gloss":"走"}]}"#
        );
        parse_dictionary(text.as_bytes(), &ParseOptions::default()).unwrap()
    }

    fn file_for(d: &Dictionary, width: usize) -> KeyFile {
        let mut rows = Vec::new();
        for r in d.records() {
            for (j, k) in record_legend(r) {
                rows.push(KeyRow {
                    character: r.character,
                    pron_index: j as u32,
                    token_index: k as u32,
                    vector: (0..width).map(|i| (rows.len() * 10 + i) as f32).collect(),
                });
            }
        }
        KeyFile { d_model: width, rows }
    }

    #[test]
    fn trainable_rows_tied_by_token() {
        let d = dict();
        let vocab = CharVocab::from_dictionary(&d);
        let ks = KeyStore::<f64>::trainable(&d, &vocab, 4);
        assert_eq!(ks.total_rows(), 4);
        assert_eq!(ks.legend(0), &[(0, 0), (0, 1), (1, 0)]);
        // "走" appears in both records and maps to the same table row
        let ids = ks.token_ids();
        assert_eq!(ids[0], ids[3]);
        let table = crate::numerics::normal::<f64, _>(&mut rand::rng(), vec![vocab.len(), 4], 1.0);
        let m0 = ks.matrix(0, Some(&table)).unwrap();
        let m1 = ks.matrix(1, Some(&table)).unwrap();
        assert_eq!(m0.row(0), m1.row(0));
    }

    #[test]
    fn imported_three_row_file_round_trips() {
        let d = Dictionary::from_records(vec![dict().records()[0].clone()]).unwrap();
        let vocab = CharVocab::from_dictionary(&d);
        let file = file_for(&d, 3);
        assert_eq!(file.rows.len(), 3);
        let ks = KeyStore::<f32>::imported(&d, &vocab, &file, 3).unwrap();
        assert_eq!(ks.to_key_file(&d).unwrap(), file);
        let bytes = file.encode().unwrap();
        assert_eq!(KeyFile::decode(&bytes).unwrap(), file);
    }

    #[test]
    fn imported_errors() {
        let d = dict();
        let vocab = CharVocab::from_dictionary(&d);
        let mut file = file_for(&d, 2);
        assert!(matches!(
            KeyStore::<f64>::imported(&d, &vocab, &file, 3),
            Err(EncoderError::KeyWidth { .. })
        ));
        let extra = KeyRow {
            character: '车',
            pron_index: 0,
            token_index: 0,
            vector: vec![0.0; 2],
        };
        file.rows.push(extra);
        assert!(matches!(
            KeyStore::<f64>::imported(&d, &vocab, &file, 2),
            Err(EncoderError::UnexpectedKeyRow { character: '车', .. })
        ));
        file.rows.truncate(2);
        assert!(matches!(
            KeyStore::<f64>::imported(&d, &vocab, &file, 2),
            Err(EncoderError::MissingKeyRow { .. })
        ));
    }

    #[test]
    fn truncated_key_file_is_corrupt() {
        let bytes = file_for(&dict(), 2).encode().unwrap();
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(KeyFile::decode(&bytes[..cut]).is_err());
        }
    }
}
