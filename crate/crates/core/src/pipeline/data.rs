//! Training sentences, batches and the on-disk corpus and label formats.
//!
//! Corpus files hold one JSON object per line:
//! `{"id":3,"split":"train","text":"…","targets":[[…],…]}` with one target row per
//! character. Label files are tab separated `sentence_id  position  pron_index` lines
//! and are read only by evaluation code.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tensor};

use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance<F> {
    pub id: usize,
    pub split: Split,
    pub chars: Vec<char>,
    /// `[l, feature_dim]`
    pub targets: Tensor<F>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceLine {
    id: usize,
    split: Split,
    text: String,
    targets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus<F> {
    pub utterances: Vec<Utterance<F>>,
}

impl<F: Real> Corpus<F> {
    pub fn new(utterances: Vec<Utterance<F>>) -> Self {
        Self { utterances }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn split(&self, split: Split) -> Corpus<F> {
        Corpus::new(self.utterances.iter().filter(|u| u.split == split).cloned().collect())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.targets.cols())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            let line = UtteranceLine {
                id: u.id,
                split: u.split,
                text: u.chars.iter().collect(),
                targets: (0..u.targets.rows())
                    .map(|r| u.targets.row(r).iter().map(|v| v.as_f64()).collect())
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&line).expect("corpus lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, PipelineError> {
        let mut utterances = Vec::new();
        let mut width = None;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| PipelineError::Data(format!("corpus line {}: {reason}", n + 1));
            let u: UtteranceLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let chars: Vec<char> = u.text.chars().collect();
            if chars.is_empty() || chars.len() != u.targets.len() {
                return Err(bad(format!("{} characters but {} target rows", chars.len(), u.targets.len())));
            }
            let w = u.targets[0].len();
            if w == 0 || u.targets.iter().any(|r| r.len() != w) || width.is_some_and(|x| x != w) {
                return Err(bad("inconsistent target width".into()));
            }
            width = Some(w);
            let data = u.targets.iter().flatten().map(|&v| F::from_f64_lossy(v)).collect();
            utterances.push(Utterance {
                id: u.id,
                split: u.split,
                chars,
                targets: Tensor::new(vec![u.targets.len(), w], data)?,
            });
        }
        Ok(Self { utterances })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::from_reader(BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

/// Ground-truth pronunciation index of every character, keyed by sentence id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Labels {
    pub by_sentence: BTreeMap<usize, Vec<usize>>,
}

impl Labels {
    pub fn get(&self, id: usize) -> Option<&[usize]> {
        self.by_sentence.get(&id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, id: usize, labels: Vec<usize>) {
        self.by_sentence.insert(id, labels);
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, labels) in &self.by_sentence {
            for (pos, j) in labels.iter().enumerate() {
                writeln!(out, "{id}\t{pos}\t{j}").expect("writing to a string");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut raw: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || PipelineError::Data(format!("labels line {}: expected `sentence position index`", n + 1));
            let f: Vec<usize> = line
                .split('\t')
                .map(|x| x.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| bad())?;
            let [id, pos, j] = f[..] else { return Err(bad()) };
            if raw.entry(id).or_default().insert(pos, j).is_some() {
                return Err(PipelineError::Data(format!("labels line {}: duplicate position", n + 1)));
            }
        }
        let mut by_sentence = BTreeMap::new();
        for (id, positions) in raw {
            if positions.keys().enumerate().any(|(i, &p)| i != p) {
                return Err(PipelineError::Data(format!("labels for sentence {id} have gaps")));
            }
            by_sentence.insert(id, positions.into_values().collect());
        }
        Ok(Self { by_sentence })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_tsv().as_bytes())?;
        Ok(())
    }
}

/// Sentences padded to the longest one, with a row mask.
///
/// `eval_labels` rides along for monitoring only; nothing on the training path reads
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch<F> {
    pub sentences: Vec<Vec<char>>,
    pub max_len: usize,
    /// `[batch · max_len, feature_dim]`, zero on padding rows.
    pub targets: Tensor<F>,
    /// `true` on real rows.
    pub mask: Vec<bool>,
    pub eval_labels: Option<Vec<Vec<usize>>>,
}

impl<F: Real> TrainingBatch<F> {
    pub fn assemble(utterances: &[&Utterance<F>], labels: Option<&Labels>) -> Result<Self, PipelineError> {
        let first = utterances.first().ok_or(PipelineError::Data("empty batch".into()))?;
        let width = first.targets.cols();
        let max_len = utterances.iter().map(|u| u.chars.len()).max().unwrap_or(0);
        let mut targets = Tensor::zeros(vec![utterances.len() * max_len, width]);
        let mut mask = vec![false; utterances.len() * max_len];
        for (b, u) in utterances.iter().enumerate() {
            if u.targets.cols() != width || u.targets.rows() != u.chars.len() {
                return Err(PipelineError::Data(format!("sentence {} has misaligned targets", u.id)));
            }
            let start = b * max_len;
            targets.data_mut()[start * width..(start + u.chars.len()) * width].copy_from_slice(u.targets.data());
            mask[start..start + u.chars.len()].iter_mut().for_each(|m| *m = true);
        }
        let eval_labels = labels.map(|l| utterances.iter().map(|u| l.get(u.id).unwrap_or(&[]).to_vec()).collect());
        Ok(Self {
            sentences: utterances.iter().map(|u| u.chars.clone()).collect(),
            max_len,
            targets,
            mask,
            eval_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn real_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Target rows of sentence `b`, `[l_b, feature_dim]`.
    pub fn sentence_targets(&self, b: usize) -> Tensor<F> {
        let w = self.targets.cols();
        let l = self.sentences[b].len();
        let start = b * self.max_len * w;
        Tensor::new(vec![l, w], self.targets.data()[start..start + l * w].to_vec()).expect("batch layout")
    }

    pub fn without_labels(&self) -> Self {
        Self {
            eval_labels: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(id: usize, text: &str) -> Utterance<f64> {
        let chars: Vec<char> = text.chars().collect();
        let l = chars.len();
        Utterance {
            id,
            split: Split::Train,
            chars,
            targets: Tensor::new(vec![l, 2], (0..2 * l).map(|x| x as f64 + 0.25).collect()).unwrap(),
        }
    }

    #[test]
    fn corpus_round_trip() {
        let c = Corpus::new(vec![utt(0, "甲乙"), utt(1, "丙")]);
        let back = Corpus::<f64>::from_reader(c.to_jsonl().as_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn labels_round_trip_and_gaps() {
        let mut l = Labels::default();
        l.insert(0, vec![0, 1, 0]);
        l.insert(4, vec![2]);
        assert_eq!(Labels::parse(&l.to_tsv()).unwrap(), l);
        assert!(Labels::parse("0\t1\t0\n").is_err());
        assert!(Labels::parse("0\t0\t0\n0\t0\t1\n").is_err());
    }

    #[test]
    fn batch_padding_and_mask() {
        let (a, b) = (utt(0, "甲乙丙"), utt(1, "丁"));
        let batch = TrainingBatch::assemble(&[&a, &b], None).unwrap();
        assert_eq!(batch.max_len, 3);
        assert_eq!(batch.mask, vec![true, true, true, true, false, false]);
        assert_eq!(batch.real_rows(), 4);
        assert_eq!(batch.sentence_targets(1), b.targets);
        assert!(batch.targets.data()[8..].iter().all(|&v| v == 0.0));
    }
}
