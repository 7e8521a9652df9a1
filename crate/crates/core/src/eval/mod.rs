//! Objective pronunciation metrics and attention export.
//!
//! PER is the token-level Levenshtein distance summed over sentences and divided by
//! the summed reference length. SER is the fraction of sentences with at least one
//! token error.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Real;
use crate::pipeline::{infer_pronunciations, CharDiagnostics, Corpus, Labels, Model, PipelineError};
use crate::s2pa::RuleSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference corpus is empty")]
    EmptyReference,
    #[error("{predicted} predicted sentences but {reference} references")]
    CountMismatch { predicted: usize, reference: usize },
    #[error("sentence {0} has no labels")]
    MissingLabels(usize),
    #[error("sentence {id}: {labels} labels for {chars} characters")]
    LabelLength { id: usize, labels: usize, chars: usize },
    #[error("character {character:?} has no pronunciation {index}")]
    LabelRange { character: char, index: usize },
    #[error("attention export line {line}: {reason}")]
    Export { line: usize, reason: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn check_counts<T>(predicted: &[T], reference: &[T]) -> Result<(), EvalError> {
    if predicted.len() != reference.len() {
        return Err(EvalError::CountMismatch {
            predicted: predicted.len(),
            reference: reference.len(),
        });
    }
    Ok(())
}

/// Phoneme error rate over a corpus of token sequences.
pub fn per<T: PartialEq>(predicted: &[Vec<T>], reference: &[Vec<T>]) -> Result<f64, EvalError> {
    check_counts(predicted, reference)?;
    let total: usize = reference.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(EvalError::EmptyReference);
    }
    let errors: usize = predicted.iter().zip(reference).map(|(p, r)| edit_distance(p, r)).sum();
    Ok(errors as f64 / total as f64)
}

/// Sentence error rate: a sentence with any number of errors counts once.
pub fn ser<T: PartialEq>(predicted: &[Vec<T>], reference: &[Vec<T>]) -> Result<f64, EvalError> {
    check_counts(predicted, reference)?;
    if reference.is_empty() || reference.iter().all(Vec::is_empty) {
        return Err(EvalError::EmptyReference);
    }
    let wrong = predicted.iter().zip(reference).filter(|(p, r)| p != r).count();
    Ok(wrong as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Always `"objective"`: the numbers are computed from labels, not listeners.
    pub kind: String,
    pub per: f64,
    pub ser: f64,
    pub polyphone_accuracy: f64,
    pub polyphone_occurrences: usize,
    pub sentences: usize,
    /// Per polyphone, `counts[truth][predicted]`.
    pub confusion: BTreeMap<String, Vec<Vec<usize>>>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} metrics over {} sentences", self.kind, self.sentences)?;
        writeln!(f, "PER {:.4}", self.per)?;
        writeln!(f, "SER {:.4}", self.ser)?;
        writeln!(
            f,
            "polyphone accuracy {:.4} ({} occurrences)",
            self.polyphone_accuracy, self.polyphone_occurrences
        )?;
        for (ch, rows) in &self.confusion {
            let rows: Vec<String> = rows
                .iter()
                .map(|r| r.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "))
                .collect();
            writeln!(f, "  {ch}: {}", rows.join(" | "))?;
        }
        Ok(())
    }
}

/// Runs inference over `corpus` and scores it against `labels`.
pub fn evaluate<F: Real>(
    model: &Model<F>,
    corpus: &Corpus<F>,
    labels: &Labels,
    rules: Option<&RuleSet>,
) -> Result<EvalReport, EvalError> {
    let dict = &model.lexicon.dictionary;
    let mut predicted = Vec::with_capacity(corpus.len());
    let mut reference = Vec::with_capacity(corpus.len());
    let mut confusion: BTreeMap<String, Vec<Vec<usize>>> = BTreeMap::new();
    let (mut hit, mut occurrences) = (0usize, 0usize);
    for u in &corpus.utterances {
        let truth = labels.get(u.id).ok_or(EvalError::MissingLabels(u.id))?;
        if truth.len() != u.chars.len() {
            return Err(EvalError::LabelLength {
                id: u.id,
                labels: truth.len(),
                chars: u.chars.len(),
            });
        }
        let inf = infer_pronunciations(model, &u.chars, rules, None)?;
        let mut pred_tokens = Vec::new();
        let mut ref_tokens = Vec::new();
        for ((d, pron), (&ch, &t)) in inf.diagnostics.iter().zip(&inf.pronunciations).zip(u.chars.iter().zip(truth)) {
            let rec = dict.lookup_or_unknown(ch);
            let gold = rec.pronunciation(t).ok_or(EvalError::LabelRange { character: ch, index: t })?;
            pred_tokens.extend(pron.phonemes.iter().cloned());
            ref_tokens.extend(gold.phonemes.iter().cloned());
            let m = rec.pron_count();
            if m > 1 {
                occurrences += 1;
                hit += usize::from(d.chosen == t);
                let table = confusion.entry(ch.to_string()).or_insert_with(|| vec![vec![0; m]; m]);
                table[t][d.chosen] += 1;
            }
        }
        predicted.push(pred_tokens);
        reference.push(ref_tokens);
    }
    Ok(EvalReport {
        kind: "objective".into(),
        per: per(&predicted, &reference)?,
        ser: ser(&predicted, &reference)?,
        polyphone_accuracy: if occurrences == 0 { 1.0 } else { hit as f64 / occurrences as f64 },
        polyphone_occurrences: occurrences,
        sentences: corpus.len(),
        confusion,
    })
}

/// One exported character: pronunciation weights and the flat attention row with its
/// `(pronunciation, token)` legend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub sentence: usize,
    pub position: usize,
    pub character: char,
    pub known: bool,
    pub forced: bool,
    pub chosen: usize,
    pub w: Vec<f64>,
    pub attention: Vec<f64>,
    pub legend: Vec<(usize, usize)>,
}

impl AttentionRecord {
    pub fn from_diagnostics<F: Real>(sentence: usize, d: &CharDiagnostics<F>) -> Self {
        Self {
            sentence,
            position: d.position,
            character: d.character,
            known: d.known,
            forced: d.forced,
            chosen: d.chosen,
            w: d.weights.iter().map(|v| v.as_f64()).collect(),
            attention: d.attention.iter().map(|v| v.as_f64()).collect(),
            legend: d.legend.clone(),
        }
    }
}

pub fn write_attention(records: &[AttentionRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_attention(reader: impl BufRead) -> Result<Vec<AttentionRecord>, EvalError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: AttentionRecord = serde_json::from_str(&line).map_err(|e| EvalError::Export {
            line: n + 1,
            reason: e.to_string(),
        })?;
        if r.attention.len() != r.legend.len() || r.legend.iter().any(|&(j, _)| j >= r.w.len()) {
            return Err(EvalError::Export {
                line: n + 1,
                reason: "legend does not match attention or weights".into(),
            });
        }
        out.push(r);
    }
    Ok(out)
}

/// Writes one line per character of every sentence.
pub fn export_attention<F: Real>(
    diagnostics: &[(usize, Vec<CharDiagnostics<F>>)],
    path: impl AsRef<Path>,
) -> Result<Vec<AttentionRecord>, EvalError> {
    let records: Vec<AttentionRecord> = diagnostics
        .iter()
        .flat_map(|(id, ds)| ds.iter().map(move |d| AttentionRecord::from_diagnostics(*id, d)))
        .collect();
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_attention(&records, f)?;
    Ok(records)
}

pub fn load_attention(path: impl AsRef<Path>) -> Result<Vec<AttentionRecord>, EvalError> {
    read_attention(BufReader::new(std::fs::File::open(path)?))
}
