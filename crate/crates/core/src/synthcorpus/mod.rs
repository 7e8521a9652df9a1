//! Synthetic language with context-governed polyphones and known ground truth.
//!
//! Monophonic characters belong to one of a few context classes. Each pronunciation
//! of a polyphone is governed by a distinct class, and the correct reading of an
//! occurrence is decided by a vote over the classes of its neighbours within two
//! positions. Gloss tokens of a pronunciation come from its governing class, so the
//! gloss keys carry exactly the information needed to disambiguate.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dictionary::{CharacterRecord, DictEntry, Dictionary, GlossEntry, Pronunciation};
use crate::encoders::{KeyFile, KeyRow};
use crate::numerics::{Real, Tensor};
use crate::pipeline::{Corpus, Labels, Split, Utterance};

const INITIALS: &[&str] = &[
    "B", "P", "M", "F", "D", "T", "N", "L", "G", "K", "H", "J", "Q", "X", "ZH", "CH", "SH", "R", "Z", "C", "S",
];
const FINALS: &[&str] = &["A", "O", "E", "I", "U", "V", "AI", "EI", "AO", "OU", "AN", "EN", "ANG", "ENG", "ONG"];
/// First code point of the character inventory.
const CHAR_BASE: u32 = 0x4E00;
/// Vote window on each side of an occurrence.
pub const WINDOW: usize = 2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible parameters: {0}")]
    Infeasible(String),
    #[error("predictions cover {found} sentences, corpus has {expected}")]
    Misaligned { expected: usize, found: usize },
    #[error("sentence {id}: {found} predictions for {expected} characters")]
    SentenceLength { id: usize, expected: usize, found: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Encoder(#[from] crate::encoders::EncoderError),
    #[error(transparent)]
    Dictionary(#[from] crate::dictionary::DictError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub chars: usize,
    pub polyphones: usize,
    pub classes: usize,
    pub d_model: usize,
    pub feature_dim: usize,
    /// Standard deviation of the noise added to class vectors in key rows.
    pub key_noise: f64,
    /// Standard deviation of the noise added to acoustic targets.
    pub target_noise: f64,
    pub gloss_tokens: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_polyphones_per_sentence: usize,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            chars: 60,
            polyphones: 12,
            classes: 4,
            d_model: 64,
            feature_dim: 16,
            key_noise: 0.05,
            target_noise: 0.01,
            gloss_tokens: 3,
            min_len: 8,
            max_len: 12,
            max_polyphones_per_sentence: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPronunciation {
    pub phonemes: Vec<String>,
    /// Context class that selects this reading.
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyChar {
    pub ch: char,
    /// Class of a monophone; `None` for polyphones.
    pub class: Option<usize>,
    pub prons: Vec<ToyPronunciation>,
}

impl ToyChar {
    pub fn is_polyphone(&self) -> bool {
        self.prons.len() > 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLanguageSpec {
    pub params: ToyParams,
    pub seed: u64,
    /// Unit vectors of width `d_model`, one per class.
    pub class_vectors: Vec<Vec<f64>>,
    pub characters: Vec<ToyChar>,
    /// Phoneme symbol to acoustic vector of width `feature_dim`.
    pub codebook: BTreeMap<String, Vec<f64>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Draws a language satisfying every structural invariant, or explains why the
/// parameters cannot.
pub fn generate_spec(params: ToyParams, seed: u64) -> Result<ToyLanguageSpec, SynthError> {
    let p = params;
    let bad = |m: String| Err(SynthError::Infeasible(m));
    if p.classes < 2 {
        return bad("at least 2 context classes are needed".into());
    }
    if p.polyphones > 0 && p.classes < 2 + usize::from(p.polyphones > 1) {
        return bad(format!("{} classes cannot govern polyphones with 3 readings", p.classes));
    }
    let monophones = p.chars.saturating_sub(p.polyphones);
    if monophones < 2 * p.classes {
        return bad(format!("{monophones} monophones cannot fill {} classes twice", p.classes));
    }
    if p.d_model < 2 || p.feature_dim == 0 || p.gloss_tokens == 0 {
        return bad("d_model >= 2, feature_dim >= 1 and gloss_tokens >= 1 are required".into());
    }
    if p.min_len < 3 || p.max_len < p.min_len {
        return bad("sentence lengths must satisfy 3 <= min_len <= max_len".into());
    }
    if p.key_noise < 0.0 || p.target_noise < 0.0 {
        return bad("noise scales must be non-negative".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut class_vectors: Vec<Vec<f64>> = Vec::with_capacity(p.classes);
    let mut attempts = 0;
    while class_vectors.len() < p.classes {
        attempts += 1;
        if attempts > 100_000 {
            return bad(format!("no {} class vectors with pairwise cosine < 0.5 in width {}", p.classes, p.d_model));
        }
        let v = random_unit(&mut rng, p.d_model);
        if class_vectors.iter().all(|c| cosine(c, &v) < 0.5) {
            class_vectors.push(v);
        }
    }

    let mut syllables: Vec<(usize, usize, u32)> = Vec::new();
    for i in 0..INITIALS.len() {
        for f in 0..FINALS.len() {
            for t in 1..=4 {
                syllables.push((i, f, t));
            }
        }
    }
    if syllables.len() < p.chars * 3 {
        return bad("character inventory is too large for the syllable set".into());
    }
    syllables.shuffle(&mut rng);
    let mut next_syllable = syllables.into_iter().map(|(i, f, t)| vec![INITIALS[i].to_string(), format!("{}{t}", FINALS[f])]);

    let mut characters = Vec::with_capacity(p.chars);
    for idx in 0..p.chars {
        let ch = char::from_u32(CHAR_BASE + idx as u32).expect("CJK block");
        if idx < p.polyphones {
            let m = 2 + idx % 2;
            let mut classes: Vec<usize> = (0..p.classes).collect();
            classes.shuffle(&mut rng);
            let prons = classes[..m]
                .iter()
                .map(|&class| ToyPronunciation {
                    phonemes: next_syllable.next().expect("enough syllables"),
                    class,
                })
                .collect();
            characters.push(ToyChar { ch, class: None, prons });
        } else {
            let class = (idx - p.polyphones) % p.classes;
            characters.push(ToyChar {
                ch,
                class: Some(class),
                prons: vec![ToyPronunciation {
                    phonemes: next_syllable.next().expect("enough syllables"),
                    class,
                }],
            });
        }
    }

    let mut symbols: Vec<&String> = characters.iter().flat_map(|c| c.prons.iter().flat_map(|p| &p.phonemes)).collect();
    symbols.sort();
    symbols.dedup();
    let codebook = symbols
        .into_iter()
        .map(|s| (s.clone(), (0..p.feature_dim).map(|_| rng.sample(StandardNormal)).collect()))
        .collect();

    Ok(ToyLanguageSpec {
        params: p,
        seed,
        class_vectors,
        characters,
        codebook,
    })
}

impl ToyLanguageSpec {
    pub fn char_index(&self) -> BTreeMap<char, usize> {
        self.characters.iter().enumerate().map(|(i, c)| (c.ch, i)).collect()
    }

    /// Monophones of each class.
    pub fn class_pools(&self) -> Vec<Vec<char>> {
        let mut pools = vec![Vec::new(); self.params.classes];
        for c in &self.characters {
            if let Some(k) = c.class {
                pools[k].push(c.ch);
            }
        }
        pools
    }

    pub fn class_of(&self, ch: char) -> Option<usize> {
        self.characters.iter().find(|c| c.ch == ch).and_then(|c| c.class)
    }

    /// Mean codebook vector of a phoneme sequence.
    pub fn acoustic_mean(&self, phonemes: &[String]) -> Vec<f64> {
        let mut out = vec![0.0; self.params.feature_dim];
        for ph in phonemes {
            for (o, v) in out.iter_mut().zip(&self.codebook[ph]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= phonemes.len() as f64);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Pronunciation index of the character at `position`: the governing class with the
/// most neighbours within [`WINDOW`] wins, ties going to the neighbour met first in
/// the order `i-1, i+1, i-2, i+2`. Monophones and characters with no governing
/// neighbour read as index 0.
pub fn ground_truth(spec: &ToyLanguageSpec, chars: &[char], position: usize) -> usize {
    let index = spec.char_index();
    let Some(&ci) = index.get(&chars[position]) else { return 0 };
    let c = &spec.characters[ci];
    if !c.is_polyphone() {
        return 0;
    }
    let mut order = Vec::with_capacity(2 * WINDOW);
    for dist in 1..=WINDOW {
        if let Some(p) = position.checked_sub(dist) {
            order.push(p);
        }
        if position + dist < chars.len() {
            order.push(position + dist);
        }
    }
    let neighbour_classes: Vec<usize> = order
        .iter()
        .filter_map(|&p| index.get(&chars[p]).and_then(|&k| spec.characters[k].class))
        .collect();
    let votes: Vec<usize> = c.prons.iter().map(|pr| neighbour_classes.iter().filter(|&&k| k == pr.class).count()).collect();
    let best = votes.iter().copied().max().unwrap_or(0);
    if best == 0 {
        return 0;
    }
    for k in neighbour_classes {
        if let Some(j) = c.prons.iter().position(|pr| pr.class == k) {
            if votes[j] == best {
                return j;
            }
        }
    }
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySentence {
    pub id: usize,
    pub split: Split,
    pub chars: Vec<char>,
    pub labels: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub sentences: Vec<ToySentence>,
}

/// `n_train` training sentences followed by `n_heldout` held-out ones.
pub fn generate_corpus(spec: &ToyLanguageSpec, n_train: usize, n_heldout: usize, seed: u64) -> GeneratedCorpus {
    let p = &spec.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let pools = spec.class_pools();
    let monophones: Vec<char> = pools.iter().flatten().copied().collect();
    let polyphones: Vec<&ToyChar> = spec.characters.iter().filter(|c| c.is_polyphone()).collect();
    let noise = Normal::new(0.0, p.target_noise.max(f64::MIN_POSITIVE)).expect("finite scale");

    let mut sentences = Vec::with_capacity(n_train + n_heldout);
    for id in 0..n_train + n_heldout {
        let l = rng.random_range(p.min_len..=p.max_len);
        let mut chars: Vec<char> = (0..l).map(|_| *monophones.choose(&mut rng).expect("monophones exist")).collect();
        if !polyphones.is_empty() {
            let wanted = rng.random_range(1..=p.max_polyphones_per_sentence.max(1));
            let mut taken: Vec<usize> = Vec::new();
            for _ in 0..wanted {
                let free: Vec<usize> = (1..l - 1).filter(|&q| taken.iter().all(|&t| q.abs_diff(t) >= 3)).collect();
                let Some(&pos) = free.choose(&mut rng) else { break };
                taken.push(pos);
                let poly = polyphones.choose(&mut rng).expect("non-empty");
                let j = rng.random_range(0..poly.prons.len());
                let pool = &pools[poly.prons[j].class];
                chars[pos] = poly.ch;
                chars[pos - 1] = *pool.choose(&mut rng).expect("class pools are non-empty");
                chars[pos + 1] = *pool.choose(&mut rng).expect("class pools are non-empty");
            }
        }
        let index = spec.char_index();
        let labels: Vec<usize> = (0..l).map(|i| ground_truth(spec, &chars, i)).collect();
        let targets = chars
            .iter()
            .zip(&labels)
            .map(|(ch, &j)| {
                let mean = spec.acoustic_mean(&spec.characters[index[ch]].prons[j].phonemes);
                if p.target_noise == 0.0 {
                    mean
                } else {
                    mean.into_iter().map(|v| v + noise.sample(&mut rng)).collect()
                }
            })
            .collect();
        sentences.push(ToySentence {
            id,
            split: if id < n_train { Split::Train } else { Split::Heldout },
            chars,
            labels,
            targets,
        });
    }
    GeneratedCorpus { sentences }
}

impl GeneratedCorpus {
    pub fn to_corpus<F: Real>(&self) -> Result<Corpus<F>, SynthError> {
        let utterances = self
            .sentences
            .iter()
            .map(|s| {
                let w = s.targets.first().map_or(0, Vec::len);
                let data = s.targets.iter().flatten().map(|&v| F::from_f64_lossy(v)).collect();
                Ok(Utterance {
                    id: s.id,
                    split: s.split,
                    chars: s.chars.clone(),
                    targets: Tensor::new(vec![s.chars.len(), w], data).map_err(crate::pipeline::PipelineError::from)?,
                })
            })
            .collect::<Result<Vec<_>, SynthError>>()?;
        Ok(Corpus::new(utterances))
    }

    pub fn labels(&self) -> Labels {
        let mut l = Labels::default();
        for s in &self.sentences {
            l.insert(s.id, s.labels.clone());
        }
        l
    }
}

/// Dictionary whose glosses come from each reading's governing class, and key rows
/// equal to the class vector plus Gaussian noise of scale `key_noise`.
pub fn emit_oracle_dictionary(spec: &ToyLanguageSpec) -> Result<(Dictionary, KeyFile), SynthError> {
    let p = &spec.params;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let pools = spec.class_pools();
    let mut records = Vec::with_capacity(spec.characters.len());
    let mut rows = Vec::new();
    for c in &spec.characters {
        let mut entries = Vec::with_capacity(c.prons.len());
        for (j, pr) in c.prons.iter().enumerate() {
            let tokens: Vec<char> = (0..p.gloss_tokens)
                .map(|_| *pools[pr.class].choose(&mut rng).expect("class pools are non-empty"))
                .collect();
            for k in 0..tokens.len() {
                let vector = spec.class_vectors[pr.class]
                    .iter()
                    .map(|&v| {
                        let e: f64 = rng.sample(StandardNormal);
                        (v + p.key_noise * e) as f32
                    })
                    .collect();
                rows.push(KeyRow {
                    character: c.ch,
                    pron_index: j as u32,
                    token_index: k as u32,
                    vector,
                });
            }
            entries.push(DictEntry {
                pron: Pronunciation::new(pr.phonemes.clone(), j),
                gloss: GlossEntry { tokens },
            });
        }
        records.push(CharacterRecord { character: c.ch, entries });
    }
    Ok((Dictionary::from_records(records)?, KeyFile { d_model: p.d_model, rows }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleAccuracy {
    pub polyphone: f64,
    pub overall: f64,
    pub polyphone_occurrences: usize,
}

/// Agreement of predicted pronunciation indices with the generator's labels.
pub fn oracle_accuracy(predictions: &[Vec<usize>], corpus: &[ToySentence], spec: &ToyLanguageSpec) -> Result<OracleAccuracy, SynthError> {
    if predictions.len() != corpus.len() {
        return Err(SynthError::Misaligned {
            expected: corpus.len(),
            found: predictions.len(),
        });
    }
    let index = spec.char_index();
    let (mut poly_hit, mut poly_total, mut hit, mut total) = (0usize, 0usize, 0usize, 0usize);
    for (pred, s) in predictions.iter().zip(corpus) {
        if pred.len() != s.labels.len() {
            return Err(SynthError::SentenceLength {
                id: s.id,
                expected: s.labels.len(),
                found: pred.len(),
            });
        }
        for ((&p, &t), ch) in pred.iter().zip(&s.labels).zip(&s.chars) {
            total += 1;
            hit += usize::from(p == t);
            if index.get(ch).is_some_and(|&i| spec.characters[i].is_polyphone()) {
                poly_total += 1;
                poly_hit += usize::from(p == t);
            }
        }
    }
    let rate = |h: usize, n: usize| if n == 0 { 1.0 } else { h as f64 / n as f64 };
    Ok(OracleAccuracy {
        polyphone: rate(poly_hit, poly_total),
        overall: rate(hit, total),
        polyphone_occurrences: poly_total,
    })
}

/// Paths written by [`write_bundle`].
pub const DICT_FILE: &str = "dict.txt";
pub const KEYS_FILE: &str = "keys.dkey";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const LABELS_FILE: &str = "labels.tsv";
pub const SPEC_FILE: &str = "spec.json";

/// Generates a language and corpus and writes every artifact into `dir`.
pub fn write_bundle(
    dir: impl AsRef<Path>,
    params: ToyParams,
    n_train: usize,
    n_heldout: usize,
    seed: u64,
) -> Result<(ToyLanguageSpec, GeneratedCorpus), SynthError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let spec = generate_spec(params, seed)?;
    let corpus = generate_corpus(&spec, n_train, n_heldout, seed);
    let (dict, keys) = emit_oracle_dictionary(&spec)?;
    dict.save_text(dir.join(DICT_FILE))?;
    keys.save(dir.join(KEYS_FILE))?;
    corpus.to_corpus::<f64>()?.save(dir.join(CORPUS_FILE))?;
    corpus.labels().save(dir.join(LABELS_FILE))?;
    spec.save(dir.join(SPEC_FILE))?;
    Ok((spec, corpus))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_single_polyphone() {
        let params = ToyParams {
            chars: 5,
            polyphones: 1,
            classes: 2,
            ..ToyParams::default()
        };
        let spec = generate_spec(params, 3).unwrap();
        let poly = &spec.characters[0];
        assert_eq!(poly.prons.len(), 2);
        assert_ne!(poly.prons[0].class, poly.prons[1].class);
    }

    #[test]
    fn infeasible_parameters() {
        let p = ToyParams::default();
        assert!(generate_spec(ToyParams { classes: 1, ..p }, 0).is_err());
        assert!(generate_spec(ToyParams { classes: 2, ..p }, 0).is_err());
        assert!(generate_spec(ToyParams { chars: 14, ..p }, 0).is_err());
        assert!(generate_spec(ToyParams { classes: 7, d_model: 2, ..p }, 0).is_err());
    }

    #[test]
    fn vote_ties_go_left() {
        let params = ToyParams {
            chars: 9,
            polyphones: 1,
            classes: 2,
            ..ToyParams::default()
        };
        let spec = generate_spec(params, 5).unwrap();
        let pools = spec.class_pools();
        let poly = &spec.characters[0];
        let (a, b) = (poly.prons[0].class, poly.prons[1].class);
        let s = [pools[b][0], pools[a][0], poly.ch, pools[b][1], pools[a][1]];
        // two votes each; the left neighbour decides
        assert_eq!(ground_truth(&spec, &s, 2), 0);
        let s = [pools[b][0], pools[b][1], poly.ch, pools[a][1], pools[a][0]];
        assert_eq!(ground_truth(&spec, &s, 2), 1);
    }
}
