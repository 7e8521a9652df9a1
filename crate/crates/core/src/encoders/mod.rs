//! Semantic and linguistic encoders, vocabularies, pronunciation embeddings and the
//! gloss-token key store.

pub mod keystore;
mod stack;
pub mod vocab;

pub use keystore::{record_legend, KeyFile, KeyMode, KeyRow, KeyStore, KEY_MAGIC, KEY_VERSION};
pub use stack::EncoderStack;
pub use vocab::{CharVocab, PhonemeVocab, UNK_ID};

use rand::Rng;
use thiserror::Error;

use crate::binio::BinError;
use crate::dictionary::Pronunciation;
use crate::numerics::{lit, normal, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("key width {found} does not match d_model {expected}")]
    KeyWidth { expected: usize, found: usize },
    #[error("key file has no row for {character:?} pronunciation {pron_index} token {token_index}")]
    MissingKeyRow {
        character: char,
        pron_index: usize,
        token_index: usize,
    },
    #[error("key file row {character:?} pronunciation {pron_index} token {token_index} matches no gloss token")]
    UnexpectedKeyRow {
        character: char,
        pron_index: usize,
        token_index: usize,
    },
    #[error("key file repeats row {character:?} pronunciation {pron_index} token {token_index}")]
    DuplicateKeyRow {
        character: char,
        pron_index: usize,
        token_index: usize,
    },
    #[error("unknown phoneme `{0}`")]
    UnknownPhoneme(String),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("key file: {0}")]
    Bin(#[from] BinError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub semantic_layers: usize,
    pub linguistic_layers: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ffn_mult: usize,
    pub rel_clip: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            semantic_layers: 2,
            linguistic_layers: 2,
            heads: 2,
            conv_kernel: 5,
            ffn_mult: 4,
            rel_clip: 8,
        }
    }
}

impl EncoderConfig {
    /// Full-size configuration: width 192 and four layers per encoder.
    pub fn full_scale() -> Self {
        Self {
            d_model: 192,
            semantic_layers: 4,
            linguistic_layers: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("conv_kernel", self.conv_kernel),
            ("ffn_mult", self.ffn_mult),
            ("rel_clip", self.rel_clip),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(EncoderError::Config("conv_kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Character embedding followed by an encoder stack; yields one context row per
/// input character.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    pub embedding: ParamId,
    pub stack: EncoderStack,
    d_model: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticContext<F> {
    pub token_ids: Vec<usize>,
    /// `[l, d_model]`
    pub z: Tensor<F>,
}

impl SemanticEncoder {
    pub fn init<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, vocab_size: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let embedding = store.add(
            "semantic.embedding",
            normal(rng, vec![vocab_size, cfg.d_model], (cfg.d_model as f64).powf(-0.5)),
        );
        let stack = EncoderStack::init(store, "semantic", cfg.semantic_layers, cfg, rng);
        Self {
            embedding,
            stack,
            d_model: cfg.d_model,
        }
    }

    /// Embedded input scaled by `√d_model`, before any encoder block.
    pub fn embed<F: Real>(&self, tape: &mut Tape<'_, F>, pv: &[Var], ids: &[usize]) -> Result<Var, EncoderError> {
        if ids.is_empty() {
            return Err(EncoderError::Empty("semantic encoder"));
        }
        let e = tape.embedding_lookup(pv[self.embedding.0], ids)?;
        Ok(tape.scale(e, lit((self.d_model as f64).sqrt())))
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, pv: &[Var], ids: &[usize]) -> Result<Var, EncoderError> {
        let x = self.embed(tape, pv, ids)?;
        Ok(self.stack.forward(tape, pv, x)?)
    }

    /// Stand-alone evaluation outside any training graph.
    pub fn encode<F: Real>(&self, store: &ParamStore<F>, ids: &[usize]) -> Result<SemanticContext<F>, EncoderError> {
        let mut tape = Tape::new();
        let pv = store.attach(&mut tape);
        let z = self.forward(&mut tape, &pv, ids)?;
        Ok(SemanticContext {
            token_ids: ids.to_vec(),
            z: tape.tensor(z),
        })
    }
}

/// Fusion stack over `p′ + s′`. The character embedding never reaches it directly.
#[derive(Debug, Clone)]
pub struct LinguisticEncoder {
    pub stack: EncoderStack,
}

impl LinguisticEncoder {
    pub fn init<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            stack: EncoderStack::init(store, "linguistic", cfg.linguistic_layers, cfg, rng),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, pv: &[Var], p: Var, s: Var) -> Result<Var, EncoderError> {
        let (lp, ls) = (tape.shape(p)[0], tape.shape(s)[0]);
        if lp != ls {
            return Err(EncoderError::LengthMismatch { left: lp, right: ls });
        }
        if lp == 0 {
            return Err(EncoderError::Empty("linguistic encoder"));
        }
        let x = tape.add(p, s)?;
        Ok(self.stack.forward(tape, pv, x)?)
    }

    pub fn encode<F: Real>(&self, store: &ParamStore<F>, p: &Tensor<F>, s: &Tensor<F>) -> Result<Tensor<F>, EncoderError> {
        let mut tape = Tape::new();
        let pv = store.attach(&mut tape);
        let (pi, si) = (tape.input(p.clone()), tape.input(s.clone()));
        let g = self.forward(&mut tape, &pv, pi, si)?;
        Ok(tape.tensor(g))
    }
}

/// Phoneme ids of a pronunciation.
pub fn phoneme_ids(pron: &Pronunciation, vocab: &PhonemeVocab) -> Result<Vec<usize>, EncoderError> {
    pron.phonemes
        .iter()
        .map(|p| vocab.id(p).ok_or_else(|| EncoderError::UnknownPhoneme(p.clone())))
        .collect()
}

/// Mean of the phoneme embeddings of `pron`, so identical pronunciations share one
/// vector regardless of character.
pub fn pronunciation_embedding<F: Real>(pron: &Pronunciation, vocab: &PhonemeVocab, table: &Tensor<F>) -> Result<Vec<F>, EncoderError> {
    let ids = phoneme_ids(pron, vocab)?;
    if ids.is_empty() {
        return Err(EncoderError::Empty("pronunciation"));
    }
    let mut out = vec![F::zero(); table.cols()];
    for &id in &ids {
        if id >= table.rows() {
            return Err(TensorError::IndexOutOfRange {
                op: "pronunciation_embedding",
                index: id,
                len: table.rows(),
            }
            .into());
        }
        for (o, &v) in out.iter_mut().zip(table.row(id)) {
            *o = *o + v;
        }
    }
    let n: F = lit(ids.len() as f64);
    out.iter_mut().for_each(|o| *o = *o / n);
    Ok(out)
}
