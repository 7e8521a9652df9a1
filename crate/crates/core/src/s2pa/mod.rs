//! Semantics-to-pronunciation attention.
//!
//! For one character with context vector `z` and gloss-token keys `K` (one row per
//! `(pronunciation j, token k)`):
//!
//! ```text
//! a   = K z / scale
//! a'  = softmax(a)                 over all rows jointly
//! s'  = a' K                       retrieved semantics
//! w_j = sum_k a'_{j,k}             pronunciation weights
//! y   = softmax((log max(w, 1e-10) + g) / tau)
//! p'  = sum_j y_j P_j              mixed pronunciation embedding
//! ```
//!
//! The functions here work on plain slices. [`graph`] has the same steps as tape
//! operations for training.

pub mod graph;
mod rules;

pub use rules::{OccurrenceContext, Predicate, Rule, RuleSet};

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use thiserror::Error;

use crate::numerics::{argmax, lit, Real, Tensor, TensorError};

/// Floor applied to pronunciation weights before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum S2paError {
    #[error("character has no key rows")]
    EmptyKeys,
    #[error("context width {found} does not match key width {expected}")]
    Width { expected: usize, found: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("rule for {character:?} forces pronunciation {index} but only {m} exist")]
    ForcedIndex { character: char, index: usize, m: usize },
    #[error("expected {expected} values, got {found}")]
    Length { expected: usize, found: usize },
    #[error("rules line {line}: {reason}")]
    RuleSyntax { line: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult<F> {
    pub raw: Vec<F>,
    pub normalized: Vec<F>,
    pub scale: F,
    pub retrieved: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PronunciationDistribution<F> {
    pub weights: Vec<F>,
    pub noise: Vec<F>,
    pub tau: F,
    pub sampled: Vec<F>,
    pub mixed: Vec<F>,
    pub forced: bool,
}

/// Default attention scale, `√d_model`.
pub fn default_scale(d_model: usize) -> f64 {
    (d_model as f64).sqrt()
}

pub fn softmax<F: Real>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = x.iter().map(|&v| (v - max).exp()).collect();
    let s = e.iter().copied().fold(F::zero(), |a, b| a + b);
    e.into_iter().map(|v| v / s).collect()
}

pub fn one_hot<F: Real>(m: usize, index: usize) -> Vec<F> {
    let mut v = vec![F::zero(); m];
    v[index] = F::one();
    v
}

/// Raw and normalized scores of `keys: [R, d]` against `z`, plus the retrieved
/// semantics.
pub fn attention_scores<F: Real>(z: &[F], keys: &Tensor<F>, scale: F) -> Result<AttentionResult<F>, S2paError> {
    if keys.shape().len() != 2 || keys.rows() == 0 {
        return Err(S2paError::EmptyKeys);
    }
    if keys.cols() != z.len() {
        return Err(S2paError::Width {
            expected: keys.cols(),
            found: z.len(),
        });
    }
    let raw: Vec<F> = (0..keys.rows())
        .map(|r| keys.row(r).iter().zip(z).fold(F::zero(), |acc, (&k, &zv)| acc + k * zv) / scale)
        .collect();
    let normalized = softmax(&raw);
    let mut result = AttentionResult {
        raw,
        normalized,
        scale,
        retrieved: Vec::new(),
    };
    result.retrieved = retrieve_semantics(&result, keys)?;
    Ok(result)
}

/// `s' = a' K`.
pub fn retrieve_semantics<F: Real>(result: &AttentionResult<F>, keys: &Tensor<F>) -> Result<Vec<F>, S2paError> {
    if result.normalized.len() != keys.rows() {
        return Err(S2paError::Length {
            expected: keys.rows(),
            found: result.normalized.len(),
        });
    }
    let mut s = vec![F::zero(); keys.cols()];
    for (r, &a) in result.normalized.iter().enumerate() {
        for (o, &k) in s.iter_mut().zip(keys.row(r)) {
            *o = *o + a * k;
        }
    }
    Ok(s)
}

/// Sums normalized scores per pronunciation; `legend[r]` is the `(j, k)` of row `r`.
pub fn aggregate_pron_weights<F: Real>(normalized: &[F], legend: &[(usize, usize)], m: usize) -> Result<Vec<F>, S2paError> {
    if normalized.len() != legend.len() {
        return Err(S2paError::Length {
            expected: legend.len(),
            found: normalized.len(),
        });
    }
    let mut w = vec![F::zero(); m];
    for (&a, &(j, _)) in normalized.iter().zip(legend) {
        if j >= m {
            return Err(TensorError::IndexOutOfRange {
                op: "aggregate_pron_weights",
                index: j,
                len: m,
            }
            .into());
        }
        w[j] = w[j] + a;
    }
    Ok(w)
}

/// `softmax((log max(w, 1e-10) + g) / tau)`; pass zeros as `noise` for the noise-free
/// variant.
pub fn gumbel_softmax_sample<F: Real>(w: &[F], tau: F, noise: &[F]) -> Result<Vec<F>, S2paError> {
    if !(tau > F::zero()) {
        return Err(S2paError::Temperature(tau.as_f64()));
    }
    if noise.len() != w.len() {
        return Err(S2paError::Length {
            expected: w.len(),
            found: noise.len(),
        });
    }
    let floor: F = lit(LOG_FLOOR);
    let logits: Vec<F> = w.iter().zip(noise).map(|(&wj, &g)| (wj.max(floor).ln() + g) / tau).collect();
    Ok(softmax(&logits))
}

/// Standard Gumbel draws, one per pronunciation.
pub fn sample_gumbel<F: Real, R: Rng + ?Sized>(rng: &mut R, m: usize) -> Vec<F> {
    let dist = Gumbel::new(0.0, 1.0).expect("unit scale");
    (0..m).map(|_| lit(dist.sample(rng))).collect()
}

/// `p' = sum_j y_j P_j` for `prons: [m, d]`.
pub fn mix_pronunciation<F: Real>(sampled: &[F], prons: &Tensor<F>) -> Result<Vec<F>, S2paError> {
    if sampled.len() != prons.rows() {
        return Err(S2paError::Length {
            expected: prons.rows(),
            found: sampled.len(),
        });
    }
    let mut p = vec![F::zero(); prons.cols()];
    for (j, &y) in sampled.iter().enumerate() {
        for (o, &v) in p.iter_mut().zip(prons.row(j)) {
            *o = *o + y * v;
        }
    }
    Ok(p)
}

/// Replaces `w` with an exact one-hot when a rule fires. Returns whether it did.
pub fn apply_rules<F: Real>(w: &mut [F], ctx: &OccurrenceContext<'_>, rules: &RuleSet) -> Result<bool, S2paError> {
    match rules.forced_index(ctx) {
        Some(index) if index >= w.len() => Err(S2paError::ForcedIndex {
            character: ctx.character(),
            index,
            m: w.len(),
        }),
        Some(index) => {
            w.iter_mut().for_each(|x| *x = F::zero());
            w[index] = F::one();
            Ok(true)
        }
        None => Ok(false),
    }
}

impl<F: Real> PronunciationDistribution<F> {
    /// Full sampling step from already aggregated weights. Forced weights skip the
    /// Gumbel step and stay exactly one-hot.
    pub fn new(weights: Vec<F>, forced: bool, noise: Vec<F>, tau: F, prons: &Tensor<F>) -> Result<Self, S2paError> {
        let sampled = if forced {
            one_hot(weights.len(), argmax(&weights))
        } else {
            gumbel_softmax_sample(&weights, tau, &noise)?
        };
        let mixed = mix_pronunciation(&sampled, prons)?;
        Ok(Self {
            weights,
            noise,
            tau,
            sampled,
            mixed,
            forced,
        })
    }

    pub fn chosen(&self) -> usize {
        argmax(&self.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_scores() {
        let keys = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let r = attention_scores(&[1.0, 0.0], &keys, 2.0).unwrap();
        assert_eq!(r.raw, vec![1.0, 0.0]);
    }

    #[test]
    fn equal_rows_give_uniform_attention_and_row_retrieval() {
        let keys = Tensor::<f64>::from_rows(&vec![vec![0.3, -1.0]; 3]).unwrap();
        let r = attention_scores(&[0.7, 0.2], &keys, 1.0).unwrap();
        for a in &r.normalized {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        for (s, k) in r.retrieved.iter().zip([0.3, -1.0]) {
            assert!((s - k).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_retrieval_selects_row() {
        let keys = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let r = AttentionResult {
            raw: vec![0.0, 0.0],
            normalized: vec![0.0, 1.0],
            scale: 1.0,
            retrieved: vec![],
        };
        assert_eq!(retrieve_semantics(&r, &keys).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn empty_keys_rejected() {
        let keys = Tensor::<f64>::zeros(vec![0, 2]);
        assert!(matches!(attention_scores(&[1.0, 0.0], &keys, 1.0), Err(S2paError::EmptyKeys)));
    }

    #[test]
    fn aggregation() {
        let w = aggregate_pron_weights(&[0.2f64, 0.3, 0.5], &[(0, 0), (0, 1), (1, 0)], 2).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        let w = aggregate_pron_weights(&[0.25, 0.75], &[(0, 0), (0, 1)], 1).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn gumbel_cases() {
        let y = gumbel_softmax_sample(&[0.5, 0.5], 1.0, &[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![0.5, 0.5]);
        let y = gumbel_softmax_sample(&[0.7f64, 0.3], 0.01, &[0.0, 0.0]).unwrap();
        assert!(y[0] > 0.999);
        let y = gumbel_softmax_sample(&[1.0f64, 0.0], 1.0, &[0.3, 1.2]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-9);
        assert!(matches!(
            gumbel_softmax_sample(&[1.0], 0.0, &[0.0]),
            Err(S2paError::Temperature(_))
        ));
    }

    #[test]
    fn mixing() {
        let p = Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(mix_pronunciation(&[0.0, 1.0], &p).unwrap(), vec![3.0, 5.0]);
        assert_eq!(mix_pronunciation(&[0.5, 0.5], &p).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn forced_distribution_is_exact_one_hot() {
        let p = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap();
        let d = PronunciationDistribution::new(vec![0.0, 0.0, 1.0], true, vec![5.0, -3.0, 0.1], 0.5, &p).unwrap();
        assert_eq!(d.sampled, vec![0.0, 0.0, 1.0]);
        assert_eq!(d.mixed, vec![4.0]);
    }
}
