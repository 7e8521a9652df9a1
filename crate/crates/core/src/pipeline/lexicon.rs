use crate::dictionary::{CharacterRecord, Dictionary};
use crate::encoders::{phoneme_ids, CharVocab, KeyFile, KeyMode, KeyStore, PhonemeVocab};
use crate::numerics::{Real, Tensor};

use super::PipelineError;

/// Precomputed per-character constants for the attention step.
#[derive(Debug, Clone, PartialEq)]
pub struct CharPlan<F> {
    pub m: usize,
    /// `(pronunciation, token)` of each key row.
    pub legend: Vec<(usize, usize)>,
    /// `[R, m]` row-to-pronunciation indicator.
    pub group: Tensor<F>,
    /// `[m, T]` averaging matrix over the concatenated phonemes of all pronunciations.
    pub pool: Tensor<F>,
    pub phoneme_ids: Vec<usize>,
    /// Frozen key rows `[R, d]`, present in imported mode.
    pub keys: Option<Tensor<F>>,
    /// Gloss-token ids of the key rows, used in trainable mode.
    pub key_token_ids: Vec<usize>,
    pub tones: Vec<Option<u32>>,
}

/// Dictionary, vocabularies, key store and per-character plans.
#[derive(Debug, Clone)]
pub struct Lexicon<F> {
    pub dictionary: Dictionary,
    pub chars: CharVocab,
    pub phonemes: PhonemeVocab,
    pub keys: KeyStore<F>,
    plans: Vec<CharPlan<F>>,
    unknown: CharPlan<F>,
}

fn plan_for<F: Real>(
    record: &CharacterRecord,
    index: usize,
    phonemes: &PhonemeVocab,
    keys: &KeyStore<F>,
) -> Result<CharPlan<F>, PipelineError> {
    let m = record.pron_count();
    let legend = keys.legend(index).to_vec();
    let mut group = Tensor::zeros(vec![legend.len(), m]);
    for (r, &(j, _)) in legend.iter().enumerate() {
        group.data_mut()[r * m + j] = F::one();
    }
    let per_pron = record
        .entries
        .iter()
        .map(|e| phoneme_ids(&e.pron, phonemes))
        .collect::<Result<Vec<_>, _>>()?;
    let total: usize = per_pron.iter().map(Vec::len).sum();
    let mut pool = Tensor::zeros(vec![m, total]);
    let mut col = 0;
    for (j, ids) in per_pron.iter().enumerate() {
        let share = F::one() / F::from_f64_lossy(ids.len() as f64);
        for _ in ids {
            pool.data_mut()[j * total + col] = share;
            col += 1;
        }
    }
    Ok(CharPlan {
        m,
        legend,
        group,
        pool,
        phoneme_ids: per_pron.concat(),
        keys: keys.matrix(index, None),
        key_token_ids: keys.token_ids()[keys.span(index)].to_vec(),
        tones: record.entries.iter().map(|e| e.pron.tone()).collect(),
    })
}

impl<F: Real> Lexicon<F> {
    /// `key_file` is required in imported mode and ignored otherwise.
    pub fn new(dictionary: Dictionary, mode: KeyMode, key_file: Option<&KeyFile>, d_model: usize) -> Result<Self, PipelineError> {
        let chars = CharVocab::from_dictionary(&dictionary);
        let phonemes = PhonemeVocab::from_dictionary(&dictionary);
        let keys = match mode {
            KeyMode::Trainable => KeyStore::trainable(&dictionary, &chars, d_model),
            KeyMode::Imported => {
                let file = key_file.ok_or(PipelineError::MissingKeys)?;
                KeyStore::imported(&dictionary, &chars, file, d_model)?
            }
        };
        let plans = dictionary
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| plan_for(r, i, &phonemes, &keys))
            .collect::<Result<Vec<_>, _>>()?;
        let unknown = CharPlan {
            m: 1,
            legend: Vec::new(),
            group: Tensor::zeros(vec![0, 1]),
            pool: Tensor::new(vec![1, 1], vec![F::one()])?,
            phoneme_ids: vec![0],
            keys: None,
            key_token_ids: Vec::new(),
            tones: vec![None],
        };
        Ok(Self {
            dictionary,
            chars,
            phonemes,
            keys,
            plans,
            unknown,
        })
    }

    /// Plan of `ch`, or the fallback plan (no keys, unknown phoneme) when `ch` is not
    /// in the dictionary.
    pub fn plan(&self, ch: char) -> (&CharPlan<F>, bool) {
        match self.dictionary.position(ch) {
            Some(i) => (&self.plans[i], true),
            None => (&self.unknown, false),
        }
    }

    pub fn key_mode(&self) -> KeyMode {
        self.keys.mode()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{parse_dictionary, ParseOptions, HEADER};

    #[test]
    fn plan_matrices() {
        let text = format!(
            "{HEADER}\n{}\n",
            r#"{"char":"行","prons":[{"p":"X ING2","gloss":"走路"},{"p":"H ANG2","gloss":"行"}]}"#
        );
        let dict = parse_dictionary(text.as_bytes(), &ParseOptions::default()).unwrap();
        let lex = Lexicon::<f64>::new(dict, KeyMode::Trainable, None, 4).unwrap();
        let (plan, known) = lex.plan('行');
        assert!(known);
        assert_eq!(plan.m, 2);
        assert_eq!(plan.group.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(plan.pool.data(), &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        assert_eq!(plan.tones, vec![Some(2), Some(2)]);
        let (unk, known) = lex.plan('猫');
        assert!(!known);
        assert_eq!(unk.m, 1);
        assert!(matches!(
            Lexicon::<f64>::new(lex.dictionary.clone(), KeyMode::Imported, None, 4),
            Err(PipelineError::MissingKeys)
        ));
    }
}
