use crate::dictionary::Pronunciation;
use crate::numerics::Real;
use crate::s2pa::RuleSet;

use super::{CharDiagnostics, ForwardOptions, Model, Noise, PipelineError};

#[derive(Debug, Clone, PartialEq)]
pub struct Inference<F> {
    pub pronunciations: Vec<Pronunciation>,
    pub diagnostics: Vec<CharDiagnostics<F>>,
}

impl<F> Inference<F> {
    /// Space-separated phonemes per character.
    pub fn texts(&self) -> Vec<String> {
        self.pronunciations.iter().map(Pronunciation::text).collect()
    }
}

/// Picks the highest-weight pronunciation of every character after rules. With
/// `sample_seed`, Gumbel noise at temperature `tau_min` is added first.
pub fn infer_pronunciations<F: Real>(
    model: &Model<F>,
    chars: &[char],
    rules: Option<&RuleSet>,
    sample_seed: Option<u64>,
) -> Result<Inference<F>, PipelineError> {
    let opts = ForwardOptions {
        noise: sample_seed.map_or(Noise::Off, Noise::Sample),
        tau: model.config.tau.min,
        rules,
        ..ForwardOptions::default()
    };
    let (_, mut diagnostics) = model.predict(chars, &opts)?;
    if sample_seed.is_some() {
        for d in diagnostics.iter_mut().filter(|d| !d.forced) {
            d.chosen = crate::numerics::argmax(&d.sampled);
        }
    }
    let pronunciations = diagnostics
        .iter()
        .map(|d| {
            let rec = model.lexicon.dictionary.lookup_or_unknown(d.character);
            rec.entries[d.chosen].pron.clone()
        })
        .collect();
    Ok(Inference {
        pronunciations,
        diagnostics,
    })
}
