use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{KeyMode, LinguisticEncoder, SemanticEncoder};
use crate::numerics::{argmax, filled, lit, normal, xavier, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::s2pa::{self, graph, OccurrenceContext, RuleSet};

use super::{Lexicon, ModelConfig, PipelineError};

/// Source of Gumbel noise for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    /// `g = 0`.
    Off,
    /// Fresh standard Gumbel draws from a generator seeded with this value, taken in
    /// sentence order for every unforced polyphone.
    Sample(u64),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'r> {
    pub noise: Noise,
    pub tau: f64,
    pub rules: Option<&'r RuleSet>,
    /// Straight-through one-hot sampling.
    pub hard: bool,
    /// Replace every `p'` with zeros.
    pub zero_pronunciation: bool,
    /// Replace every `s'` with zeros.
    pub zero_semantics: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            noise: Noise::Off,
            tau: 1.0,
            rules: None,
            hard: false,
            zero_pronunciation: false,
            zero_semantics: false,
        }
    }
}

/// Per-character view of the attention step.
#[derive(Debug, Clone, PartialEq)]
pub struct CharDiagnostics<F> {
    pub character: char,
    pub position: usize,
    pub known: bool,
    pub weights: Vec<F>,
    pub sampled: Vec<F>,
    pub noise: Vec<F>,
    pub raw: Vec<F>,
    pub attention: Vec<F>,
    pub legend: Vec<(usize, usize)>,
    pub retrieved: Vec<F>,
    pub forced: bool,
    pub chosen: usize,
}

#[derive(Debug)]
pub struct ForwardOutput<F> {
    /// `[l, feature_dim]`
    pub prediction: Var,
    pub diagnostics: Vec<CharDiagnostics<F>>,
}

#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub lexicon: Lexicon<F>,
    pub store: ParamStore<F>,
    semantic: SemanticEncoder,
    linguistic: LinguisticEncoder,
    phoneme_table: ParamId,
    gloss_table: Option<ParamId>,
    decoder_w: ParamId,
    decoder_b: ParamId,
}

struct Attended {
    s: Var,
    w: Option<Var>,
}

impl<F: Real> Model<F> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig, lexicon: Lexicon<F>) -> Result<Self, PipelineError> {
        config.validate()?;
        if lexicon.keys.d_model() != config.encoder.d_model {
            return Err(PipelineError::Config(format!(
                "key width {} does not match d_model {}",
                lexicon.keys.d_model(),
                config.encoder.d_model
            )));
        }
        if lexicon.key_mode() != config.key_mode {
            return Err(PipelineError::Config(format!(
                "lexicon keys are {} but config asks for {}",
                lexicon.key_mode(),
                config.key_mode
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc = config.encoder;
        let d = enc.d_model;
        let mut store = ParamStore::new();
        let semantic = SemanticEncoder::init(&mut store, lexicon.chars.len(), &enc, &mut rng);
        let phoneme_table = store.add(
            "phoneme.embedding",
            normal(&mut rng, vec![lexicon.phonemes.len(), d], (d as f64).powf(-0.5)),
        );
        let gloss_table = (config.key_mode == KeyMode::Trainable).then(|| {
            store.add(
                "gloss.embedding",
                normal(&mut rng, vec![lexicon.chars.len(), d], (d as f64).powf(-0.5)),
            )
        });
        let linguistic = LinguisticEncoder::init(&mut store, &enc, &mut rng);
        let decoder_w = store.add("decoder.weight", xavier(&mut rng, d, config.feature_dim));
        let decoder_b = store.add("decoder.bias", filled(vec![config.feature_dim], 0.0));
        Ok(Self {
            config,
            lexicon,
            store,
            semantic,
            linguistic,
            phoneme_table,
            gloss_table,
            decoder_w,
            decoder_b,
        })
    }

    pub fn semantic_embedding(&self) -> ParamId {
        self.semantic.embedding
    }

    pub fn phoneme_table(&self) -> ParamId {
        self.phoneme_table
    }

    /// Key rows of `plan` on the tape.
    fn keys<'a>(&'a self, tape: &mut Tape<'a, F>, pv: &[Var], plan: &'a super::CharPlan<F>) -> Result<Var, PipelineError> {
        match (&plan.keys, self.gloss_table) {
            (Some(k), _) => Ok(tape.param(k)),
            (None, Some(table)) => Ok(tape.gather_rows(pv[table.0], &plan.key_token_ids)?),
            (None, None) => Err(PipelineError::MissingKeys),
        }
    }

    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, F>,
        pv: &[Var],
        chars: &[char],
        opts: &ForwardOptions<'_>,
    ) -> Result<ForwardOutput<F>, PipelineError> {
        let l = chars.len();
        if l == 0 {
            return Err(PipelineError::EmptySentence);
        }
        let d = self.config.encoder.d_model;
        let tau: F = lit(opts.tau);
        let scale: F = lit(self.config.scale());
        let ids = self.lexicon.chars.encode(chars);
        let z = self.semantic.forward(tape, pv, &ids)?;

        // Scores, retrieval and weights for every position.
        let mut attended = Vec::with_capacity(l);
        let mut diagnostics = Vec::with_capacity(l);
        for (i, &ch) in chars.iter().enumerate() {
            let (plan, known) = self.lexicon.plan(ch);
            let mut diag = CharDiagnostics {
                character: ch,
                position: i,
                known,
                weights: vec![F::one()],
                sampled: vec![F::one()],
                noise: Vec::new(),
                raw: Vec::new(),
                attention: Vec::new(),
                legend: plan.legend.clone(),
                retrieved: vec![F::zero(); d],
                forced: false,
                chosen: 0,
            };
            let a = if known {
                let zi = tape.gather_rows(z, &[i])?;
                let keys = self.keys(tape, pv, plan)?;
                let (raw, norm) = graph::scores(tape, zi, keys, scale)?;
                let s = graph::retrieve(tape, norm, keys)?;
                diag.raw = tape.value(raw).to_vec();
                diag.attention = tape.value(norm).to_vec();
                diag.retrieved = tape.value(s).to_vec();
                let w = if plan.m > 1 {
                    let group = tape.param(&plan.group);
                    let w = graph::aggregate(tape, norm, group)?;
                    diag.weights = tape.value(w).to_vec();
                    Some(w)
                } else {
                    None
                };
                Attended { s, w }
            } else {
                Attended {
                    s: tape.constant(vec![1, d], vec![F::zero(); d])?,
                    w: None,
                }
            };
            diag.chosen = argmax(&diag.weights);
            attended.push(a);
            diagnostics.push(diag);
        }

        // Rules see the unforced best pronunciation of every neighbour.
        let tones: Vec<Option<u32>> = chars
            .iter()
            .zip(&diagnostics)
            .map(|(&ch, dg)| self.lexicon.plan(ch).0.tones[dg.chosen])
            .collect();
        if let Some(rules) = opts.rules {
            for (i, dg) in diagnostics.iter_mut().enumerate() {
                let ctx = OccurrenceContext {
                    chars,
                    position: i,
                    tones: &tones,
                };
                if s2pa::apply_rules(&mut dg.weights, &ctx, rules)? {
                    dg.forced = true;
                    dg.chosen = argmax(&dg.weights);
                }
            }
        }

        let mut noise_rng = match opts.noise {
            Noise::Sample(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            Noise::Off => None,
        };
        let mut p_rows = Vec::with_capacity(l);
        let mut s_rows = Vec::with_capacity(l);
        for (i, &ch) in chars.iter().enumerate() {
            let (plan, _) = self.lexicon.plan(ch);
            let dg = &mut diagnostics[i];
            let at = &attended[i];
            let sampled = match at.w {
                Some(w) if !dg.forced => {
                    let noise: Vec<F> = match noise_rng.as_mut() {
                        Some(rng) => s2pa::sample_gumbel(rng, plan.m),
                        None => vec![F::zero(); plan.m],
                    };
                    let y = graph::gumbel(tape, w, &noise, tau, opts.hard)?;
                    dg.noise = noise;
                    y
                }
                _ => {
                    let one_hot = s2pa::one_hot(plan.m, dg.chosen);
                    tape.constant(vec![1, plan.m], one_hot)?
                }
            };
            dg.sampled = tape.value(sampled).to_vec();
            let phon = tape.gather_rows(pv[self.phoneme_table.0], &plan.phoneme_ids)?;
            let pool = tape.param(&plan.pool);
            let prons = tape.matmul(pool, phon)?;
            let p = graph::mix(tape, sampled, prons)?;
            p_rows.push(p);
            s_rows.push(at.s);
        }

        let p_all = if opts.zero_pronunciation {
            tape.constant(vec![l, d], vec![F::zero(); l * d])?
        } else {
            tape.concat(&p_rows, 0)?
        };
        let s_all = if opts.zero_semantics {
            tape.constant(vec![l, d], vec![F::zero(); l * d])?
        } else {
            tape.concat(&s_rows, 0)?
        };
        let g = self.linguistic.forward(tape, pv, p_all, s_all)?;
        let out = tape.matmul(g, pv[self.decoder_w.0])?;
        let prediction = tape.add_row(out, pv[self.decoder_b.0])?;
        Ok(ForwardOutput { prediction, diagnostics })
    }

    /// Forward pass on a private tape; returns the prediction and diagnostics.
    pub fn predict(&self, chars: &[char], opts: &ForwardOptions<'_>) -> Result<(Tensor<F>, Vec<CharDiagnostics<F>>), PipelineError> {
        let mut tape = Tape::new();
        let pv = self.store.attach(&mut tape);
        let out = self.forward(&mut tape, &pv, chars, opts)?;
        Ok((tape.tensor(out.prediction), out.diagnostics))
    }

    /// Replaces parameters by name. Every parameter must be present with its shape.
    pub fn load_params(&mut self, params: Vec<(String, Tensor<F>)>) -> Result<(), PipelineError> {
        if params.len() != self.store.len() {
            return Err(PipelineError::ParamMismatch(format!(
                "expected {} parameters, found {}",
                self.store.len(),
                params.len()
            )));
        }
        for (name, mut t) in params {
            let id = self
                .store
                .id(&name)
                .ok_or_else(|| PipelineError::ParamMismatch(format!("unknown parameter `{name}`")))?;
            let slot = self.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(PipelineError::ParamMismatch(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            t.requires_grad = true;
            *slot = t;
        }
        Ok(())
    }
}
