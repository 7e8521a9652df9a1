use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{lit, noam_lr, Adam, AdamConfig, Real, Tape, Tensor};

use super::{infer_pronunciations, Checkpoint, Corpus, ForwardOptions, Labels, Model, Noise, PipelineError, TrainingBatch};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub tau: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

/// Model plus optimizer state. Batch order and Gumbel noise are pure functions of
/// `(seed, step)`, so a run resumed from a checkpoint continues the same trajectory.
#[derive(Debug, Clone)]
pub struct Trainer<F: Real> {
    pub model: Model<F>,
    pub adam: Adam<F>,
    pub step: u64,
    pub metrics: Vec<MetricRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'d, F: Real> {
    /// Stop once this many optimizer steps have been taken in total.
    pub until_step: u64,
    pub time_limit: Option<Duration>,
    pub eval: Option<(&'d Corpus<F>, &'d Labels)>,
    pub eval_every: u64,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub elapsed: Duration,
    pub timed_out: bool,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Order of sentence indices in `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x0b5e_55ed));
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Noise seed for sentence `b` of the batch at `step`.
fn noise_seed(seed: u64, step: u64, b: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x6e01_5e));
    rng.set_stream(step);
    rng.set_word_pos(2 * b as u128);
    rng.random()
}

impl<F: Real> Trainer<F> {
    pub fn new(model: Model<F>) -> Self {
        let adam = Adam::new(AdamConfig::default(), model.store.tensors());
        Self {
            model,
            adam,
            step: 0,
            metrics: Vec::new(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint<F>) -> Result<Self, PipelineError> {
        let model = ck.to_model()?;
        let mut t = Self::new(model);
        if let Some(state) = &ck.adam {
            t.adam.state = state.clone();
        }
        t.step = ck.step;
        t.metrics = ck.metrics.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint::capture(&self.model, self.step, Some(&self.adam.state), &self.metrics)
    }

    /// Gumbel temperature used for the next step.
    pub fn tau(&self) -> f64 {
        self.model.config.tau.at(self.step)
    }

    /// Learning rate used for the next step.
    pub fn lr(&self) -> f64 {
        let c = &self.model.config;
        c.lr_scale * noam_lr(self.step + 1, c.warmup_steps, c.encoder.d_model)
    }

    /// Masked mean squared error over the batch and its gradient for every parameter,
    /// at the current step's temperature and noise.
    pub fn batch_gradients(&self, batch: &TrainingBatch<F>) -> Result<(f64, Vec<Option<Tensor<F>>>), PipelineError> {
        let total = batch.real_rows();
        if total == 0 {
            return Err(PipelineError::Data("batch has no rows".into()));
        }
        let mut sum: Vec<Option<Tensor<F>>> = vec![None; self.model.store.len()];
        let mut loss = 0.0;
        let tau = self.tau();
        for (b, chars) in batch.sentences.iter().enumerate() {
            let opts = ForwardOptions {
                noise: Noise::Sample(noise_seed(self.model.config.seed, self.step, b)),
                tau,
                hard: self.model.config.hard_gumbel,
                ..ForwardOptions::default()
            };
            let mut tape = Tape::new();
            let pv = self.model.store.attach(&mut tape);
            let out = self.model.forward(&mut tape, &pv, chars, &opts)?;
            let target = tape.input(batch.sentence_targets(b));
            let mse = tape.mse_loss(out.prediction, target, None)?;
            let weighted = tape.scale(mse, lit(chars.len() as f64 / total as f64));
            loss += tape.scalar_value(weighted).as_f64();
            let mut grads = tape.backward(weighted)?;
            for (slot, g) in sum.iter_mut().zip(self.model.store.collect_grads(&pv, &mut grads)) {
                match (slot.as_mut(), g) {
                    (Some(acc), Some(g)) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &x)| *a += x),
                    (None, Some(g)) => *slot = Some(g),
                    (_, None) => {}
                }
            }
        }
        Ok((loss, sum))
    }

    /// One optimizer step. On divergence the parameters are left untouched.
    pub fn train_step(&mut self, batch: &TrainingBatch<F>) -> Result<f64, PipelineError> {
        let (loss, grads) = self.batch_gradients(batch)?;
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(PipelineError::Diverged {
                step: self.step,
                loss,
                checkpoint: None,
            });
        }
        let lr = self.lr();
        let tau = self.tau();
        self.adam
            .step(self.model.store.tensors_mut(), &grads, lr)
            .map_err(|e| {
                log::error!("step {}: {e}", self.step);
                PipelineError::Diverged {
                    step: self.step,
                    loss,
                    checkpoint: None,
                }
            })?;
        self.step += 1;
        let log_every = self.model.config.log_every.max(1);
        if self.step % log_every == 0 || self.step == 1 {
            self.metrics.push(MetricRecord {
                step: self.step,
                loss,
                tau,
                lr,
                eval_accuracy: None,
            });
        }
        Ok(loss)
    }

    /// Batch for the current step.
    pub fn next_batch(&self, corpus: &Corpus<F>, order: &[usize]) -> Result<TrainingBatch<F>, PipelineError> {
        let bs = self.model.config.batch_size.min(corpus.len());
        let per_epoch = (corpus.len() / bs).max(1) as u64;
        let b = (self.step % per_epoch) as usize;
        let picked: Vec<_> = order[b * bs..(b + 1) * bs].iter().map(|&i| &corpus.utterances[i]).collect();
        TrainingBatch::assemble(&picked, None)
    }

    fn epoch_of(&self, corpus: &Corpus<F>) -> u64 {
        let bs = self.model.config.batch_size.min(corpus.len());
        self.step / (corpus.len() / bs).max(1) as u64
    }

    /// Trains until `until_step`, the time limit, or divergence.
    pub fn run(&mut self, corpus: &Corpus<F>, opts: &RunOptions<'_, F>) -> Result<RunSummary, PipelineError> {
        if corpus.is_empty() {
            return Err(PipelineError::Data("training corpus is empty".into()));
        }
        let start = Instant::now();
        let mut metrics_file = match &opts.metrics_path {
            Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        let mut epoch = self.epoch_of(corpus);
        let mut order = epoch_order(self.model.config.seed, epoch, corpus.len());
        let mut last_loss = f64::NAN;
        let mut timed_out = false;
        let first_step = self.step;
        while self.step < opts.until_step {
            if opts.time_limit.is_some_and(|t| start.elapsed() >= t) {
                timed_out = true;
                break;
            }
            if self.epoch_of(corpus) != epoch {
                epoch = self.epoch_of(corpus);
                order = epoch_order(self.model.config.seed, epoch, corpus.len());
            }
            let batch = self.next_batch(corpus, &order)?;
            let logged = self.metrics.len();
            match self.train_step(&batch) {
                Ok(loss) => last_loss = loss,
                Err(PipelineError::Diverged { step, loss, .. }) => {
                    let saved = match &opts.checkpoint_path {
                        Some(p) => {
                            self.checkpoint().save(p)?;
                            Some(p.clone())
                        }
                        None => None,
                    };
                    return Err(PipelineError::Diverged {
                        step,
                        loss,
                        checkpoint: saved,
                    });
                }
                Err(e) => return Err(e),
            }
            if let Some((eval, labels)) = opts.eval {
                if opts.eval_every > 0 && self.step % opts.eval_every == 0 {
                    let acc = polyphone_accuracy(&self.model, eval, labels)?;
                    log::info!("step {} held-out polyphone accuracy {:.4}", self.step, acc);
                    match self.metrics.last_mut() {
                        Some(m) if m.step == self.step => m.eval_accuracy = Some(acc),
                        _ => self.metrics.push(MetricRecord {
                            step: self.step,
                            loss: last_loss,
                            tau: self.model.config.tau.at(self.step - 1),
                            lr: self.lr(),
                            eval_accuracy: Some(acc),
                        }),
                    }
                }
            }
            if self.metrics.len() > logged {
                if let Some(m) = self.metrics.last() {
                    log::info!("step {} loss {:.6} tau {:.4} lr {:.2e}", m.step, m.loss, m.tau, m.lr);
                    if let Some(f) = metrics_file.as_mut() {
                        writeln!(f, "{}", serde_json::to_string(m).expect("metric records serialize"))?;
                    }
                }
            }
            if let Some(p) = &opts.checkpoint_path {
                if opts.checkpoint_every > 0 && self.step % opts.checkpoint_every == 0 {
                    self.checkpoint().save(p)?;
                }
            }
        }
        if let Some(p) = &opts.checkpoint_path {
            self.checkpoint().save(p)?;
        }
        Ok(RunSummary {
            steps: self.step - first_step,
            final_loss: last_loss,
            elapsed: start.elapsed(),
            timed_out,
        })
    }
}

/// Fraction of polyphone occurrences in `corpus` whose noise-free argmax matches
/// `labels`.
pub fn polyphone_accuracy<F: Real>(model: &Model<F>, corpus: &Corpus<F>, labels: &Labels) -> Result<f64, PipelineError> {
    let (mut hit, mut total) = (0usize, 0usize);
    for u in &corpus.utterances {
        let truth = labels
            .get(u.id)
            .ok_or_else(|| PipelineError::Data(format!("no labels for sentence {}", u.id)))?;
        let inf = infer_pronunciations(model, &u.chars, None, None)?;
        for (d, &t) in inf.diagnostics.iter().zip(truth) {
            if d.weights.len() > 1 {
                total += 1;
                hit += usize::from(d.chosen == t);
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}
