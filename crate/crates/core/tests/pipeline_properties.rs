use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dictg2p::encoders::KeyMode;
use dictg2p::numerics::{Tape, TauSchedule, Tensor};
use dictg2p::pipeline::{
    Checkpoint, Corpus, ForwardOptions, Labels, Lexicon, Model, ModelConfig, Noise, PipelineError, RunOptions, Split,
    Trainer, TrainingBatch,
};
use dictg2p::synthcorpus::{emit_oracle_dictionary, generate_corpus, generate_spec, GeneratedCorpus, ToyLanguageSpec, ToyParams};

struct Toy {
    spec: ToyLanguageSpec,
    generated: GeneratedCorpus,
    dict: dictg2p::dictionary::Dictionary,
    keys: dictg2p::encoders::KeyFile,
}

fn toy(seed: u64) -> Toy {
    let params = ToyParams {
        chars: 24,
        polyphones: 3,
        classes: 3,
        d_model: 16,
        feature_dim: 8,
        ..ToyParams::default()
    };
    let spec = generate_spec(params, seed).unwrap();
    let generated = generate_corpus(&spec, 24, 6, seed);
    let (dict, keys) = emit_oracle_dictionary(&spec).unwrap();
    Toy { spec, generated, dict, keys }
}

fn config(seed: u64) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.d_model = 16;
    c.encoder.semantic_layers = 1;
    c.encoder.linguistic_layers = 1;
    c.feature_dim = 8;
    c.batch_size = 4;
    c.warmup_steps = 10;
    c.log_every = 1;
    c.seed = seed;
    c
}

fn model(t: &Toy, config: ModelConfig) -> Model<f64> {
    let lexicon = Lexicon::new(t.dict.clone(), config.key_mode, Some(&t.keys), config.encoder.d_model).unwrap();
    Model::new(config, lexicon).unwrap()
}

fn train_corpus(t: &Toy) -> Corpus<f64> {
    t.generated.to_corpus::<f64>().unwrap().split(Split::Train)
}

fn until(step: u64) -> RunOptions<'static, f64> {
    RunOptions {
        until_step: step,
        ..RunOptions::default()
    }
}

#[test]
fn prediction_shape_follows_the_sentence() {
    let t = toy(1);
    let m = model(&t, config(1));
    let pool: Vec<char> = t.spec.characters.iter().map(|c| c.ch).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for l in [1, 2, 9, 40, 128, 256] {
        let chars: Vec<char> = (0..l).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        let (pred, diags) = m.predict(&chars, &ForwardOptions::default()).unwrap();
        assert_eq!(pred.shape(), &[l, 8]);
        assert!(pred.all_finite());
        assert_eq!(diags.len(), l);
        let (again, _) = m.predict(&chars, &ForwardOptions::default()).unwrap();
        assert!(pred.bit_eq(&again));
    }
    assert!(matches!(m.predict(&[], &ForwardOptions::default()), Err(PipelineError::EmptySentence)));
}

#[test]
fn prediction_depends_on_the_pronunciation_branch() {
    let t = toy(2);
    let m = model(&t, config(2));
    let chars = &t.generated.sentences[0].chars;
    let (full, _) = m.predict(chars, &ForwardOptions::default()).unwrap();
    let ablated = ForwardOptions {
        zero_pronunciation: true,
        ..ForwardOptions::default()
    };
    let (without, _) = m.predict(chars, &ablated).unwrap();
    assert!(full.data().iter().zip(without.data()).any(|(a, b)| (a - b).abs() > 1e-6));
}

fn mse(pred: &Tensor<f64>, target: &Tensor<f64>, mask: Option<&[bool]>) -> f64 {
    let mut tape = Tape::new();
    let (p, t) = (tape.input(pred.clone()), tape.input(target.clone()));
    let l = tape.mse_loss(p, t, mask).unwrap();
    tape.scalar_value(l)
}

#[test]
fn reconstruction_loss_hand_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = Tensor::new(vec![5, 3], (0..15).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    assert_eq!(mse(&target, &target, None), 0.0);
    let shifted = Tensor::new(vec![5, 3], target.data().iter().map(|v| v + 1.0).collect()).unwrap();
    assert!((mse(&shifted, &target, None) - 1.0).abs() < 1e-12);

    let pred = Tensor::new(vec![5, 3], (0..15).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let by_hand = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 15.0;
    assert!((mse(&pred, &target, None) - by_hand).abs() < 1e-9);
    assert!(mse(&pred, &target, None) >= 0.0);

    // padding rows contribute nothing
    let mask = [true, false, true, true, false];
    let kept: Vec<usize> = (0..5).filter(|&r| mask[r]).collect();
    let masked_by_hand = kept
        .iter()
        .flat_map(|&r| pred.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b) * (a - b)))
        .sum::<f64>()
        / (kept.len() * 3) as f64;
    assert!((mse(&pred, &target, Some(&mask)) - masked_by_hand).abs() < 1e-9);

    let mut tape = Tape::new();
    let (p, t) = (tape.input(pred.clone()), tape.input(Tensor::zeros(vec![5, 2])));
    assert!(tape.mse_loss(p, t, None).is_err());
}

#[test]
fn labels_never_reach_the_gradients() {
    let t = toy(4);
    let trainer = Trainer::new(model(&t, config(4)));
    let corpus = train_corpus(&t);
    let labels = t.generated.labels();
    let picked: Vec<_> = corpus.utterances.iter().take(4).collect();
    let labelled = TrainingBatch::assemble(&picked, Some(&labels)).unwrap();
    assert!(labelled.eval_labels.is_some());
    let (l0, g0) = trainer.batch_gradients(&labelled.without_labels()).unwrap();
    let mut wrong = Labels::default();
    for u in &picked {
        wrong.insert(u.id, vec![7; u.chars.len()]);
    }
    let (l1, g1) = trainer.batch_gradients(&TrainingBatch::assemble(&picked, Some(&wrong)).unwrap()).unwrap();
    let (l2, g2) = trainer.batch_gradients(&labelled).unwrap();
    assert_eq!(l0.to_bits(), l1.to_bits());
    assert_eq!(l0.to_bits(), l2.to_bits());
    for g in [&g1, &g2] {
        assert!(g0.iter().zip(g).all(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => a.bit_eq(b),
            (None, None) => true,
            _ => false,
        }));
    }
}

#[test]
fn resuming_for_zero_steps_is_a_fixed_point() {
    let t = toy(5);
    let corpus = train_corpus(&t);
    let mut trainer = Trainer::new(model(&t, config(5)));
    trainer.run(&corpus, &until(6)).unwrap();
    let ck = trainer.checkpoint();
    let bytes = ck.encode().unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    let summary = resumed.run(&corpus, &until(6)).unwrap();
    assert_eq!(summary.steps, 0);
    assert_eq!(resumed.checkpoint().encode().unwrap(), bytes);
}

#[test]
fn checkpoints_reject_mismatched_widths() {
    let t = toy(6);
    let ck = Trainer::new(model(&t, config(6))).checkpoint();
    let params = ToyParams { d_model: 8, ..t.spec.params.clone() };
    let narrow_spec = generate_spec(params, 6).unwrap();
    let (dict, keys) = emit_oracle_dictionary(&narrow_spec).unwrap();
    let mut c = config(6);
    c.encoder.d_model = 8;
    let mut narrow = Model::new(c, Lexicon::new(dict, KeyMode::Imported, Some(&keys), 8).unwrap()).unwrap();
    assert!(matches!(ck.restore_into(&mut narrow), Err(PipelineError::ParamMismatch(_))));
    // keys of the wrong width are refused up front
    assert!(Lexicon::<f64>::new(t.dict.clone(), KeyMode::Imported, Some(&keys), 16).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let t = toy(7);
    let corpus = train_corpus(&t);
    let mut trainer = Trainer::new(model(&t, config(7)));
    trainer.run(&corpus, &until(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    trainer.checkpoint().save(&path).unwrap();
    let back = Checkpoint::<f64>::load(&path).unwrap().to_model().unwrap();
    for s in t.generated.sentences.iter().take(5) {
        for noise in [Noise::Off, Noise::Sample(3)] {
            let opts = ForwardOptions { noise, ..ForwardOptions::default() };
            let (a, _) = trainer.model.predict(&s.chars, &opts).unwrap();
            let (b, _) = back.predict(&s.chars, &opts).unwrap();
            assert!(a.bit_eq(&b));
        }
    }
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    assert!(Checkpoint::<f64>::decode(&bytes).is_err());
}

#[test]
fn logged_temperature_follows_the_schedule() {
    let t = toy(8);
    let corpus = train_corpus(&t);
    let mut c = config(8);
    c.tau = TauSchedule {
        initial: 1.0,
        min: 0.2,
        rate: 0.05,
        every: 3,
    };
    let schedule = c.tau;
    let mut trainer = Trainer::new(model(&t, c));
    trainer.run(&corpus, &until(40)).unwrap();
    assert_eq!(trainer.metrics.len(), 40);
    for (i, m) in trainer.metrics.iter().enumerate() {
        assert_eq!(m.step, i as u64 + 1);
        // record `s` describes the update taken from step s - 1
        assert_eq!(m.tau, schedule.at(m.step - 1));
        assert!(m.loss.is_finite());
    }
    assert!(trainer.metrics.last().unwrap().tau < trainer.metrics[0].tau);
    assert_eq!(trainer.tau(), schedule.at(40));

    let mut default_run = Trainer::new(model(&t, config(8)));
    default_run.run(&corpus, &until(5)).unwrap();
    for m in &default_run.metrics {
        assert_eq!(m.tau, dictg2p::numerics::anneal_tau(m.step - 1));
    }
}

#[test]
fn divergence_stops_with_the_last_good_state() {
    let t = toy(9);
    let corpus = train_corpus(&t);
    let mut c = config(9);
    c.lr_scale = 1e9;
    c.warmup_steps = 1;
    let mut trainer = Trainer::new(model(&t, c));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    let opts = RunOptions {
        until_step: 200,
        checkpoint_path: Some(path.clone()),
        ..RunOptions::default()
    };
    match trainer.run(&corpus, &opts) {
        Err(PipelineError::Diverged { step, loss, checkpoint }) => {
            assert!(!loss.is_finite() || loss > 1e6);
            assert_eq!(checkpoint.as_deref(), Some(path.as_path()));
            let ck = Checkpoint::<f64>::load(&path).unwrap();
            assert_eq!(ck.step, step);
            assert!(ck.params.iter().all(|(_, p)| p.all_finite()));
            assert!(trainer.metrics.iter().all(|m| m.loss.is_finite() && m.loss <= 1e6));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn trainable_keys_train() {
    let t = toy(10);
    let corpus = train_corpus(&t);
    let mut c = config(10);
    c.key_mode = KeyMode::Trainable;
    c.warmup_steps = 20;
    let lexicon = Lexicon::new(t.dict.clone(), KeyMode::Trainable, None, 16).unwrap();
    let mut trainer = Trainer::new(Model::<f64>::new(c, lexicon).unwrap());
    assert!(trainer.model.lexicon.keys.vectors().is_none());
    let loss = |tr: &Trainer<f64>| -> f64 {
        corpus
            .utterances
            .iter()
            .map(|u| {
                let (p, _) = tr.model.predict(&u.chars, &ForwardOptions::default()).unwrap();
                mse(&p, &u.targets, None)
            })
            .sum::<f64>()
            / corpus.len() as f64
    };
    let before = loss(&trainer);
    trainer.run(&corpus, &until(150)).unwrap();
    let after = loss(&trainer);
    assert!(after < 0.5 * before, "loss {before} -> {after}");
    let ck = trainer.checkpoint();
    assert!(ck.keys.is_none());
    let back = ck.to_model().unwrap();
    let chars = &corpus.utterances[0].chars;
    assert!(back.predict(chars, &ForwardOptions::default()).unwrap().0.bit_eq(&trainer.model.predict(chars, &ForwardOptions::default()).unwrap().0));
}
