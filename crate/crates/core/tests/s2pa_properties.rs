use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dictg2p::encoders::KeyMode;
use dictg2p::numerics::{Tape, Tensor};
use dictg2p::pipeline::{infer_pronunciations, ForwardOptions, Lexicon, Model, ModelConfig, Noise};
use dictg2p::s2pa::{
    aggregate_pron_weights, apply_rules, attention_scores, gumbel_softmax_sample, OccurrenceContext,
    PronunciationDistribution, RuleSet,
};
use dictg2p::synthcorpus::{emit_oracle_dictionary, generate_spec, ToyParams};

struct Case {
    z: Vec<f64>,
    keys: Tensor<f64>,
    legend: Vec<(usize, usize)>,
    m: usize,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=4);
    let d = rng.random_range(1..=8);
    let legend: Vec<(usize, usize)> = (0..m).flat_map(|j| (0..rng.random_range(1..=5)).map(move |k| (j, k))).collect();
    let spread = rng.random_range(0.1..6.0);
    let keys: Vec<f64> = (0..legend.len() * d).map(|_| rng.random_range(-spread..spread)).collect();
    let z = (0..d).map(|_| rng.random_range(-spread..spread)).collect();
    Case {
        z,
        keys: Tensor::new(vec![legend.len(), d], keys).unwrap(),
        legend,
        m,
    }
}

fn weights(c: &Case, scale: f64) -> Vec<f64> {
    let att = attention_scores(&c.z, &c.keys, scale).unwrap();
    aggregate_pron_weights(&att.normalized, &c.legend, c.m).unwrap()
}

fn argmax(x: &[f64]) -> usize {
    (0..x.len()).fold(0, |best, i| if x[i] > x[best] { i } else { best })
}

proptest! {
    #[test]
    fn weights_are_a_distribution(seed in any::<u64>(), scale in 0.5f64..10.0) {
        let w = weights(&case(seed), scale);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn gloss_order_does_not_matter(seed in any::<u64>(), shuffle in any::<u64>()) {
        let c = case(seed);
        let mut order: Vec<usize> = (0..c.legend.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let d = c.z.len();
        let keys: Vec<f64> = order.iter().flat_map(|&r| c.keys.row(r).to_vec()).collect();
        let permuted = Case {
            z: c.z.clone(),
            keys: Tensor::new(vec![order.len(), d], keys).unwrap(),
            legend: order.iter().map(|&r| c.legend[r]).collect(),
            m: c.m,
        };
        let (a, b) = (weights(&c, 2.0), weights(&permuted, 2.0));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn scaling_the_context_keeps_the_best_row(seed in any::<u64>(), factor in 0.01f64..100.0) {
        let c = case(seed);
        let base = attention_scores(&c.z, &c.keys, 3.0).unwrap().raw;
        let mut sorted = base.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        // near-ties may legitimately flip under rounding
        prop_assume!(sorted.len() < 2 || sorted[0] - sorted[1] > 1e-9 * sorted[0].abs().max(1.0));
        let z: Vec<f64> = c.z.iter().map(|v| v * factor).collect();
        let scaled = attention_scores(&z, &c.keys, 3.0).unwrap().raw;
        prop_assert_eq!(argmax(&base), argmax(&scaled));
    }

    #[test]
    fn one_hot_weights_survive_moderate_noise(g0 in -1.0f64..1.0, g1 in -1.0f64..1.0, first in any::<bool>()) {
        let w = if first { [1.0, 0.0] } else { [0.0, 1.0] };
        let y = gumbel_softmax_sample(&w, 1.0, &[g0, g1]).unwrap();
        prop_assert!((y[0] - w[0]).abs() <= 1e-9 && (y[1] - w[1]).abs() <= 1e-9, "{:?}", y);
    }

    #[test]
    fn forced_distribution_ignores_noise(g in proptest::collection::vec(-50.0f64..50.0, 3), tau in 0.01f64..10.0) {
        let prons = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let d = PronunciationDistribution::new(vec![0.0, 0.0, 1.0], true, g, tau, &prons).unwrap();
        prop_assert_eq!(d.sampled, vec![0.0, 0.0, 1.0]);
        prop_assert_eq!(d.mixed, vec![0.5, 0.5]);
    }
}

#[test]
fn unmatched_rules_leave_weights_alone() {
    let rules: RuleSet = "一\tnext-tone\t4\t1\n长\tprev-char\t生\t1\n".parse().unwrap();
    let chars: Vec<char> = "天长一是".chars().collect();
    let tones = [Some(1), Some(2), Some(1), Some(2)];
    for position in 0..chars.len() {
        let mut w = vec![0.2, 0.5, 0.3];
        let ctx = OccurrenceContext {
            chars: &chars,
            position,
            tones: &tones,
        };
        assert!(!apply_rules(&mut w, &ctx, &rules).unwrap());
        assert_eq!(w, vec![0.2, 0.5, 0.3]);
    }
}

fn toy_model(seed: u64) -> (Model<f64>, dictg2p::synthcorpus::ToyLanguageSpec) {
    let params = ToyParams {
        chars: 24,
        polyphones: 3,
        classes: 3,
        d_model: 16,
        feature_dim: 8,
        ..ToyParams::default()
    };
    let spec = generate_spec(params, seed).unwrap();
    let (dict, keys) = emit_oracle_dictionary(&spec).unwrap();
    let mut config = ModelConfig::default();
    config.encoder.d_model = 16;
    config.encoder.semantic_layers = 1;
    config.encoder.linguistic_layers = 1;
    config.encoder.heads = 2;
    config.feature_dim = 8;
    config.seed = seed;
    let lexicon = Lexicon::new(dict, KeyMode::Imported, Some(&keys), 16).unwrap();
    (Model::new(config, lexicon).unwrap(), spec)
}

/// A next-tone rule on a toy polyphone fires before a tone-4 monophone and nowhere else,
/// whatever the model would have chosen.
#[test]
fn tone_rule_on_the_toy_language() {
    for seed in 0..4 {
        let (model, spec) = toy_model(seed);
        let tone = |c: &dictg2p::synthcorpus::ToyChar| c.prons[0].phonemes.last().unwrap().chars().last().unwrap().to_digit(10);
        let poly = spec.characters.iter().find(|c| c.prons.len() == 3).unwrap();
        let fourth = spec.characters.iter().find(|c| !c.is_polyphone() && tone(c) == Some(4)).unwrap();
        let other = spec.characters.iter().find(|c| !c.is_polyphone() && tone(c) != Some(4)).unwrap();
        let filler = spec.characters.iter().filter(|c| !c.is_polyphone()).nth(5).unwrap();

        for forced in 0..3 {
            let rules: RuleSet = format!("{}\tnext-tone\t4\t{forced}\n", poly.ch).parse().unwrap();
            let hit = [filler.ch, poly.ch, fourth.ch];
            let inf = infer_pronunciations(&model, &hit, Some(&rules), Some(seed)).unwrap();
            assert!(inf.diagnostics[1].forced);
            assert_eq!(inf.pronunciations[1].phonemes, poly.prons[forced].phonemes);

            let miss = [filler.ch, poly.ch, other.ch];
            let plain = infer_pronunciations(&model, &miss, None, None).unwrap();
            let ruled = infer_pronunciations(&model, &miss, Some(&rules), None).unwrap();
            assert!(!ruled.diagnostics[1].forced);
            assert_eq!(ruled.texts(), plain.texts());
        }
    }
}

/// The character embedding reaches the loss only through attention; with `s'` zeroed
/// the remaining path is the pronunciation weights.
#[test]
fn character_embedding_gets_gradient_through_attention() {
    let (model, spec) = toy_model(3);
    let poly = spec.characters.iter().find(|c| c.is_polyphone()).unwrap().ch;
    let mono: Vec<char> = spec.characters.iter().filter(|c| !c.is_polyphone()).map(|c| c.ch).take(4).collect();
    let chars = vec![mono[0], mono[1], poly, mono[2], mono[3]];
    let target = Tensor::from_f64(vec![5, 8], &(0..40).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
    let embedding = model.semantic_embedding().0;
    let row = model.lexicon.chars.id(poly);
    let d = model.config.encoder.d_model;
    let opts = ForwardOptions {
        noise: Noise::Sample(1),
        tau: 0.8,
        zero_semantics: true,
        ..ForwardOptions::default()
    };

    let loss_of = |m: &Model<f64>| -> (f64, Option<Tensor<f64>>) {
        let mut tape = Tape::new();
        let pv = m.store.attach(&mut tape);
        let out = m.forward(&mut tape, &pv, &chars, &opts).unwrap();
        let t = tape.input(target.clone());
        let loss = tape.mse_loss(out.prediction, t, None).unwrap();
        let value = tape.scalar_value(loss);
        let mut grads = tape.backward(loss).unwrap();
        (value, m.store.collect_grads(&pv, &mut grads).swap_remove(embedding))
    };
    let grad = loss_of(&model).1.expect("embedding gradient");
    let g_row = &grad.data()[row * d..(row + 1) * d];
    assert!(g_row.iter().any(|&g| g != 0.0));

    let h = 1e-5;
    for k in 0..d {
        let at = |delta: f64| {
            let mut moved = model.clone();
            moved.store.tensors_mut()[embedding].data_mut()[row * d + k] += delta;
            loss_of(&moved).0
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let err = (g_row[k] - numeric).abs() / g_row[k].abs().max(numeric.abs()).max(1e-7);
        assert!(err < 1e-4, "entry {k}: analytic {} numeric {numeric}", g_row[k]);
    }
}
