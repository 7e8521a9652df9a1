use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dictg2p::dictionary::{
    decode_snapshot, encode_snapshot, parse_dictionary, parse_dictionary_lenient, write_dictionary, CharacterRecord,
    DictEntry, DictError, Dictionary, GlossEntry, ParseOptions, Pronunciation,
};
use dictg2p::synthcorpus::{emit_oracle_dictionary, generate_spec, ToyParams};

const INITIALS: &[&str] = &["B", "P", "M", "F", "D", "T", "N", "L", "G", "K", "H", "ZH", "CH", "SH"];
const FINALS: &[&str] = &["A", "O", "E", "I", "U", "AI", "EI", "AO", "OU", "AN", "ANG"];

fn random_record(rng: &mut ChaCha8Rng, ch: char) -> CharacterRecord {
    let m = rng.random_range(1..=4);
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    while entries.len() < m {
        let p = vec![
            INITIALS.choose(rng).unwrap().to_string(),
            format!("{}{}", FINALS.choose(rng).unwrap(), rng.random_range(1..=5)),
        ];
        if !seen.insert(p.clone()) {
            continue;
        }
        let u = rng.random_range(1..=12);
        let tokens = (0..u).map(|_| char::from_u32(rng.random_range(0x4e00..0x9fa5)).unwrap()).collect();
        entries.push(DictEntry {
            pron: Pronunciation::new(p, entries.len()),
            gloss: GlossEntry { tokens },
        });
    }
    CharacterRecord { character: ch, entries }
}

fn random_dictionary(seed: u64, n: usize) -> Dictionary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chars = BTreeSet::new();
    while chars.len() < n {
        chars.insert(char::from_u32(rng.random_range(0x4e00..0x9fa5)).unwrap());
    }
    let records = chars.into_iter().map(|c| random_record(&mut rng, c)).collect();
    Dictionary::from_records(records).unwrap()
}

fn text_of(dict: &Dictionary) -> String {
    let mut buf = Vec::new();
    write_dictionary(dict, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn text_round_trip(seed in any::<u64>(), n in 0usize..30) {
        let d = random_dictionary(seed, n);
        let back = parse_dictionary(text_of(&d).as_bytes(), &ParseOptions::default()).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn snapshot_round_trip(seed in any::<u64>(), n in 0usize..30) {
        let d = random_dictionary(seed, n);
        prop_assert_eq!(decode_snapshot(&encode_snapshot(&d)).unwrap(), d);
    }

    #[test]
    fn truncated_snapshot_is_rejected(seed in any::<u64>(), n in 1usize..10, cut in 0.0f64..1.0) {
        let bytes = encode_snapshot(&random_dictionary(seed, n));
        let at = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(matches!(decode_snapshot(&bytes[..at]), Err(DictError::Snapshot(_))));
    }

    /// Valid records interleaved with junk, blanks and repeats: every data line is
    /// accounted for exactly once.
    #[test]
    fn lenient_parse_accounts_for_every_line(seed in any::<u64>(), n in 1usize..20, junk in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_dictionary(seed, n);
        let valid: Vec<String> = text_of(&d).lines().skip(1).map(String::from).collect();
        let bad = [
            String::new(),
            "{\"char\":\"ab\",\"prons\":[{\"p\":\"A1\",\"gloss\":\"x\"}]}".to_string(),
            "{\"char\":\"口\",\"prons\":[]}".to_string(),
            "{\"char\":\"口\",\"prons\":[{\"p\":\"\\q\",\"gloss\":\"x\"}]}".to_string(),
            "not json".to_string(),
            "{\"char\":\"口\",\"prons\":[{\"p\":\"K OU3\",\"gloss\":\"  \"}]}".to_string(),
        ];
        let mut lines = valid.clone();
        for _ in 0..junk {
            let line = if rng.random_bool(0.5) { bad.choose(&mut rng).unwrap().clone() } else { valid.choose(&mut rng).unwrap().clone() };
            let at = rng.random_range(0..=lines.len());
            lines.insert(at, line);
        }
        let text = format!("dictg2p-dict v1\n{}\n", lines.join("\n"));
        let report = parse_dictionary_lenient(text.as_bytes(), &ParseOptions::default()).unwrap();
        prop_assert_eq!(report.data_lines, lines.len());
        prop_assert_eq!(report.dictionary.len() + report.errors.len(), lines.len());
        let positions: Vec<usize> = report.errors.iter().map(|(l, _)| *l).collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(positions.iter().all(|&l| l >= 2 && l <= lines.len() + 1));
        for r in d.records() {
            prop_assert_eq!(report.dictionary.lookup(r.character).unwrap(), r);
        }
    }

    #[test]
    fn stats_match_brute_force(seed in any::<u64>(), n in 0usize..40) {
        let d = random_dictionary(seed, n);
        let s = d.stats();
        let mut polyphones = 0;
        let mut max_prons = 0;
        let mut max_u = 0;
        let mut inventory = BTreeSet::new();
        for r in d.records() {
            if r.entries.len() > 1 {
                polyphones += 1;
            }
            max_prons = max_prons.max(r.entries.len());
            for e in &r.entries {
                max_u = max_u.max(e.gloss.tokens.len());
                inventory.extend(e.pron.phonemes.iter().cloned());
            }
        }
        prop_assert_eq!(s.characters, n);
        prop_assert_eq!(s.polyphones, polyphones);
        prop_assert_eq!(s.max_prons, max_prons);
        prop_assert_eq!(s.max_gloss_tokens, max_u);
        prop_assert_eq!(s.phonemes, inventory.len());
    }
}

#[test]
fn empty_stream_has_empty_stats() {
    for text in ["", "dictg2p-dict v1\n"] {
        let d = parse_dictionary(text.as_bytes(), &ParseOptions::default()).unwrap();
        assert_eq!(d.stats().characters, 0);
        assert_eq!(d.stats().polyphones, 0);
    }
}

#[test]
fn gloss_cap_truncates_the_tail() {
    let text = "dictg2p-dict v1\n{\"char\":\"长\",\"prons\":[{\"p\":\"CH ANG2\",\"gloss\":\"一二三四五\"}]}\n";
    let d = parse_dictionary(text.as_bytes(), &ParseOptions { max_gloss_tokens: 3 }).unwrap();
    assert_eq!(d.lookup('长').unwrap().entries[0].gloss.tokens, vec!['一', '二', '三']);
}

#[test]
fn toy_dictionary_stats_follow_the_generator() {
    for (seed, params) in [
        (1, ToyParams::default()),
        (2, ToyParams { chars: 24, polyphones: 3, classes: 3, gloss_tokens: 5, ..ToyParams::default() }),
        (3, ToyParams { chars: 10, polyphones: 1, classes: 2, ..ToyParams::default() }),
    ] {
        let spec = generate_spec(params.clone(), seed).unwrap();
        let (dict, _) = emit_oracle_dictionary(&spec).unwrap();
        let s = dict.stats();
        assert_eq!(s.characters, params.chars);
        assert_eq!(s.polyphones, params.polyphones);
        let declared_max = spec.characters.iter().map(|c| c.prons.len()).max().unwrap();
        assert_eq!(s.max_prons, declared_max);
        assert!(s.max_prons <= params.classes);
        assert_eq!(s.max_gloss_tokens, params.gloss_tokens);
        let inventory: BTreeSet<&String> = spec.characters.iter().flat_map(|c| c.prons.iter().flat_map(|p| &p.phonemes)).collect();
        assert_eq!(s.phonemes, inventory.len());
        assert_eq!(s.phonemes, spec.codebook.len());

        let text = text_of(&dict);
        assert_eq!(parse_dictionary(text.as_bytes(), &ParseOptions::default()).unwrap(), dict);
        assert_eq!(decode_snapshot(&encode_snapshot(&dict)).unwrap(), dict);
    }
}
