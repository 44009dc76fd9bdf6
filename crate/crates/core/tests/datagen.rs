use std::collections::HashSet;

use qgs_core::datagen::{
    decode_dataset, encode_dataset, generate_dataset, generate_session, make_request,
    oracle_entropies, read_dataset, request_positions, topic_of_item, topic_signatures,
    write_dataset, GeneratorConfig,
};
use qgs_core::Error;

fn cfg() -> GeneratorConfig {
    GeneratorConfig {
        num_sessions: 50,
        session_len: 32,
        min_valid_len: 20,
        ..Default::default()
    }
}

#[test]
fn no_switching_keeps_one_topic() {
    let c = GeneratorConfig {
        query_switch_prob: 0.0,
        ..cfg()
    };
    for seed in 0..20 {
        let s = generate_session(&c, seed);
        let first = s.query_topic_ids[0];
        assert!(s.query_topic_ids[..s.valid_len].iter().all(|&q| q == first));
    }
}

#[test]
fn single_topic_has_no_mutual_information() {
    let c = GeneratorConfig {
        num_topics: 1,
        easy_negatives: 0,
        ..cfg()
    };
    let s = generate_session(&c, 1);
    assert!(s.item_ids[..s.valid_len].iter().all(|&i| (i as usize) < c.items_per_topic));
    let o = oracle_entropies(&c);
    assert_eq!(o.h_item_given_query, o.h_item_marginal);
    assert_eq!(o.mutual_info, 0.0);
}

#[test]
fn deterministic_per_seed() {
    let c = cfg();
    assert_eq!(generate_session(&c, 11), generate_session(&c, 11));
    assert_ne!(generate_session(&c, 11), generate_session(&c, 12));
}

#[test]
fn uniform_entropy() {
    let c = GeneratorConfig {
        items_per_topic: 8,
        ..cfg()
    };
    assert!((oracle_entropies(&c).h_item_given_query - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn marginal_entropy_brute_force() {
    let c = GeneratorConfig {
        num_topics: 4,
        items_per_topic: 8,
        ..cfg()
    };
    // Stationary topic law is uniform; each of the 32 items has mass 1/32.
    let brute: f64 = (0..32).map(|_| -(1.0f64 / 32.0) * (1.0f64 / 32.0).ln()).sum();
    let o = oracle_entropies(&c);
    assert!((o.h_item_marginal - brute).abs() < 1e-12);
    assert!((o.h_item_marginal - 32f64.ln()).abs() < 1e-12);
    assert!((o.mutual_info - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn zipf_oracle_matches_direct_sum() {
    let c = GeneratorConfig {
        zipf_exponent: 1.2,
        ..cfg()
    };
    let w: Vec<f64> = (1..=c.items_per_topic).map(|i| (i as f64).powf(-1.2)).collect();
    let z: f64 = w.iter().sum();
    let h: f64 = w.iter().map(|x| -(x / z) * (x / z).ln()).sum();
    let o = oracle_entropies(&c);
    assert!((o.h_item_given_query - h).abs() < 1e-12);
    assert!(o.h_item_given_query <= o.h_item_marginal);
}

fn big_cfg(p: f64) -> GeneratorConfig {
    GeneratorConfig {
        num_topics: 5,
        items_per_topic: 10,
        query_switch_prob: p,
        session_len: 200,
        min_valid_len: 200,
        num_sessions: 600,
        ..Default::default()
    }
}

#[test]
fn switch_frequency_matches_p() {
    for p in [0.1, 0.5, 0.9] {
        let c = big_cfg(p);
        let data = generate_dataset(&c).unwrap();
        let (mut steps, mut switches) = (0usize, 0usize);
        for s in &data {
            for t in 1..s.valid_len {
                steps += 1;
                switches += (s.query_topic_ids[t] != s.query_topic_ids[t - 1]) as usize;
            }
        }
        assert!(steps >= 100_000);
        let f = switches as f64 / steps as f64;
        assert!((f - p).abs() < 0.01, "p={p}: empirical {f}");
    }
}

#[test]
fn items_stay_in_block_and_follow_w() {
    for zipf in [0.0, 1.0] {
        let c = GeneratorConfig {
            zipf_exponent: zipf,
            ..big_cfg(0.5)
        };
        let data = generate_dataset(&c).unwrap();
        let m = c.items_per_topic;
        let mut counts = vec![0usize; m];
        let mut n = 0usize;
        for s in &data {
            for t in 0..s.valid_len {
                let item = s.item_ids[t];
                assert_eq!(topic_of_item(&c, item), s.query_topic_ids[t] as usize);
                assert_eq!(s.query_text_ids[t] as usize / c.query_variants, s.query_topic_ids[t] as usize);
                counts[item as usize % m] += 1;
                n += 1;
            }
        }
        let w = c.within_topic_dist();
        let l1: f64 = counts
            .iter()
            .zip(&w)
            .map(|(&k, &p)| (k as f64 / n as f64 - p).abs())
            .sum();
        assert!(n >= 100_000);
        assert!(l1 < 0.02, "zipf {zipf}: L1 {l1}");
    }
}

#[test]
fn timestamps_ascend_and_padding_is_zero() {
    for s in generate_dataset(&cfg()).unwrap() {
        assert!(s.timestamps[..s.valid_len].windows(2).all(|w| w[0] < w[1]));
        for t in s.valid_len..s.len() {
            assert_eq!(s.item_ids[t], 0);
            assert_eq!(s.click_labels[t], 0);
            assert!(s.feature_row(t).iter().all(|&v| v == 0.0));
        }
        assert!(s.click_labels[..s.valid_len].iter().all(|&y| y == 1));
    }
}

#[test]
fn dataset_round_trip() {
    let data = generate_dataset(&cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.qgsd");
    write_dataset(&path, &data).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, data);
    assert_eq!(encode_dataset(&back), std::fs::read(&path).unwrap());
}

#[test]
fn empty_file_is_empty_dataset() {
    assert!(decode_dataset(&[]).unwrap().is_empty());
    assert!(decode_dataset(&encode_dataset(&[])).unwrap().is_empty());
}

#[test]
fn truncation_names_section() {
    let data = generate_dataset(&cfg()).unwrap();
    let bytes = encode_dataset(&data[..1]);
    let l = data[0].len();
    // Cut inside the item id array of the first record.
    let cut = 4 + 1 + 4 + 4 + 12 + 2 * 4 * l + 6;
    match decode_dataset(&bytes[..cut]) {
        Err(Error::Parse { offset, msg }) => {
            assert!(msg.contains("item_ids"), "{msg}");
            assert!(offset <= cut);
        }
        other => panic!("expected parse error, got {other:?}"),
    }
    match decode_dataset(&bytes[..3]) {
        Err(Error::Parse { msg, .. }) => assert!(msg.contains("magic")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn requests_are_well_formed() {
    let c = cfg();
    let sigs = topic_signatures(&c);
    let data = generate_dataset(&c).unwrap();
    for s in &data[..10] {
        for t in request_positions(s, 0, 0, 0) {
            let r = make_request(&c, &sigs, s, t).unwrap();
            assert_eq!(r.candidates.len(), 1 + c.hard_negatives + c.easy_negatives);
            let items: HashSet<u32> = r.candidates.iter().map(|x| x.item).collect();
            assert_eq!(items.len(), r.candidates.len());
            let pos: Vec<_> = r.candidates.iter().filter(|x| x.label == 1).collect();
            assert_eq!(pos.len(), 1);
            assert_eq!(pos[0].item, s.item_ids[t]);
            let block = topic_of_item(&c, s.item_ids[t]);
            let same = r
                .candidates
                .iter()
                .filter(|x| topic_of_item(&c, x.item) == block)
                .count();
            assert_eq!(same, 1 + c.hard_negatives);
        }
        assert!(make_request(&c, &sigs, s, 0).is_err());
    }
}

#[test]
fn requests_survive_cropping() {
    let c = GeneratorConfig {
        session_len: 40,
        min_valid_len: 40,
        ..cfg()
    };
    let sigs = topic_signatures(&c);
    let s = generate_session(&c, 5);
    let short = s.crop_last(10);
    let long_pos = request_positions(&s, 9, 0, 1);
    let short_pos = request_positions(&short, 9, 0, 1);
    assert_eq!(long_pos.len(), 9);
    assert_eq!(short_pos, (1..10).collect::<Vec<_>>());
    for (&a, &b) in long_pos.iter().zip(&short_pos) {
        let ra = make_request(&c, &sigs, &s, a).unwrap();
        let rb = make_request(&c, &sigs, &short, b).unwrap();
        let ia: Vec<_> = ra.candidates.iter().map(|x| (x.item, x.label, x.cross.clone())).collect();
        let ib: Vec<_> = rb.candidates.iter().map(|x| (x.item, x.label, x.cross.clone())).collect();
        assert_eq!(ia, ib);
    }
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        GeneratorConfig {
            num_topics: 0,
            ..cfg()
        },
        GeneratorConfig {
            query_switch_prob: 1.5,
            ..cfg()
        },
        GeneratorConfig {
            feature_dim: 3,
            ..cfg()
        },
        GeneratorConfig {
            num_topics: 1,
            ..cfg()
        },
    ];
    for c in bad {
        assert!(generate_dataset(&c).is_err(), "{c:?}");
    }
}
