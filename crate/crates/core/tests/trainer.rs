use qgs_core::datagen::generate_dataset;
use qgs_core::trainer::{auc, gauc, split_dataset, Adagrad, Trainer, METRICS_HEADER};
use qgs_core::{Error, Gradients, ParamStore, RunConfig, Tape, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradients of `sum(c * p)` with respect to `p`, i.e. exactly `c`.
fn grads_of(store: &ParamStore<f32>, c: &[f32]) -> Gradients<f32> {
    let id = store.id("p").unwrap();
    let mut t = Tape::new(store);
    let p = t.param(id);
    let cv = t.input(Tensor::vector(c.to_vec())).unwrap();
    let prod = t.mul(p, cv).unwrap();
    let loss = t.sum(prod).unwrap();
    t.backward(loss).unwrap()
}

fn one_param(values: &[f32]) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.add("p", Tensor::vector(values.to_vec())).unwrap();
    s
}

#[test]
fn adagrad_zero_gradient_keeps_params() {
    let mut store = one_param(&[0.3, -1.2]);
    let before = store.clone();
    let mut opt = Adagrad::new(&store, 0.01, 1e-10);
    opt.step(&mut store, &grads_of(&before, &[0.0, 0.0])).unwrap();
    assert_eq!(store.by_name("p"), before.by_name("p"));
}

#[test]
fn adagrad_steps_shrink() {
    let mut store = one_param(&[0.5]);
    let mut opt = Adagrad::new(&store, 0.01, 1e-10);
    let g = grads_of(&store, &[1.0]);
    opt.step(&mut store, &g).unwrap();
    let p1 = store.by_name("p").unwrap().data()[0];
    assert!((p1 - (0.5 - 0.01)).abs() < 1e-7, "{p1}");
    opt.step(&mut store, &g).unwrap();
    let p2 = store.by_name("p").unwrap().data()[0];
    let (d1, d2) = (0.5 - p1, p1 - p2);
    assert!(d2 > 0.0 && d2 < d1);
    assert!((d2 - 0.01 / 2f32.sqrt()).abs() < 1e-7);
}

#[test]
fn adagrad_zero_lr_and_frozen_params() {
    let mut store = one_param(&[0.25, 4.0]);
    let before = store.clone();
    let mut opt = Adagrad::new(&store, 0.0, 1e-10);
    opt.step(&mut store, &grads_of(&before, &[3.0, -2.0])).unwrap();
    assert_eq!(store.by_name("p"), before.by_name("p"));

    let id = store.id("p").unwrap();
    store.set_frozen(id, true);
    let mut opt = Adagrad::new(&store, 0.1, 1e-10);
    opt.step(&mut store, &grads_of(&before, &[3.0, -2.0])).unwrap();
    assert_eq!(store.by_name("p"), before.by_name("p"));
}

#[test]
fn adagrad_clamp() {
    let mut store = one_param(&[14.995]);
    let id = store.id("p").unwrap();
    let mut opt = Adagrad::new(&store, 0.5, 1e-10);
    opt.clamp_after_step(id, 15.0);
    let g = grads_of(&store, &[-1.0]);
    opt.step(&mut store, &g).unwrap();
    assert_eq!(store.get(id).data()[0], 15.0);
}

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_hand_case() {
    let a = auc(&[0.9, 0.8, 0.3, 0.1], &[1, 0, 1, 0]).unwrap();
    assert!((a - 0.75).abs() < 1e-12);
    assert_eq!(auc(&[0.2; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    assert_eq!(auc(&[1.0, 2.0], &[0, 1]).unwrap(), 1.0);
    assert_eq!(auc(&[1.0, 2.0], &[1, 0]).unwrap(), 0.0);
}

#[test]
fn auc_matches_pair_counting_on_every_label_pattern() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for n in 2..=10usize {
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<u8> = (0..n).map(|i| (mask >> i & 1) as u8).collect();
            let got = auc(&scores, &labels).unwrap();
            assert!((got - brute_auc(&scores, &labels)).abs() < 1e-12);
        }
    }
}

#[test]
fn auc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut checked = 0;
    while checked < 500 {
        let n = rng.random_range(2..=12);
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 * 0.25).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            assert!(auc(&scores, &labels).is_err());
            continue;
        }
        let got = auc(&scores, &labels).unwrap();
        assert!((got - brute_auc(&scores, &labels)).abs() < 1e-12);
        checked += 1;
    }
}

#[test]
fn auc_rejects_bad_input() {
    assert!(matches!(auc(&[f64::NAN, 1.0], &[0, 1]), Err(Error::NonFinite { .. })));
    assert!(auc(&[1.0], &[0, 1]).is_err());
}

#[test]
fn gauc_weights_and_skips() {
    // Request 1: auc 1 over 3 impressions; request 2: auc 0 over 2;
    // request 3: only positives, skipped.
    let scores = [0.9, 0.1, 0.2, 0.8, 0.3, 0.5];
    let labels = [1, 0, 0, 0, 1, 1];
    let ids = [1, 1, 1, 2, 2, 3];
    let r = gauc(&scores, &labels, &ids).unwrap();
    assert!((r.gauc - 3.0 / 5.0).abs() < 1e-12);
    assert_eq!((r.scored, r.skipped), (2, 1));
    assert!(gauc(&[0.5], &[1], &[0]).is_err());
}

fn small_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.data.num_sessions = 48;
    run.data.session_len = 16;
    run.data.min_valid_len = 12;
    run.model.max_len = 16;
    run.model.hidden_dim = 16;
    run.model.pred_dim = 16;
    run.train.epochs = 2;
    run.train.batch_size = 8;
    run.train.eval_requests_per_session = 4;
    run
}

#[test]
fn training_is_deterministic() {
    let run = small_run();
    let data = generate_dataset(&run.data).unwrap();
    let (train, eval) = split_dataset(&data, run.train.eval_fraction);
    assert_eq!(eval.len(), 10);
    let fit = || {
        let mut t = Trainer::new(&run, Variant::Full, 5).unwrap();
        let rows: Vec<String> = t.fit(train, eval, |_| {}).unwrap().iter().map(|m| m.csv_row(false)).collect();
        (rows, t.store)
    };
    let (a, sa) = fit();
    let (b, sb) = fit();
    assert_eq!(a, b);
    for ((_, _, x), (_, _, y)) in sa.iter().zip(sb.iter()) {
        assert_eq!(x, y);
    }
    assert_eq!(METRICS_HEADER.split(',').count(), a[0].split(',').count());
    assert!(a[0].ends_with(",0.0"));
}

#[test]
fn threaded_eval_matches_serial() {
    let run = small_run();
    let data = generate_dataset(&run.data).unwrap();
    let t = Trainer::new(&run, Variant::Full, 1).unwrap();
    let serial = t.evaluate(&data).unwrap();
    let mut cfg = t.cfg.clone();
    cfg.threads = 3;
    let par = qgs_core::trainer::evaluate(&t.model, &t.store, &t.gen, &cfg, &data).unwrap();
    assert_eq!(serial, par);
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(matches!(RunConfig::from_toml("[train]\nepoch = 3\n"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("[trian]\n"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("[train]\nlr = -1.0\n"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("[bench]\nmeasured_iters = 5\n"), Err(Error::Config(_))));
    let run = RunConfig::from_toml("[train]\nepochs = 3\nvariant = \"no_hfg\"\n").unwrap();
    assert_eq!(run.train.epochs, 3);
    assert_eq!(run.train.variant, Variant::NoHfg);
    assert_eq!(RunConfig::from_toml(&run.to_toml()).unwrap(), run);
}
