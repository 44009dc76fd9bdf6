use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qgs_core::RunConfig;

const TINY: &str = r#"
[data]
num_sessions = 40
session_len = 12
min_valid_len = 10

[model]
embed_dim = 8
hidden_dim = 16
pred_dim = 16
max_len = 16
hfg_out_dim = 16
dnn_hidden = 16
tower_hidden = 16

[train]
epochs = 2
batch_size = 8
eval_requests_per_session = 4

[ablate]
variants = ["full", "item_only"]

[scale]
num_layers = [1]
hidden_dims = []
history_lens = [8, 12]

[bench]
lengths = [16, 32]
hidden_dim = 8
num_layers = 1
warmup_iters = 1
measured_iters = 20
stream_positions = [1, 5, 20]
"#;

fn qgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qgs"))
        .args(args)
        .env("QGS_LOG", "error")
        .output()
        .expect("binary runs")
}

fn with_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn run_in(dir: &Path, cfg: &str, args: &[&str]) -> Output {
    let out = dir.join("out");
    let mut all = vec!["--config", cfg, "--out", out.to_str().unwrap()];
    all.extend_from_slice(args);
    qgs(&all)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_error(o: &Output, code: i32, kind: &str) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let line = stderr(o);
    let line = line.trim_end();
    assert!(!line.contains('\n'), "{line}");
    assert!(line.starts_with(&format!("error kind={kind} code={code} msg=\"")), "{line}");
    assert!(line.ends_with('"'));
}

#[test]
fn help_lists_every_config_key_and_exit_code() {
    let o = qgs(&["--help"]);
    assert!(o.status.success());
    let help = String::from_utf8(o.stdout).unwrap();
    let defaults = RunConfig::default().to_toml();
    for line in defaults.lines().filter(|l| !l.trim().is_empty()) {
        assert!(help.contains(line), "help is missing {line:?}");
    }
    for code in 3..=7 {
        assert!(help.contains(&format!("  {code}  ")));
    }
}

#[test]
fn generate_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), TINY);
    let out = dir.path().join("out");
    for cmd in ["generate", "train", "eval"] {
        let o = run_in(dir.path(), &cfg, &[cmd]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let resolved = fs::read_to_string(out.join("resolved_config")).unwrap();
    let back = RunConfig::from_toml(&resolved).unwrap();
    assert_eq!(back.data.num_sessions, 40);
    assert_eq!(back.output.dir, out.to_string_lossy());

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "variant,seed,epoch,loss_infonce,loss_ctr,auc,gauc,wall_ms");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("full,42,0,"));

    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["variant"], "full");
    let gauc = eval["gauc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&gauc));
    // Same numbers as the final training epoch.
    let last: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(format!("{gauc:.6}"), last[6]);
}

#[test]
fn seed_and_threads_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), TINY);
    let o = run_in(dir.path(), &cfg, &["--seed", "9", "--threads", "2", "generate"]);
    assert!(o.status.success());
    let resolved = RunConfig::from_toml(&fs::read_to_string(dir.path().join("out/resolved_config")).unwrap()).unwrap();
    assert_eq!((resolved.train.seed, resolved.train.threads), (9, 2));
}

#[test]
fn metrics_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), TINY);
    assert!(run_in(dir.path(), &cfg, &["generate"]).status.success());
    let mut runs = Vec::new();
    for _ in 0..2 {
        let o = run_in(dir.path(), &cfg, &["--threads", "1", "train"]);
        assert!(o.status.success());
        runs.push((
            fs::read(dir.path().join("out/metrics.csv")).unwrap(),
            fs::read(dir.path().join("out/checkpoint.qgsc")).unwrap(),
        ));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn unknown_config_key_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), "[train]\nepochz = 3\n");
    assert_error(&run_in(dir.path(), &cfg, &["generate"]), 3, "config");
    let cfg = with_config(dir.path(), "[model]\nhidden_dim = 0\n");
    assert_error(&run_in(dir.path(), &cfg, &["generate"]), 3, "config");
}

#[test]
fn missing_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), TINY);
    assert_error(&run_in(dir.path(), &cfg, &["train"]), 4, "missing_file");
    assert!(run_in(dir.path(), &cfg, &["generate"]).status.success());
    assert_error(&run_in(dir.path(), &cfg, &["eval"]), 4, "missing_file");
    let o = qgs(&["--config", dir.path().join("nope.toml").to_str().unwrap(), "generate"]);
    assert_error(&o, 4, "missing_file");
}

#[test]
fn malformed_dataset_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), TINY);
    let bad = dir.path().join("bad.qgsd");
    fs::write(&bad, b"definitely not a dataset").unwrap();
    assert_error(&run_in(dir.path(), &cfg, &["train", "--data", bad.to_str().unwrap()]), 5, "dataset");
}

#[test]
fn malformed_checkpoint_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), TINY);
    assert!(run_in(dir.path(), &cfg, &["generate"]).status.success());
    let ck = dir.path().join("bad.qgsc");
    fs::write(&ck, b"QGSC\x07").unwrap();
    assert_error(&run_in(dir.path(), &cfg, &["eval", "--checkpoint", ck.to_str().unwrap()]), 6, "checkpoint");

    // A valid file for a different model shape is rejected too.
    assert!(run_in(dir.path(), &cfg, &["train"]).status.success());
    let wider = TINY.replace("hidden_dim = 16", "hidden_dim = 24");
    let cfg = with_config(dir.path(), &wider);
    assert_error(&run_in(dir.path(), &cfg, &["eval"]), 6, "checkpoint");
}

#[test]
fn divergence_exits_7_and_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), &TINY.replace("[train]\n", "[train]\nlr = 1e30\n"));
    assert!(run_in(dir.path(), &cfg, &["generate"]).status.success());
    let o = run_in(dir.path(), &cfg, &["train"]);
    assert_error(&o, 7, "diverged");
    let bytes = fs::read(dir.path().join("out/checkpoint.qgsc")).unwrap();
    let tensors = qgs_core::checkpoint::decode_tensors(&bytes).unwrap();
    assert!(tensors.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
}

#[test]
fn ablate_emits_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), TINY);
    let o = run_in(dir.path(), &cfg, &["ablate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,auc,gauc,eval_infonce,mean_epoch_ms");
    assert_eq!(lines.len(), 3);
    for (line, name) in lines[1..].iter().zip(["full", "item_only"]) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], name);
        assert!(f.iter().all(|v| !v.is_empty()));
        assert!(f[4].parse::<f64>().unwrap() > 0.0);
    }
    let per_epoch = fs::read_to_string(dir.path().join("out/ablation_metrics.csv")).unwrap();
    assert_eq!(per_epoch.lines().count(), 1 + 2 * 2);
}

#[test]
fn scale_emits_history_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), TINY);
    let o = run_in(dir.path(), &cfg, &["scale"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/scaling.csv")).unwrap();
    let axes: Vec<(String, String)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    let want = [("layers", "1"), ("history", "8"), ("history", "12")];
    assert_eq!(axes, want.map(|(a, v)| (a.to_string(), v.to_string())));
}

#[test]
fn bench_writes_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), TINY);
    let o = run_in(dir.path(), &cfg, &["bench"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/bench.csv")).unwrap();
    assert!(text.starts_with("# qgs-bench "));
    assert!(text.ends_with('\n'));
    let rows = qgs_bench::parse_bench_csv(&text).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.median_ms > 0.0 && r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms));
    let stream = fs::read_to_string(dir.path().join("out/stream.csv")).unwrap();
    assert_eq!(stream.lines().filter(|l| !l.starts_with('#')).count(), 4);
}
