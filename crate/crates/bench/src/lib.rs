//! Latency harness for the encoder variants: batch forward scaling in the
//! sequence length and per-step cost of streaming inference.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use qgs_core::encoder::{Encoder, EncoderKind, EncoderSpec, StreamState};
use qgs_core::numerics::{SeqLayout, Tape};
use qgs_core::{BenchConfig, Error, ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Timing summary of one (variant, length) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: EncoderKind,
    pub len: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of ln(median) on ln(L), per variant.
    pub slopes: Vec<(EncoderKind, f64)>,
}

impl BenchResult {
    pub fn slope(&self, kind: EncoderKind) -> Option<f64> {
        self.slopes.iter().find(|(k, _)| *k == kind).map(|(_, s)| *s)
    }

    pub fn median(&self, kind: EncoderKind, len: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == kind && r.len == len)
            .map(|r| r.median_ms)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamRow {
    pub position: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamResult {
    pub rows: Vec<StreamRow>,
    /// Regression slope of the median step time on position, ms per step.
    pub slope_ms: f64,
    pub mean_step_ms: f64,
    pub state_bytes: Vec<usize>,
}

impl StreamResult {
    /// Predicted change in step time across the sampled position range,
    /// relative to the mean step time.
    pub fn relative_drift(&self) -> f64 {
        let lo = self.rows.iter().map(|r| r.position).min().unwrap_or(0);
        let hi = self.rows.iter().map(|r| r.position).max().unwrap_or(0);
        (self.slope_ms * (hi - lo) as f64).abs() / self.mean_step_ms
    }
}

/// Nearest-rank quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Median of an ascending slice; mean of the middle pair for even length.
pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn loglog_slope(lens: &[usize], medians: &[f64]) -> f64 {
    let x: Vec<f64> = lens.iter().map(|&l| (l as f64).ln()).collect();
    let y: Vec<f64> = medians.iter().map(|m| m.ln()).collect();
    ols_slope(&x, &y)
}

/// An encoder with freshly initialized parameters.
pub fn build_encoder(kind: EncoderKind, hidden: usize, layers: usize, max_len: usize, seed: u64) -> Result<(Encoder, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoder::new(
        &mut store,
        EncoderSpec {
            num_layers: layers,
            hidden,
            dropout: 0.0,
            kind,
            max_len,
            per_channel_decay: false,
            decay_init: 0.95,
        },
        &mut rng,
    )?;
    Ok((enc, store))
}

fn random_input(len: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..len * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::matrix(len, d, data).expect("shape matches data")
}

/// One eval-mode forward pass; returns elapsed milliseconds.
pub fn time_forward(enc: &Encoder, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<f64> {
    let start = Instant::now();
    let mut tape = Tape::new(store);
    let h = tape.input(x.clone())?;
    let out = enc.forward(&mut tape, h, SeqLayout { seqs: 1, len: x.rows() }, None)?;
    black_box(tape.value(out));
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

fn summarize(mut samples: Vec<f64>) -> (f64, f64, f64) {
    samples.sort_by(f64::total_cmp);
    (median(&samples), quantile(&samples, 0.1), quantile(&samples, 0.9))
}

fn check(cfg: &BenchConfig) -> Result<()> {
    if cfg.measured_iters < 20 {
        return Err(Error::Config(format!("bench.measured_iters {} must be >= 20", cfg.measured_iters)));
    }
    if cfg.lengths.is_empty() || cfg.variants.is_empty() {
        return Err(Error::Config("bench needs at least one length and one variant".into()));
    }
    Ok(())
}

/// Times the encoder forward pass for every (variant, length). Each
/// iteration visits every cell once, so slow drift in machine speed affects
/// all cells alike.
pub fn bench_encoder(cfg: &BenchConfig) -> Result<BenchResult> {
    check(cfg)?;
    let max_len = cfg.lengths.iter().copied().max().unwrap_or(1);
    let encoders = cfg
        .variants
        .iter()
        .map(|&k| build_encoder(k, cfg.hidden_dim, cfg.num_layers, max_len, 1))
        .collect::<Result<Vec<_>>>()?;
    // Brings clocks and allocator pools to steady state before any sample.
    let x = random_input(max_len, cfg.hidden_dim, 0);
    for (enc, store) in &encoders {
        time_forward(enc, store, &x)?;
    }
    let inputs: Vec<Tensor<f32>> = cfg
        .lengths
        .iter()
        .map(|&len| random_input(len, cfg.hidden_dim, len as u64))
        .collect();
    // samples[length][variant]
    let mut samples = vec![vec![Vec::with_capacity(cfg.measured_iters); encoders.len()]; inputs.len()];
    for it in 0..cfg.warmup_iters + cfg.measured_iters {
        for (per_len, x) in samples.iter_mut().zip(&inputs) {
            for (s, (enc, store)) in per_len.iter_mut().zip(&encoders) {
                let ms = time_forward(enc, store, x)?;
                if it >= cfg.warmup_iters {
                    s.push(ms);
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (&len, per_len) in cfg.lengths.iter().zip(samples) {
        for (&variant, s) in cfg.variants.iter().zip(per_len) {
            let (median_ms, p10_ms, p90_ms) = summarize(s);
            if !(median_ms > 0.0) {
                return Err(Error::InvalidArgument(format!("timer resolution too coarse at L={len}")));
            }
            rows.push(BenchRow {
                variant,
                len,
                median_ms,
                p10_ms,
                p90_ms,
            });
        }
    }
    let slopes = cfg
        .variants
        .iter()
        .map(|&k| {
            let (lens, meds): (Vec<usize>, Vec<f64>) =
                rows.iter().filter(|r| r.variant == k).map(|r| (r.len, r.median_ms)).unzip();
            (k, if lens.len() > 1 { loglog_slope(&lens, &meds) } else { f64::NAN })
        })
        .collect();
    Ok(BenchResult { rows, slopes })
}

/// Steps averaged per timing sample; keeps samples well above timer
/// resolution.
pub const STREAM_BLOCK: usize = 32;

/// Per-step latency of the linear encoder's streaming path at each
/// configured position. The state is advanced to the position once, then
/// every sample times [`STREAM_BLOCK`] steps from a copy of it.
pub fn bench_stream(cfg: &BenchConfig) -> Result<StreamResult> {
    check(cfg)?;
    let max_pos = cfg.stream_positions.iter().copied().max().unwrap_or(0);
    let max_len = max_pos + STREAM_BLOCK + 1;
    let (enc, store) = build_encoder(EncoderKind::Linear, cfg.hidden_dim, cfg.num_layers, max_len, 2)?;
    let d = cfg.hidden_dim;
    let xs = random_input(max_len, d, 3);
    let mut positions = cfg.stream_positions.clone();
    positions.sort_unstable();
    positions.dedup();

    let mut base: StreamState<f32> = enc.stream_state();
    let mut states = Vec::with_capacity(positions.len());
    for &p in &positions {
        while base.position < p {
            let i = base.position;
            enc.stream_step(&store, &mut base, xs.row(i))?;
        }
        states.push(base.clone());
    }
    let mut samples = vec![Vec::with_capacity(cfg.measured_iters); positions.len()];
    for it in 0..cfg.warmup_iters + cfg.measured_iters {
        for (s, state) in samples.iter_mut().zip(&states) {
            let mut st = state.clone();
            let start = Instant::now();
            for _ in 0..STREAM_BLOCK {
                let i = st.position;
                let y = enc.stream_step(&store, &mut st, xs.row(i))?;
                black_box(y);
            }
            let ms = start.elapsed().as_secs_f64() * 1e3 / STREAM_BLOCK as f64;
            if it >= cfg.warmup_iters {
                s.push(ms);
            }
        }
    }
    let rows: Vec<StreamRow> = positions
        .iter()
        .zip(samples)
        .map(|(&position, s)| {
            let (median_ms, p10_ms, p90_ms) = summarize(s);
            StreamRow {
                position,
                median_ms,
                p10_ms,
                p90_ms,
            }
        })
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| r.position as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.median_ms).collect();
    let mean_step_ms = y.iter().sum::<f64>() / y.len() as f64;
    let slope_ms = if rows.len() > 1 { ols_slope(&x, &y) } else { 0.0 };
    Ok(StreamResult {
        rows,
        slope_ms,
        mean_step_ms,
        state_bytes: states.iter().map(|s| s.state_bytes()).collect(),
    })
}

fn env_comment(cfg: &BenchConfig) -> String {
    format!(
        "# qgs-bench os={} arch={} cpus={} threads=1 d_h={} layers={} warmup={} iters={}\n",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map_or(1, |n| n.get()),
        cfg.hidden_dim,
        cfg.num_layers,
        cfg.warmup_iters,
        cfg.measured_iters
    )
}

pub const BENCH_HEADER: &str = "variant,L,median_ms,p10_ms,p90_ms";
pub const STREAM_HEADER: &str = "position,median_ms,p10_ms,p90_ms";

fn kind_name(k: EncoderKind) -> &'static str {
    match k {
        EncoderKind::Linear => "linear",
        EncoderKind::QuadraticReference => "quadratic_reference",
    }
}

fn parse_kind(s: &str) -> Option<EncoderKind> {
    match s {
        "linear" => Some(EncoderKind::Linear),
        "quadratic_reference" => Some(EncoderKind::QuadraticReference),
        _ => None,
    }
}

/// Bench CSV: an environment comment line, the header, then one row per
/// (variant, L) in run order.
pub fn bench_csv(result: &BenchResult, cfg: &BenchConfig) -> String {
    let mut out = env_comment(cfg);
    out.push_str(BENCH_HEADER);
    out.push('\n');
    for r in &result.rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6}",
            kind_name(r.variant),
            r.len,
            r.median_ms,
            r.p10_ms,
            r.p90_ms
        );
    }
    out
}

pub fn stream_csv(result: &StreamResult, cfg: &BenchConfig) -> String {
    let mut out = env_comment(cfg);
    out.push_str(STREAM_HEADER);
    out.push('\n');
    for r in &result.rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.position, r.median_ms, r.p10_ms, r.p90_ms);
    }
    out
}

/// Parses [`bench_csv`] output; comment lines are skipped.
pub fn parse_bench_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let mut offset = 0;
    let mut seen_header = false;
    for line in text.lines() {
        let here = offset;
        offset += line.len() + 1;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !seen_header {
            if line != BENCH_HEADER {
                return Err(Error::Parse {
                    offset: here,
                    msg: format!("expected header {BENCH_HEADER:?}"),
                });
            }
            seen_header = true;
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            offset: here,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        rows.push(BenchRow {
            variant: parse_kind(f[0]).ok_or_else(|| bad("unknown variant"))?,
            len: f[1].parse().map_err(|_| bad("bad length"))?,
            median_ms: num(f[2])?,
            p10_ms: num(f[3])?,
            p90_ms: num(f[4])?,
        });
    }
    Ok(rows)
}
