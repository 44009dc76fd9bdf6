//! Deterministic training, evaluation, the ablation matrix and the scaling
//! sweep.

mod metrics;
mod optim;

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use metrics::{auc, gauc, GaucReport};
pub use optim::Adagrad;

use crate::config::{RunConfig, TrainConfig};
use crate::datagen::{generate_dataset, make_request, request_positions, topic_signatures, CtrRequest, GeneratorConfig, Session};
use crate::error::{Error, Result};
use crate::model::{BoundRequest, Dims, QgsModel, Variant};
use crate::nn::normal;
use crate::numerics::{ParamStore, Tape};

/// Decay logits are kept within `[-DECAY_LOGIT_BOUND, DECAY_LOGIT_BOUND]`.
pub const DECAY_LOGIT_BOUND: f32 = 15.0;

/// Header of the per-epoch metrics CSV.
pub const METRICS_HEADER: &str = "variant,seed,epoch,loss_infonce,loss_ctr,auc,gauc,wall_ms";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    /// Mean held-out InfoNCE; `None` when no batch had a target.
    pub infonce: Option<f64>,
    pub ctr: f64,
    pub auc: f64,
    pub gauc: f64,
    pub requests: usize,
    pub skipped_requests: usize,
    pub impressions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub variant: Variant,
    pub seed: u64,
    pub epoch: usize,
    /// Mean training InfoNCE over the epoch's batches.
    pub loss_infonce: f64,
    /// Mean training BCE over the epoch's batches.
    pub loss_ctr: f64,
    pub eval: EvalMetrics,
    pub wall_ms: f64,
}

impl EpochMetrics {
    /// One CSV row; `wall_ms` is written as 0 unless `timing`.
    pub fn csv_row(&self, timing: bool) -> String {
        let wall = if timing { self.wall_ms } else { 0.0 };
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.1}",
            self.variant.name(),
            self.seed,
            self.epoch,
            self.loss_infonce,
            self.loss_ctr,
            self.eval.auc,
            self.eval.gauc,
            wall
        )
    }
}

pub fn dims_for(gen: &GeneratorConfig) -> Dims {
    Dims {
        vocab: gen.vocab_size(),
        query_vocab: gen.query_vocab_size(),
        feature_dim: gen.feature_dim,
    }
}

/// Last `ceil(n * eval_fraction)` sessions are held out.
pub fn split_dataset(sessions: &[Session], eval_fraction: f64) -> (&[Session], &[Session]) {
    let n_eval = (sessions.len() as f64 * eval_fraction).ceil() as usize;
    sessions.split_at(sessions.len() - n_eval.min(sessions.len()))
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 31)
}

/// Builds the model for `variant`. The external embedder reads
/// `model.external_embeddings` when set and otherwise uses a seeded random
/// table; either way the tables are frozen.
pub fn build_model(run: &RunConfig, variant: Variant, seed: u64) -> Result<(QgsModel, ParamStore<f32>)> {
    let (model, mut store) = QgsModel::new(&run.model, variant, dims_for(&run.data), seed)?;
    if variant == Variant::ExternalEmbedder {
        match &run.model.external_embeddings {
            Some(path) => model.load_external_embeddings(path, &mut store)?,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xe7));
                let std = 1.0 / (run.model.embed_dim as f64).sqrt();
                let cls = normal(&mut rng, store.get(model.embed.item_table).shape(), std);
                let sep = normal(&mut rng, store.get(model.embed.query_table).shape(), std);
                model.set_external_embeddings(vec![("ext_cls".into(), cls), ("ext_sep".into(), sep)], &mut store)?;
            }
        }
    }
    Ok((model, store))
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// Model, parameters and optimizer state for one training run.
pub struct Trainer {
    pub model: QgsModel,
    pub store: ParamStore<f32>,
    pub opt: Adagrad,
    pub gen: GeneratorConfig,
    pub cfg: TrainConfig,
    pub seed: u64,
    signatures: Vec<f32>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(run: &RunConfig, variant: Variant, seed: u64) -> Result<Self> {
        run.train.validate()?;
        let (model, store) = build_model(run, variant, seed)?;
        let mut opt = Adagrad::new(&store, run.train.lr, run.train.adagrad_eps);
        for layer in &model.encoder.layers {
            opt.clamp_after_step(layer.decay, DECAY_LOGIT_BOUND);
        }
        Ok(Trainer {
            model,
            store,
            opt,
            gen: run.data.clone(),
            cfg: run.train.clone(),
            seed,
            signatures: topic_signatures(&run.data),
            rng: ChaCha8Rng::seed_from_u64(mix(seed, 0x7a)),
        })
    }

    pub fn variant(&self) -> Variant {
        self.model.variant
    }

    /// One pass over `sessions` in a seeded shuffled order. Returns the mean
    /// batch InfoNCE and BCE. On divergence the parameters are left at their
    /// last finite values.
    pub fn train_epoch(&mut self, sessions: &[Session], epoch: usize) -> Result<(f64, f64)> {
        if sessions.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let mut order: Vec<usize> = (0..sessions.len()).collect();
        order.shuffle(&mut self.rng);
        let req_seed = mix(self.seed, epoch as u64 + 1);
        let (mut sum_nce, mut n_nce, mut sum_ctr, mut n_ctr) = (0.0, 0usize, 0.0, 0usize);
        for (step, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&Session> = chunk.iter().map(|&i| &sessions[i]).collect();
            let mut requests: Vec<(usize, CtrRequest)> = Vec::new();
            for (b, s) in batch.iter().enumerate() {
                for t in request_positions(s, 0, self.cfg.train_requests_per_session, req_seed) {
                    requests.push((b, make_request(&self.gen, &self.signatures, s, t)?));
                }
            }
            let bound: Vec<BoundRequest<'_>> = requests
                .iter()
                .map(|(b, r)| BoundRequest { seq: *b, request: r })
                .collect();
            let diverged = |e: Error| {
                if is_divergence(&e) {
                    Error::Diverged {
                        epoch,
                        step,
                        msg: e.to_string(),
                    }
                } else {
                    e
                }
            };
            let mut grads = {
                let mut tape = Tape::new(&self.store);
                let fwd = self
                    .model
                    .forward(&mut tape, &batch, &bound, self.cfg.lambda, Some(&mut self.rng))
                    .map_err(diverged)?;
                if let Some(v) = fwd.infonce {
                    sum_nce += tape.value(v).data()[0] as f64;
                    n_nce += 1;
                }
                if let Some(v) = fwd.ctr {
                    sum_ctr += tape.value(v).data()[0] as f64;
                    n_ctr += 1;
                }
                tape.backward(fwd.loss).map_err(diverged)?
            };
            if self.cfg.grad_clip > 0.0 {
                let norm = grads.global_norm() as f64;
                if norm > self.cfg.grad_clip {
                    grads.scale((self.cfg.grad_clip / norm) as f32);
                }
            }
            let backup = self.store.clone();
            self.opt.step(&mut self.store, &grads)?;
            let bad = self
                .store
                .iter()
                .find(|(_, _, t)| t.data().iter().any(|v| !v.is_finite()))
                .map(|(_, name, _)| name.to_string());
            if let Some(name) = bad {
                let msg = format!("parameter {name} became non-finite");
                self.store = backup;
                return Err(Error::Diverged { epoch, step, msg });
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        Ok((mean(sum_nce, n_nce), mean(sum_ctr, n_ctr)))
    }

    pub fn evaluate(&self, sessions: &[Session]) -> Result<EvalMetrics> {
        evaluate(&self.model, &self.store, &self.gen, &self.cfg, sessions)
    }

    /// Trains for `cfg.epochs` epochs, evaluating after each and reporting
    /// through `on_epoch`.
    pub fn fit(
        &mut self,
        train: &[Session],
        eval: &[Session],
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let start = Instant::now();
            let (loss_infonce, loss_ctr) = self.train_epoch(train, epoch)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let eval = self.evaluate(eval)?;
            let m = EpochMetrics {
                variant: self.variant(),
                seed: self.seed,
                epoch,
                loss_infonce,
                loss_ctr,
                eval,
                wall_ms,
            };
            info!(
                "{} epoch {epoch}: infonce {loss_infonce:.4} ctr {loss_ctr:.4} eval auc {:.4} gauc {:.4}",
                self.variant().name(),
                eval.auc,
                eval.gauc
            );
            on_epoch(&m);
            history.push(m);
        }
        Ok(history)
    }
}

struct BatchEval {
    infonce: Option<f64>,
    ctr: f64,
    scores: Vec<f64>,
    labels: Vec<u8>,
    request_ids: Vec<u64>,
}

fn eval_batch(
    model: &QgsModel,
    store: &ParamStore<f32>,
    gen: &GeneratorConfig,
    cfg: &TrainConfig,
    signatures: &[f32],
    first: usize,
    batch: &[Session],
) -> Result<BatchEval> {
    let refs: Vec<&Session> = batch.iter().collect();
    let mut requests = Vec::new();
    for (b, s) in batch.iter().enumerate() {
        for t in request_positions(s, cfg.eval_tail, cfg.eval_requests_per_session, gen.rng_seed) {
            requests.push((b, t, make_request(gen, signatures, s, t)?));
        }
    }
    let bound: Vec<BoundRequest<'_>> = requests
        .iter()
        .map(|(b, _, r)| BoundRequest { seq: *b, request: r })
        .collect();
    let mut tape = Tape::new(store);
    let fwd = model.forward(&mut tape, &refs, &bound, cfg.lambda, None)?;
    let mut out = BatchEval {
        infonce: fwd.infonce.map(|v| tape.value(v).data()[0] as f64),
        ctr: fwd.ctr.map_or(0.0, |v| tape.value(v).data()[0] as f64),
        scores: Vec::new(),
        labels: Vec::new(),
        request_ids: Vec::new(),
    };
    if let Some(s) = fwd.scores {
        out.scores = tape.value(s).data().iter().map(|&v| v as f64).collect();
        for (b, t, r) in &requests {
            let id = (((first + b) as u64) << 32) | *t as u64;
            for c in &r.candidates {
                out.labels.push(c.label);
                out.request_ids.push(id);
            }
        }
    }
    Ok(out)
}

/// Held-out InfoNCE, BCE, AUC and GAUC in eval mode. Requests are the
/// deterministic positions chosen by [`request_positions`] with the data
/// seed, so every model sees the same impressions.
pub fn evaluate(
    model: &QgsModel,
    store: &ParamStore<f32>,
    gen: &GeneratorConfig,
    cfg: &TrainConfig,
    sessions: &[Session],
) -> Result<EvalMetrics> {
    if sessions.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let signatures = topic_signatures(gen);
    let bs = cfg.batch_size;
    let run = |(i, batch): (usize, &[Session])| eval_batch(model, store, gen, cfg, &signatures, i * bs, batch);
    let batches: Vec<BatchEval> = if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| sessions.par_chunks(bs).enumerate().map(run).collect::<Result<_>>())?
    } else {
        sessions.chunks(bs).enumerate().map(run).collect::<Result<_>>()?
    };
    let nce: Vec<f64> = batches.iter().filter_map(|b| b.infonce).collect();
    let infonce = (!nce.is_empty()).then(|| nce.iter().sum::<f64>() / nce.len() as f64);
    let ctr = batches.iter().map(|b| b.ctr).sum::<f64>() / batches.len() as f64;
    let scores: Vec<f64> = batches.iter().flat_map(|b| b.scores.iter().copied()).collect();
    let labels: Vec<u8> = batches.iter().flat_map(|b| b.labels.iter().copied()).collect();
    let ids: Vec<u64> = batches.iter().flat_map(|b| b.request_ids.iter().copied()).collect();
    let g = gauc(&scores, &labels, &ids)?;
    debug!("eval: {} requests scored, {} skipped", g.scored, g.skipped);
    Ok(EvalMetrics {
        infonce,
        ctr,
        auc: auc(&scores, &labels)?,
        gauc: g.gauc,
        requests: g.scored,
        skipped_requests: g.skipped,
        impressions: scores.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub auc: f64,
    pub gauc: f64,
    pub eval_infonce: Option<f64>,
    pub mean_epoch_ms: f64,
}

pub const ABLATION_HEADER: &str = "variant,auc,gauc,eval_infonce,mean_epoch_ms";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{:.1}",
            self.variant.name(),
            self.auc,
            self.gauc,
            self.eval_infonce.map_or(String::new(), |v| format!("{v:.6}")),
            self.mean_epoch_ms
        )
    }
}

fn final_row(variant: Variant, history: &[EpochMetrics]) -> AblationRow {
    let last = history.last().expect("at least one epoch");
    AblationRow {
        variant,
        auc: last.eval.auc,
        gauc: last.eval.gauc,
        eval_infonce: last.eval.infonce,
        mean_epoch_ms: history.iter().map(|m| m.wall_ms).sum::<f64>() / history.len() as f64,
    }
}

/// Trains every variant on the same split with the same seed.
pub fn run_ablation(
    run: &RunConfig,
    sessions: &[Session],
    variants: &[Variant],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<AblationRow>> {
    let (train, eval) = split_dataset(sessions, run.train.eval_fraction);
    variants
        .iter()
        .map(|&v| {
            let mut t = Trainer::new(run, v, run.train.seed)?;
            let history = t.fit(train, eval, &mut on_epoch)?;
            Ok(final_row(v, &history))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleRow {
    /// "layers", "hidden" or "history".
    pub axis: &'static str,
    pub value: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub history_len: usize,
    pub auc: f64,
    pub gauc: f64,
    pub eval_infonce: Option<f64>,
}

pub const SCALE_HEADER: &str = "axis,value,num_layers,hidden_dim,history_len,auc,gauc,eval_infonce";

impl ScaleRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{}",
            self.axis,
            self.value,
            self.num_layers,
            self.hidden_dim,
            self.history_len,
            self.auc,
            self.gauc,
            self.eval_infonce.map_or(String::new(), |v| format!("{v:.6}"))
        )
    }
}

fn scale_point(run: &RunConfig, sessions: &[Session], axis: &'static str, value: usize) -> Result<ScaleRow> {
    let mut t = Trainer::new(run, run.train.variant, run.train.seed)?;
    let (train, eval) = split_dataset(sessions, run.train.eval_fraction);
    let history = t.fit(train, eval, |_| {})?;
    let row = final_row(run.train.variant, &history);
    Ok(ScaleRow {
        axis,
        value,
        num_layers: run.model.num_layers,
        hidden_dim: run.model.hidden_dim,
        history_len: sessions[0].len(),
        auc: row.auc,
        gauc: row.gauc,
        eval_infonce: row.eval_infonce,
    })
}

/// Varies depth, width and history length one at a time. History arms are
/// cropped from sessions generated at the longest length and all evaluate
/// the same final interactions.
pub fn run_scaling(run: &RunConfig, mut on_row: impl FnMut(&ScaleRow)) -> Result<Vec<ScaleRow>> {
    let mut rows = Vec::new();
    let mut push = |r: ScaleRow, rows: &mut Vec<ScaleRow>| {
        on_row(&r);
        rows.push(r);
    };
    if !run.scale.num_layers.is_empty() || !run.scale.hidden_dims.is_empty() {
        let sessions = generate_dataset(&run.data)?;
        for &n in &run.scale.num_layers {
            let mut r = run.clone();
            r.model.num_layers = n;
            push(scale_point(&r, &sessions, "layers", n)?, &mut rows);
        }
        for &d in &run.scale.hidden_dims {
            let mut r = run.clone();
            r.model.hidden_dim = d;
            r.model.pred_dim = d;
            push(scale_point(&r, &sessions, "hidden", d)?, &mut rows);
        }
    }
    if let (Some(&lo), Some(&hi)) = (run.scale.history_lens.iter().min(), run.scale.history_lens.iter().max()) {
        let mut base = run.clone();
        base.data.session_len = hi;
        base.data.min_valid_len = hi;
        base.model.max_len = base.model.max_len.max(hi);
        base.train.eval_tail = lo.saturating_sub(1).max(1);
        let long = generate_dataset(&base.data)?;
        for &l in &run.scale.history_lens {
            let cropped: Vec<Session> = long.iter().map(|s| s.crop_last(l)).collect();
            push(scale_point(&base, &cropped, "history", l)?, &mut rows);
        }
    }
    Ok(rows)
}
