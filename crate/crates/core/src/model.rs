//! Full ranking model: pair tokens, encoder, next-item head, HFG fusion and
//! the CTR tower.
//!
//! A ranking request at position `t` is scored from the history encoding
//! `h_{t-1}`, the request query and each candidate:
//! `tower(LN[h_sparse ; e_item ; h_dnn ; h_{t-1}]) + alpha * cos(z, v) / tau`,
//! where `z` is the shared next-item head output and `v` the candidate's
//! target projection.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::decode_tensors;
use crate::datagen::{CtrRequest, Session, CROSS_DIM, CROSS_GROUPS};
use crate::encoder::{Encoder, EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::hfg::{Hfg, HfgSpec};
use crate::nn::{lift, Mlp2};
use crate::numerics::ops::NORM_EPS;
use crate::numerics::{ParamId, ParamStore, Scalar, SeqLayout, Tape, Tensor, Var};
use crate::objective::{mask_bias, PredictionHead, TargetProjection};
use crate::pairtoken::{InputProjection, SemanticEmbedder};

/// Model variants: the full model and one-component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    ItemOnly,
    NoHfg,
    NoContextFeatures,
    QuadraticEncoder,
    ExternalEmbedder,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoHfg,
        Variant::ItemOnly,
        Variant::NoContextFeatures,
        Variant::QuadraticEncoder,
        Variant::ExternalEmbedder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ItemOnly => "item_only",
            Variant::NoHfg => "no_hfg",
            Variant::NoContextFeatures => "no_context_features",
            Variant::QuadraticEncoder => "quadratic_encoder",
            Variant::ExternalEmbedder => "external_embedder",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// d_b.
    pub embed_dim: usize,
    /// d_h.
    pub hidden_dim: usize,
    /// N.
    pub num_layers: usize,
    /// L_max.
    pub max_len: usize,
    pub dropout: f64,
    /// d_z.
    pub pred_dim: usize,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// One decay factor per channel instead of one per layer.
    pub per_channel_decay: bool,
    pub decay_init: f64,
    /// d_e.
    pub hfg_dim: usize,
    pub hfg_heads: usize,
    pub hfg_ffn_dim: usize,
    /// d_o.
    pub hfg_out_dim: usize,
    pub dnn_hidden: usize,
    pub tower_hidden: usize,
    /// Initial weight of the generative score in the ranking logit.
    pub gen_score_init: f64,
    /// Checkpoint-format file with "ext_cls" and "ext_sep" tables, used by
    /// the external_embedder variant.
    pub external_embeddings: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 16,
            hidden_dim: 64,
            num_layers: 2,
            max_len: 1024,
            dropout: 0.1,
            pred_dim: 64,
            temperature: 0.1,
            per_channel_decay: false,
            decay_init: 0.95,
            hfg_dim: 16,
            hfg_heads: 8,
            hfg_ffn_dim: 64,
            hfg_out_dim: 128,
            dnn_hidden: 64,
            tower_hidden: 64,
            gen_score_init: 0.5,
            external_embeddings: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("model: {m}")));
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_len", self.max_len),
            ("pred_dim", self.pred_dim),
            ("hfg_dim", self.hfg_dim),
            ("hfg_heads", self.hfg_heads),
            ("hfg_ffn_dim", self.hfg_ffn_dim),
            ("hfg_out_dim", self.hfg_out_dim),
            ("dnn_hidden", self.dnn_hidden),
            ("tower_hidden", self.tower_hidden),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.decay_init > 0.0 && self.decay_init < 1.0) {
            return fail(format!("decay_init {} not in (0, 1)", self.decay_init));
        }
        if self.hfg_dim % self.hfg_heads != 0 {
            return fail(format!(
                "hfg_dim {} not divisible by hfg_heads {}",
                self.hfg_dim, self.hfg_heads
            ));
        }
        Ok(())
    }
}

/// Data-dependent sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub vocab: usize,
    pub query_vocab: usize,
    pub feature_dim: usize,
}

/// Parameter handles of the whole model. Values live in a separate
/// [`ParamStore`], so the same model runs in either precision.
#[derive(Clone, Debug)]
pub struct QgsModel {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub dims: Dims,
    pub embed: SemanticEmbedder,
    pub input: InputProjection,
    pub encoder: Encoder,
    pub head: PredictionHead,
    pub target: TargetProjection,
    pub dnn: Mlp2,
    pub hfg: Option<Hfg>,
    pub fusion_gain: ParamId,
    pub fusion_bias: ParamId,
    pub tower: Mlp2,
    pub alpha: ParamId,
}

/// Encoder pass over a batch of equal-length sessions.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Last-layer outputs `[B*L, d_h]`.
    pub h: Var,
    /// Pair tokens `[B*L, d_f + d_b]`.
    pub x: Var,
    /// Query embeddings `[B*L, d_b]`.
    pub e_sep: Var,
    pub layout: SeqLayout,
}

/// Ranking request bound to the batch row of its session.
#[derive(Clone, Copy, Debug)]
pub struct BoundRequest<'a> {
    pub seq: usize,
    pub request: &'a CtrRequest,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub encoded: Encoded,
    pub infonce: Option<Var>,
    pub ctr: Option<Var>,
    /// Candidate logits `[n, 1]` in request order.
    pub scores: Option<Var>,
    pub loss: Var,
}

impl QgsModel {
    pub fn new(cfg: &ModelConfig, variant: Variant, dims: Dims, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d_b = cfg.embed_dim;
        let d_h = cfg.hidden_dim;
        let embed = SemanticEmbedder::new(&mut store, dims.vocab, dims.query_vocab, d_b, &mut rng)?;
        let input = InputProjection::new(&mut store, dims.feature_dim, d_b, d_h, cfg.max_len, &mut rng)?;
        let kind = if variant == Variant::QuadraticEncoder {
            EncoderKind::QuadraticReference
        } else {
            EncoderKind::Linear
        };
        let encoder = Encoder::new(
            &mut store,
            EncoderSpec {
                num_layers: cfg.num_layers,
                hidden: d_h,
                dropout: cfg.dropout,
                kind,
                max_len: cfg.max_len,
                per_channel_decay: cfg.per_channel_decay,
                decay_init: cfg.decay_init,
            },
            &mut rng,
        )?;
        let head = PredictionHead::new(&mut store, d_h, d_b, cfg.pred_dim, variant != Variant::ItemOnly, &mut rng)?;
        let target = TargetProjection::new(&mut store, dims.feature_dim + d_b, cfg.pred_dim, &mut rng)?;
        let dnn = Mlp2::new(&mut store, "dnn", [dims.feature_dim, cfg.dnn_hidden, cfg.dnn_hidden], &mut rng)?;
        let hfg = if variant == Variant::NoHfg {
            None
        } else {
            Some(Hfg::new(
                &mut store,
                HfgSpec {
                    groups: CROSS_GROUPS.to_vec(),
                    token_dim: cfg.hfg_dim,
                    heads: cfg.hfg_heads,
                    ffn_dim: cfg.hfg_ffn_dim,
                    out_dim: cfg.hfg_out_dim,
                    context_dim: cfg.dnn_hidden,
                },
                &mut rng,
            )?)
        };
        let fused = hfg.as_ref().map_or(0, |_| cfg.hfg_out_dim) + d_b + cfg.dnn_hidden + d_h;
        let fusion_gain = store.add("fusion.ln.gain", Tensor::full(vec![fused], 1.0))?;
        let fusion_bias = store.add("fusion.ln.bias", Tensor::zeros(vec![fused]))?;
        let tower = Mlp2::new(&mut store, "tower", [fused, cfg.tower_hidden, 1], &mut rng)?;
        let alpha = store.add("fusion.alpha", Tensor::scalar(cfg.gen_score_init as f32))?;
        let model = QgsModel {
            cfg: cfg.clone(),
            variant,
            dims,
            embed,
            input,
            encoder,
            head,
            target,
            dnn,
            hfg,
            fusion_gain,
            fusion_bias,
            tower,
            alpha,
        };
        Ok((model, store))
    }

    /// Overrides the item and query tables from a checkpoint-format file
    /// ("ext_cls" `[V, d_b]`, "ext_sep" `[Q, d_b]`) and freezes them.
    pub fn load_external_embeddings(&self, path: impl AsRef<Path>, store: &mut ParamStore<f32>) -> Result<()> {
        let tensors = decode_tensors(&std::fs::read(path)?)?;
        self.set_external_embeddings(tensors, store)
    }

    pub fn set_external_embeddings(
        &self,
        tensors: Vec<(String, Tensor<f32>)>,
        store: &mut ParamStore<f32>,
    ) -> Result<()> {
        let mut found = [false; 2];
        for (name, t) in tensors {
            let (slot, id) = match name.as_str() {
                "ext_cls" => (0, self.embed.item_table),
                "ext_sep" => (1, self.embed.query_table),
                other => return Err(Error::Checkpoint(format!("unknown external tensor {other:?}"))),
            };
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t)?;
            store.set_frozen(id, true);
            found[slot] = true;
        }
        if found != [true, true] {
            return Err(Error::Checkpoint("external embeddings need ext_cls and ext_sep".into()));
        }
        Ok(())
    }

    fn raw_features<F: Scalar>(&self, rows: usize, data: &[f32], zero: bool) -> Result<Tensor<F>> {
        let d = self.dims.feature_dim;
        if zero {
            Ok(Tensor::zeros(vec![rows, d]))
        } else {
            lift(vec![rows, d], data)
        }
    }

    fn zero_context(&self) -> bool {
        self.variant == Variant::NoContextFeatures
    }

    /// Pair tokens and encoder outputs for every position of the batch.
    pub fn encode<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        sessions: &[&Session],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded> {
        let first = sessions.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let l = first.len();
        for s in sessions {
            if s.len() != l {
                return Err(Error::invalid(format!(
                    "batch mixes session lengths {l} and {}",
                    s.len()
                )));
            }
            if s.feature_dim != self.dims.feature_dim {
                return Err(Error::invalid(format!(
                    "session feature_dim {} but model expects {}",
                    s.feature_dim, self.dims.feature_dim
                )));
            }
        }
        let layout = SeqLayout {
            seqs: sessions.len(),
            len: l,
        };
        let queries = self.checked_ids(sessions.iter().flat_map(|s| s.query_text_ids.iter()), self.dims.query_vocab, "query id")?;
        let items = self.checked_ids(sessions.iter().flat_map(|s| s.item_ids.iter()), self.dims.vocab, "item id")?;
        let (e_cls, e_sep) = self.embed.embed_interaction(tape, &queries, &items)?;
        let feats: Vec<f32> = sessions.iter().flat_map(|s| s.features.iter().copied()).collect();
        let f = tape.input(self.raw_features(layout.rows(), &feats, self.zero_context())?)?;
        let x = self.input.pair_tokens(tape, f, e_cls)?;
        let positions: Vec<usize> = (0..layout.rows()).map(|r| r % l).collect();
        let h0 = self.input.project(tape, x, &positions)?;
        let h = self.encoder.forward(tape, h0, layout, rng)?;
        Ok(Encoded { h, x, e_sep, layout })
    }

    fn checked_ids<'a>(&self, ids: impl Iterator<Item = &'a u32>, size: usize, what: &'static str) -> Result<Vec<usize>> {
        ids.map(|&i| {
            let i = i as usize;
            if i >= size {
                Err(Error::OutOfRange { what, index: i, size })
            } else {
                Ok(i)
            }
        })
        .collect()
    }

    /// Rows of `[B*(L-1)]` next-item pairs: `(source row, target row)`.
    fn next_item_rows(layout: SeqLayout) -> (Vec<usize>, Vec<usize>) {
        let t_len = layout.len - 1;
        let src = (0..layout.seqs)
            .flat_map(|b| (0..t_len).map(move |t| b * layout.len + t))
            .collect();
        let dst = (0..layout.seqs)
            .flat_map(|b| (0..t_len).map(move |t| b * layout.len + t + 1))
            .collect();
        (src, dst)
    }

    /// Unnormalized next-item predictions `z_t` for `t < L - 1`,
    /// `[B*(L-1), d_z]`.
    pub fn next_item_predictions<F: Scalar>(&self, tape: &mut Tape<'_, F>, enc: &Encoded) -> Result<Var> {
        let (src, dst) = Self::next_item_rows(enc.layout);
        let h = tape.gather_rows(enc.h, &src)?;
        let e_next = if self.head.query_conditioned {
            Some(tape.gather_rows(enc.e_sep, &dst)?)
        } else {
            None
        };
        self.head.predict(tape, h, e_next)
    }

    /// InfoNCE over all valid next-item positions; `None` when no position
    /// of the batch has a target.
    pub fn infonce<F: Scalar>(&self, tape: &mut Tape<'_, F>, enc: &Encoded, sessions: &[&Session]) -> Result<Option<Var>> {
        let layout = enc.layout;
        if layout.len < 2 {
            return Ok(None);
        }
        let t_len = layout.len - 1;
        let pair_layout = SeqLayout {
            seqs: layout.seqs,
            len: t_len,
        };
        let mut valid = Vec::with_capacity(pair_layout.rows());
        let mut items = Vec::with_capacity(pair_layout.rows());
        for s in sessions {
            for t in 0..t_len {
                valid.push(t + 1 < s.valid_len);
                items.push(s.item_ids[t + 1]);
            }
        }
        if !valid.iter().any(|&v| v) {
            return Ok(None);
        }
        let z = self.next_item_predictions(tape, enc)?;
        let (_, dst) = Self::next_item_rows(layout);
        let xt = tape.gather_rows(enc.x, &dst)?;
        let v = self.target.forward(tape, xt)?;
        let eps = F::lit(NORM_EPS);
        let zn = tape.l2_normalize(z, eps)?;
        let vn = tape.l2_normalize(v, eps)?;
        let bias = mask_bias::<F>(&valid, &items, pair_layout)?;
        let inv_tau = F::lit(1.0 / self.cfg.temperature);
        Ok(Some(tape.infonce(zn, vn, pair_layout, inv_tau, &bias, &valid)?))
    }

    /// Ranking logits for every candidate of every request, `[n, 1]`.
    pub fn score_requests<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        enc: &Encoded,
        requests: &[BoundRequest<'_>],
    ) -> Result<Var> {
        let l = enc.layout.len;
        let d_f = self.dims.feature_dim;
        let mut hist_rows = Vec::with_capacity(requests.len());
        let mut queries = Vec::with_capacity(requests.len());
        let mut cand_req = Vec::new();
        let mut items = Vec::new();
        let mut feats = Vec::new();
        let mut cross = Vec::new();
        let mut present = Vec::new();
        for (r, br) in requests.iter().enumerate() {
            let req = br.request;
            if br.seq >= enc.layout.seqs || req.position == 0 || req.position >= l {
                return Err(Error::invalid(format!(
                    "request at sequence {} position {} outside the batch",
                    br.seq, req.position
                )));
            }
            hist_rows.push(br.seq * l + req.position - 1);
            queries.push(req.query_text);
            for c in &req.candidates {
                if c.features.len() != d_f || c.cross.len() != CROSS_DIM {
                    return Err(Error::invalid("candidate feature width mismatch"));
                }
                cand_req.push(r);
                items.push(c.item);
                feats.extend_from_slice(&c.features);
                cross.extend_from_slice(&c.cross);
                present.extend_from_slice(&c.group_present);
            }
        }
        let n = items.len();
        if n == 0 {
            return Err(Error::invalid("no candidates to score"));
        }
        let queries = self.checked_ids(queries.iter(), self.dims.query_vocab, "query id")?;
        let items = self.checked_ids(items.iter(), self.dims.vocab, "item id")?;

        // Generative score: shared head against the candidate's target.
        let h_req = tape.gather_rows(enc.h, &hist_rows)?;
        let q_req = self.embed.query_rows(tape, &queries)?;
        let z_req = self.head.predict(tape, h_req, Some(q_req))?;
        let eps = F::lit(NORM_EPS);
        let z_req = tape.l2_normalize(z_req, eps)?;
        let z_c = tape.gather_rows(z_req, &cand_req)?;
        let q_c = tape.gather_rows(q_req, &cand_req)?;
        let d_c = self.embed.item_rows(tape, &items)?;
        let e_cls = self.embed.mix_rows(tape, q_c, d_c)?;
        let f_tok = tape.input(self.raw_features(n, &feats, self.zero_context())?)?;
        let x_c = self.input.pair_tokens(tape, f_tok, e_cls)?;
        let v_c = self.target.forward(tape, x_c)?;
        let v_c = tape.l2_normalize(v_c, eps)?;
        let cos = tape.row_dot(z_c, v_c)?;
        let gen = tape.scale(cos, F::lit(1.0 / self.cfg.temperature))?;

        // Discriminative tower.
        let f_raw = tape.input(lift(vec![n, d_f], &feats)?)?;
        let h_dnn = self.dnn.forward(tape, f_raw)?;
        let h_seq = tape.gather_rows(h_req, &cand_req)?;
        let mut parts = Vec::with_capacity(4);
        if let Some(hfg) = &self.hfg {
            let cross = tape.input(lift(vec![n, CROSS_DIM], &cross)?)?;
            parts.push(hfg.forward(tape, cross, &present, h_dnn)?);
        }
        parts.extend([d_c, h_dnn, h_seq]);
        let fused = tape.concat(&parts)?;
        let (g, b) = (tape.param(self.fusion_gain), tape.param(self.fusion_bias));
        let normed = tape.layernorm(fused, g, b, eps)?;
        let logit = self.tower.forward(tape, normed)?;
        let alpha = tape.param(self.alpha);
        let weighted = tape.mul_scalar(gen, alpha)?;
        tape.add(logit, weighted)
    }

    /// Joint forward: `loss = BCE + lambda * InfoNCE` over whichever terms
    /// the batch supports. Dropout is active only when `rng` is given.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        sessions: &[&Session],
        requests: &[BoundRequest<'_>],
        lambda: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let encoded = self.encode(tape, sessions, rng)?;
        let infonce = self.infonce(tape, &encoded, sessions)?;
        let (scores, ctr) = if requests.is_empty() {
            (None, None)
        } else {
            let s = self.score_requests(tape, &encoded, requests)?;
            let labels: Vec<F> = requests
                .iter()
                .flat_map(|r| r.request.candidates.iter().map(|c| F::lit(c.label as f64)))
                .collect();
            let ctr = tape.bce_with_logits(s, &labels)?;
            (Some(s), Some(ctr))
        };
        let loss = match (infonce, ctr) {
            (Some(i), Some(c)) => {
                let wi = tape.scale(i, F::lit(lambda))?;
                tape.add(c, wi)?
            }
            (Some(i), None) => tape.scale(i, F::lit(lambda))?,
            (None, Some(c)) => c,
            (None, None) => return Err(Error::invalid("batch has neither next-item targets nor requests")),
        };
        Ok(Forward {
            encoded,
            infonce,
            ctr,
            scores,
            loss,
        })
    }
}
