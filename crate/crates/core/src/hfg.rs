//! Heterogeneous feature-group attention.
//!
//! Each cross-feature group is projected to a common width, a context token
//! derived from the (gradient-stopped) shared-DNN vector is appended, and
//! one bidirectional pointwise-attention block with an FFN mixes the
//! `G + 1` tokens before masked average pooling.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal, Linear, Mlp2};
use crate::numerics::ops::NORM_EPS;
use crate::numerics::{AttnSpec, ParamId, ParamStore, Scalar, SeqLayout, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct HfgSpec {
    /// Column range of each group inside the cross-feature vector.
    pub groups: Vec<Range<usize>>,
    pub token_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub out_dim: usize,
    /// Width of the shared-DNN vector feeding the context token.
    pub context_dim: usize,
}

#[derive(Clone, Debug)]
pub struct Hfg {
    pub spec: HfgSpec,
    pub group_proj: Vec<Linear>,
    pub context_proj: Linear,
    pub norm1: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wu: ParamId,
    pub wo: ParamId,
    pub norm2: ParamId,
    pub ffn: Mlp2,
    pub out: ParamId,
}

impl Hfg {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        spec: HfgSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let e = spec.token_dim;
        if spec.heads == 0 || e % spec.heads != 0 {
            return Err(Error::invalid(format!(
                "hfg token width {e} not divisible by {} heads",
                spec.heads
            )));
        }
        let mut group_proj = Vec::with_capacity(spec.groups.len());
        for (g, r) in spec.groups.iter().enumerate() {
            group_proj.push(Linear::new(store, &format!("hfg.group{g}"), r.len(), e, true, rng)?);
        }
        let std = 1.0 / (e as f64).sqrt();
        Ok(Hfg {
            context_proj: Linear::new(store, "hfg.context", spec.context_dim, e, true, rng)?,
            norm1: store.add("hfg.norm1", Tensor::full(vec![e], 1.0))?,
            wq: store.add("hfg.wq", normal(rng, &[e, e], std))?,
            wk: store.add("hfg.wk", normal(rng, &[e, e], std))?,
            wv: store.add("hfg.wv", normal(rng, &[e, e], std))?,
            wu: store.add("hfg.wu", normal(rng, &[e, e], std))?,
            wo: store.add("hfg.wo", normal(rng, &[e, e], std))?,
            norm2: store.add("hfg.norm2", Tensor::full(vec![e], 1.0))?,
            ffn: Mlp2::new(store, "hfg.ffn", [e, spec.ffn_dim, e], rng)?,
            out: store.add("hfg.out", normal(rng, &[e, spec.out_dim], std))?,
            group_proj,
            spec,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.spec.groups.len()
    }

    /// `ReLU(W_g r_g + b_g)` for every group; `cross` is `[n, d_x]`.
    pub fn project_groups<F: Scalar>(&self, tape: &mut Tape<'_, F>, cross: Var) -> Result<Vec<Var>> {
        self.spec
            .groups
            .iter()
            .zip(&self.group_proj)
            .map(|(r, proj)| {
                let part = tape.slice_cols(cross, r.start, r.len())?;
                let y = proj.forward(tape, part)?;
                tape.relu(y)
            })
            .collect()
    }

    /// Interleaves the group tokens and the context token into
    /// `[n * (G + 1), d_e]`, context last within each sample. No gradient
    /// flows from here back into `h_dnn`.
    pub fn build_token_sequence<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        groups: &[Var],
        h_dnn: Var,
    ) -> Result<Var> {
        let n = tape.value(h_dnn).rows();
        let detached = tape.stop_gradient(h_dnn)?;
        let ctx = self.context_proj.forward(tape, detached)?;
        let mut parts = groups.to_vec();
        parts.push(ctx);
        let wide = tape.concat(&parts)?;
        tape.reshape(wide, &[n * parts.len(), self.spec.token_dim])
    }

    /// Pre-norm pointwise attention (divided by the token count) and FFN,
    /// each with a residual, over `samples` blocks of tokens.
    pub fn attention<F: Scalar>(&self, tape: &mut Tape<'_, F>, r: Var, samples: usize) -> Result<Var> {
        let e = self.spec.token_dim;
        let rows = tape.value(r).rows();
        if samples == 0 || rows % samples != 0 {
            return Err(Error::shape("hfg attention", tape.shape(r), &[samples, e]));
        }
        let tokens = rows / samples;
        let g1 = tape.param(self.norm1);
        let xn = tape.rmsnorm(r, Some(g1), F::lit(NORM_EPS))?;
        let proj = |w: ParamId, tape: &mut Tape<'_, F>| -> Result<Var> {
            let w = tape.param(w);
            let y = tape.matmul(xn, w)?;
            tape.silu(y)
        };
        let q = proj(self.wq, tape)?;
        let k = proj(self.wk, tape)?;
        let v = proj(self.wv, tape)?;
        let u = proj(self.wu, tape)?;
        let head_dim = e / self.spec.heads;
        let spec = AttnSpec {
            layout: SeqLayout { seqs: samples, len: tokens },
            heads: self.spec.heads,
            causal: false,
            logit_scale: F::one() / F::lit(head_dim as f64),
            out_scale: F::one() / F::lit(tokens as f64),
        };
        let a = tape.pointwise_attention(q, k, v, spec)?;
        let ua = tape.mul(u, a)?;
        let wo = tape.param(self.wo);
        let o = tape.matmul(ua, wo)?;
        let x1 = tape.add(r, o)?;
        let g2 = tape.param(self.norm2);
        let x1n = tape.rmsnorm(x1, Some(g2), F::lit(NORM_EPS))?;
        let f = self.ffn.forward(tape, x1n)?;
        tape.add(x1, f)
    }

    /// Mean over unmasked tokens of each sample, then `W_out`.
    pub fn pool_project<F: Scalar>(&self, tape: &mut Tape<'_, F>, tokens: Var, mask: &[bool]) -> Result<Var> {
        let pooled = tape.masked_mean_pool(tokens, self.num_groups() + 1, mask)?;
        let w = tape.param(self.out);
        tape.matmul(pooled, w)
    }

    /// `h_sparse` for `n` samples. `present` is `[n, G]`; the context token
    /// is always kept.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        cross: Var,
        present: &[bool],
        h_dnn: Var,
    ) -> Result<Var> {
        let n = tape.value(h_dnn).rows();
        let g = self.num_groups();
        if present.len() != n * g {
            return Err(Error::shape("hfg present mask", &[present.len()], &[n, g]));
        }
        let groups = self.project_groups(tape, cross)?;
        let r = self.build_token_sequence(tape, &groups, h_dnn)?;
        let y = self.attention(tape, r, n)?;
        let mut mask = Vec::with_capacity(n * (g + 1));
        for i in 0..n {
            mask.extend_from_slice(&present[i * g..(i + 1) * g]);
            mask.push(true);
        }
        self.pool_project(tape, y, &mask)
    }
}
