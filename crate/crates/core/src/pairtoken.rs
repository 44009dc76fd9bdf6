//! Query-item pair tokens and the input projection into the encoder width.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal, Linear};
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Var};

/// Learnable id embeddings standing in for a text encoder.
///
/// `e_sep` is the query embedding; `e_cls = W_mix [q_emb ; d_emb] + b`
/// depends on both ids.
#[derive(Clone, Debug)]
pub struct SemanticEmbedder {
    pub item_table: ParamId,
    pub query_table: ParamId,
    pub mix: Linear,
    pub dim: usize,
}

impl SemanticEmbedder {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        vocab: usize,
        query_vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        Ok(SemanticEmbedder {
            item_table: store.add("embed.item", normal(rng, &[vocab, dim], std))?,
            query_table: store.add("embed.query", normal(rng, &[query_vocab, dim], std))?,
            mix: Linear::new(store, "embed.mix", 2 * dim, dim, true, rng)?,
            dim,
        })
    }

    /// Item-table rows.
    pub fn item_rows<F: Scalar>(&self, tape: &mut Tape<'_, F>, items: &[usize]) -> Result<Var> {
        let t = tape.param(self.item_table);
        tape.gather_rows(t, items)
    }

    /// `e_sep` rows for each query id.
    pub fn query_rows<F: Scalar>(&self, tape: &mut Tape<'_, F>, queries: &[usize]) -> Result<Var> {
        let t = tape.param(self.query_table);
        tape.gather_rows(t, queries)
    }

    /// `e_cls` from already gathered query and item rows.
    pub fn mix_rows<F: Scalar>(&self, tape: &mut Tape<'_, F>, q: Var, d: Var) -> Result<Var> {
        let qd = tape.concat(&[q, d])?;
        self.mix.forward(tape, qd)
    }

    /// Returns `(e_cls, e_sep)`, one row per `(query, item)` pair.
    pub fn embed_interaction<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        queries: &[usize],
        items: &[usize],
    ) -> Result<(Var, Var)> {
        if queries.len() != items.len() {
            return Err(Error::shape("embed_interaction", &[queries.len()], &[items.len()]));
        }
        let e_sep = self.query_rows(tape, queries)?;
        let d = self.item_rows(tape, items)?;
        let e_cls = self.mix_rows(tape, e_sep, d)?;
        Ok((e_cls, e_sep))
    }
}

/// One pair token: `x = [f ; e_cls]` plus the held-out query embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PairToken {
    pub x: Vec<f32>,
    pub e_sep: Vec<f32>,
    pub feature_dim: usize,
}

impl PairToken {
    pub fn features(&self) -> &[f32] {
        &self.x[..self.feature_dim]
    }

    pub fn cls(&self) -> &[f32] {
        &self.x[self.feature_dim..]
    }

    pub fn width(&self) -> usize {
        self.x.len()
    }
}

pub fn build_pair_token(f: &[f32], e_cls: &[f32], e_sep: &[f32]) -> Result<PairToken> {
    if e_cls.len() != e_sep.len() {
        return Err(Error::shape("build_pair_token", &[e_cls.len()], &[e_sep.len()]));
    }
    let mut x = Vec::with_capacity(f.len() + e_cls.len());
    x.extend_from_slice(f);
    x.extend_from_slice(e_cls);
    Ok(PairToken {
        x,
        e_sep: e_sep.to_vec(),
        feature_dim: f.len(),
    })
}

/// Feature embedding, `W_proj` and the positional table.
#[derive(Clone, Debug)]
pub struct InputProjection {
    pub feature_embed: Linear,
    pub proj: ParamId,
    pub positions: ParamId,
    pub max_len: usize,
}

impl InputProjection {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        feature_dim: usize,
        embed_dim: usize,
        hidden: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let width = feature_dim + embed_dim;
        Ok(InputProjection {
            feature_embed: Linear::new(store, "input.feature", feature_dim, feature_dim, true, rng)?,
            proj: store.add("input.proj", normal(rng, &[width, hidden], 1.0 / (width as f64).sqrt()))?,
            positions: store.add("input.pos", normal(rng, &[max_len, hidden], 0.02))?,
            max_len,
        })
    }

    /// Pair tokens `[feature_embed(f) ; e_cls]`.
    pub fn pair_tokens<F: Scalar>(&self, tape: &mut Tape<'_, F>, f: Var, e_cls: Var) -> Result<Var> {
        let fe = self.feature_embed.forward(tape, f)?;
        tape.concat(&[fe, e_cls])
    }

    /// `h0 = x W_proj + p[position]`, one position per row of `x`.
    pub fn project<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        positions: &[usize],
    ) -> Result<Var> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.max_len) {
            return Err(Error::OutOfRange {
                what: "position (max_len)",
                index: p,
                size: self.max_len,
            });
        }
        let w = tape.param(self.proj);
        let h = tape.matmul(x, w)?;
        let table = tape.param(self.positions);
        let pos = tape.gather_rows(table, positions)?;
        tape.add(h, pos)
    }
}
