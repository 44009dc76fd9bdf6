//! Query-conditioned next-item prediction with in-batch InfoNCE.
//!
//! For each position `t` of every sequence `b` the head predicts `z_t` from
//! the encoder output `h_t` (and, in the query-conditioned variant, the next
//! query's embedding). The positives are `v_{t+1} = W_tgt x_{t+1}` of the
//! same sequence; negatives are the other sequences' targets at the same
//! position.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal, Mlp2};
use crate::numerics::{log_softmax_probs, similarity_logits, ParamId, ParamStore, Scalar, SeqLayout, Tape, Tensor, Var};

/// Additive stand-in for `-inf` in masked logits.
pub const MASK_BIAS: f64 = -1e9;

/// Two-layer ReLU MLP shared by next-item training and ranking.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub mlp: Mlp2,
    /// Whether the head consumes the next query's embedding.
    pub query_conditioned: bool,
}

impl PredictionHead {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        hidden: usize,
        embed_dim: usize,
        out: usize,
        query_conditioned: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let input = if query_conditioned { hidden + embed_dim } else { hidden };
        Ok(PredictionHead {
            mlp: Mlp2::new(store, "head", [input, hidden, out], rng)?,
            query_conditioned,
        })
    }

    /// `z = Head([h ; e_sep_next])`, or `Head(h)` for the item-only head,
    /// which ignores `e_sep_next`.
    pub fn predict<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        h: Var,
        e_sep_next: Option<Var>,
    ) -> Result<Var> {
        let input = if self.query_conditioned {
            let e = e_sep_next
                .ok_or_else(|| Error::invalid("query-conditioned head needs e_sep"))?;
            tape.concat(&[h, e])?
        } else {
            h
        };
        self.mlp.forward(tape, input)
    }
}

/// `v = x W_tgt`, no bias and no nonlinearity.
#[derive(Clone, Debug)]
pub struct TargetProjection {
    pub w: ParamId,
}

impl TargetProjection {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        input: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TargetProjection {
            w: store.add("target.w", normal(rng, &[input, out], 1.0 / (input as f64).sqrt()))?,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        tape.matmul(x, w)
    }
}

/// Per-position similarity matrices `s_t[b][c] = <z_b, v_c> / tau` over
/// L2-normalized rows, returned as `[T, B, B]`.
pub fn similarity<F: Scalar>(z: &Tensor<F>, v: &Tensor<F>, layout: SeqLayout, tau: F) -> Result<Tensor<F>> {
    if z.shape() != v.shape() || z.rows() != layout.rows() {
        return Err(Error::shape("similarity", z.shape(), v.shape()));
    }
    if tau <= F::zero() {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let eps = F::lit(crate::numerics::ops::NORM_EPS);
    let zn = crate::numerics::ops::l2_normalize(z, eps)?;
    let vn = crate::numerics::ops::l2_normalize(v, eps)?;
    let data = similarity_logits(zn.data(), vn.data(), z.cols(), layout, F::one() / tau);
    Tensor::new(vec![layout.len, layout.seqs, layout.seqs], data)
}

/// Additive mask `[T, B, B]`: column `c` of row `b` at position `t` is
/// removed when `c`'s target is padding or, off the diagonal, when it is the
/// same item as `b`'s target. The diagonal is never masked.
///
/// `valid` and `items` are indexed `b * T + t` and describe the targets.
pub fn mask_bias<F: Scalar>(valid: &[bool], items: &[u32], layout: SeqLayout) -> Result<Vec<F>> {
    let (bsz, t_len) = (layout.seqs, layout.len);
    if valid.len() != layout.rows() || items.len() != layout.rows() {
        return Err(Error::invalid("mask_bias: valid/items size mismatch"));
    }
    let neg = F::lit(MASK_BIAS);
    let mut out = vec![F::zero(); t_len * bsz * bsz];
    for t in 0..t_len {
        for b in 0..bsz {
            for c in 0..bsz {
                if c == b {
                    continue;
                }
                let (ib, ic) = (b * t_len + t, c * t_len + t);
                if !valid[ic] || items[ic] == items[ib] {
                    out[(t * bsz + b) * bsz + c] = neg;
                }
            }
        }
    }
    Ok(out)
}

/// Logits plus [`mask_bias`].
pub fn apply_masks<F: Scalar>(
    logits: &Tensor<F>,
    valid: &[bool],
    items: &[u32],
    layout: SeqLayout,
) -> Result<Tensor<F>> {
    let bias = mask_bias::<F>(valid, items, layout)?;
    if logits.numel() != bias.len() {
        return Err(Error::shape("apply_masks", logits.shape(), &[layout.len, layout.seqs, layout.seqs]));
    }
    let data = logits.data().iter().zip(&bias).map(|(&l, &b)| l + b).collect();
    Tensor::new(logits.shape().to_vec(), data)
}

/// `-mean_{(b,t) valid} log softmax(s_t[b])[b]` over masked `[T, B, B]`
/// logits.
pub fn infonce_loss<F: Scalar>(masked: &Tensor<F>, valid: &[bool], layout: SeqLayout) -> Result<F> {
    let (bsz, t_len) = (layout.seqs, layout.len);
    if masked.numel() != t_len * bsz * bsz || valid.len() != layout.rows() {
        return Err(Error::shape("infonce_loss", masked.shape(), &[t_len, bsz, bsz]));
    }
    let half = F::lit(MASK_BIAS / 2.0);
    let mut total = F::zero();
    let mut count = 0usize;
    for t in 0..t_len {
        for b in 0..bsz {
            if !valid[b * t_len + t] {
                continue;
            }
            let row = &masked.data()[(t * bsz + b) * bsz..(t * bsz + b + 1) * bsz];
            if row[b] < half {
                return Err(Error::invalid(format!(
                    "positive logit masked at sequence {b}, position {t}"
                )));
            }
            let (lse, _) = log_softmax_probs(row);
            total += lse - row[b];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("infonce: no valid positions"));
    }
    Ok(total / F::lit(count as f64))
}

/// Softmax probabilities of masked logits, same layout.
pub fn masked_probabilities<F: Scalar>(masked: &Tensor<F>, layout: SeqLayout) -> Tensor<F> {
    let b = layout.seqs;
    let data = masked
        .data()
        .chunks_exact(b)
        .flat_map(|row| log_softmax_probs(row).1)
        .collect();
    Tensor::new(masked.shape().to_vec(), data).unwrap()
}
