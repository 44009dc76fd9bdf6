//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. `backward` walks
//! the recorded nodes in strict reverse order and returns one gradient per
//! parameter of the borrowed [`ParamStore`]. The tape is rebuilt for every
//! forward pass.

use rand::Rng;

use crate::error::{Error, Result};

use super::ops::{
    l2_normalize_rows, layernorm_rows, rmsnorm_rows, sigmoid_scalar, silu_grad_scalar,
    silu_scalar,
};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::check_finite;
use super::{gemm, Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Layout of a batch of equal-length sequences stored as `[seqs * len, d]`
/// rows, sequence-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub seqs: usize,
    pub len: usize,
}

impl SeqLayout {
    pub fn rows(&self) -> usize {
        self.seqs * self.len
    }
}

/// Options for [`Tape::pointwise_attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttnSpec<F> {
    pub layout: SeqLayout,
    pub heads: usize,
    pub causal: bool,
    /// Multiplies `<q, k>` before the SiLU.
    pub logit_scale: F,
    /// Multiplies the aggregated values.
    pub out_scale: F,
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    MulScalar(Var, Var),
    Silu(Var),
    Relu(Var),
    Sigmoid(Var),
    RmsNorm {
        x: Var,
        gain: Option<Var>,
        inv_rms: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        inv_std: Vec<F>,
    },
    L2Normalize {
        x: Var,
        eps: F,
        norms: Vec<F>,
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    DecayScan {
        s: Var,
        logit: Var,
        len: usize,
    },
    PointwiseAttn {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    MaskedMeanPool {
        x: Var,
        tokens: usize,
        weights: Vec<F>,
    },
    RowDot(Var, Var),
    InfoNce {
        z: Var,
        v: Var,
        layout: SeqLayout,
        inv_tau: F,
        valid: Vec<bool>,
        probs: Vec<F>,
        count: usize,
    },
    Bce {
        logits: Var,
        labels: Vec<F>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recorded computation graph over one forward pass.
pub struct Tape<'s, F: Scalar> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    detached: Vec<Tensor<F>>,
    pinned: Option<Vec<Tensor<F>>>,
}

impl<'s, F: Scalar> Tape<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            detached: Vec::new(),
            pinned: None,
        }
    }

    /// A tape whose `k`-th [`Tape::stop_gradient`] returns `pinned[k]`
    /// instead of its argument, so finite differences see the detached
    /// branches as constants.
    pub fn with_pinned_detached(store: &'s ParamStore<F>, pinned: Vec<Tensor<F>>) -> Self {
        Tape {
            pinned: Some(pinned),
            ..Tape::new(store)
        }
    }

    /// Values produced by every `stop_gradient` call so far, in call order.
    pub fn detached_values(&self) -> &[Tensor<F>] {
        &self.detached
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, name: &str, needs_grad: bool) -> Result<Var> {
        check_finite(value.data(), name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable input.
    pub fn input(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push(value, Op::Leaf, "input", false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copies `x` into a fresh leaf: downstream gradients never reach `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let k = self.detached.len();
        let value = match &self.pinned {
            Some(p) => {
                let v = p.get(k).ok_or_else(|| Error::invalid("more stop_gradient calls than pinned values"))?;
                if v.shape() != self.shape(x) {
                    return Err(Error::shape("stop_gradient (pinned)", v.shape(), self.shape(x)));
                }
                v.clone()
            }
            None => self.value(x).clone(),
        };
        self.detached.push(value.clone());
        self.input(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        gemm(
            false,
            false,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            false,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), "matmul", ng)
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, op, name, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// `x[.., n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddRow(x, bias), "add_row", ng)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), "scale", ng)
    }

    /// `x * s` where `s` holds exactly one value.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x) || self.needs(s);
        self.push(out, Op::MulScalar(x, s), "mul_scalar", ng)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(silu_scalar);
        let ng = self.needs(x);
        self.push(out, Op::Silu(x), "silu", ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(F::zero()));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), "relu", ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid_scalar);
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), "sigmoid", ng)
    }

    /// Row-wise RMS normalization with an optional learnable gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Option<Var>, eps: F) -> Result<Var> {
        let cols = self.value(x).cols();
        if cols == 0 {
            return Err(Error::invalid("rmsnorm: zero-length last dimension"));
        }
        if let Some(g) = gain {
            if self.value(g).numel() != cols {
                return Err(Error::shape("rmsnorm", self.shape(x), self.shape(g)));
            }
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.shape().to_vec());
        let mut inv_rms = vec![F::zero(); xv.rows()];
        rmsnorm_rows(
            xv.data(),
            cols,
            gain.map(|g| self.value(g).data()),
            eps,
            out.data_mut(),
            &mut inv_rms,
        );
        let ng = self.needs(x) || gain.is_some_and(|g| self.needs(g));
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, "rmsnorm", ng)
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::shape("layernorm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.shape().to_vec());
        let mut inv_std = vec![F::zero(); xv.rows()];
        layernorm_rows(
            xv.data(),
            cols,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
            out.data_mut(),
            &mut inv_std,
        );
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            },
            "layernorm",
            ng,
        )
    }

    pub fn l2_normalize(&mut self, x: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Tensor::zeros(xv.shape().to_vec());
        let mut norms = vec![F::zero(); xv.rows()];
        l2_normalize_rows(xv.data(), cols, eps, out.data_mut(), &mut norms);
        let ng = self.needs(x);
        self.push(out, Op::L2Normalize { x, eps, norms }, "l2_normalize", ng)
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::shape("concat", self.shape(first), self.shape(p)));
            }
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, width], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat(parts.to_vec()), "concat", ng)
    }

    /// Columns `start..start + width` of a 2-D view of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if start + width > cols {
            return Err(Error::OutOfRange {
                what: "slice_cols",
                index: start + width,
                size: cols,
            });
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let out = Tensor::new(vec![rows, width], data)?;
        let ng = self.needs(x);
        self.push(out, Op::SliceCols { x, start }, "slice_cols", ng)
    }

    /// Row lookup `src[idx[i]]`; gradients scatter-add back.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (rows, cols) = (sv.rows(), sv.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::OutOfRange {
                    what: "gather_rows",
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(sv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        let ng = self.needs(src);
        self.push(
            out,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            "gather_rows",
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.needs(x);
        self.push(out, Op::Reshape(x), "reshape", ng)
    }

    /// Decayed causal scan `C_t = gamma * C_{t-1} + S_t` per sequence, with
    /// `gamma = sigmoid(logit)`. `logit` holds one value (shared) or one per
    /// column.
    pub fn decay_scan(&mut self, s: Var, logit: Var, layout: SeqLayout) -> Result<Var> {
        let sv = self.value(s);
        let d = sv.cols();
        if sv.rows() != layout.rows() {
            return Err(Error::shape(
                "decay_scan",
                sv.shape(),
                &[layout.seqs, layout.len, d],
            ));
        }
        let lv = self.value(logit);
        if lv.numel() != 1 && lv.numel() != d {
            return Err(Error::shape("decay_scan", sv.shape(), lv.shape()));
        }
        let gamma = expand_gamma(lv.data(), d);
        let mut out = Tensor::zeros(sv.shape().to_vec());
        scan_forward(sv.data(), &gamma, layout, out.data_mut());
        let ng = self.needs(s) || self.needs(logit);
        self.push(
            out,
            Op::DecayScan {
                s,
                logit,
                len: layout.len,
            },
            "decay_scan",
            ng,
        )
    }

    /// Pointwise aggregated attention:
    /// `out_t = out_scale * sum_tau silu(logit_scale * <q_t, k_tau>) v_tau`
    /// per head, over `tau <= t` when causal and over all positions otherwise.
    pub fn pointwise_attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec<F>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq != sk || sq != sv {
            return Err(Error::shape("pointwise_attention", sq, sk));
        }
        let d = self.value(q).cols();
        if self.value(q).rows() != spec.layout.rows() || spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::invalid(format!(
                "pointwise_attention: width {d} with {} heads over {:?}",
                spec.heads, spec.layout
            )));
        }
        let mut out = Tensor::zeros(self.shape(q).to_vec());
        attn_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            &spec,
            out.data_mut(),
        );
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::PointwiseAttn { q, k, v, spec },
            "pointwise_attention",
            ng,
        )
    }

    /// Inverted dropout. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} not in [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, "dropout", ng)
    }

    /// Averages each block of `tokens` consecutive rows over the rows whose
    /// mask entry is true. Every block needs at least one unmasked row.
    pub fn masked_mean_pool(&mut self, x: Var, tokens: usize, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if tokens == 0 || rows % tokens != 0 || mask.len() != rows {
            return Err(Error::shape("masked_mean_pool", xv.shape(), &[mask.len(), tokens]));
        }
        let blocks = rows / tokens;
        let mut weights = vec![F::zero(); rows];
        let mut out = Tensor::zeros(vec![blocks, d]);
        for b in 0..blocks {
            let count = mask[b * tokens..(b + 1) * tokens].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::invalid(format!(
                    "masked_mean_pool: block {b} has every token masked"
                )));
            }
            let w = F::one() / F::lit(count as f64);
            for t in 0..tokens {
                let r = b * tokens + t;
                if mask[r] {
                    weights[r] = w;
                    let src = xv.row(r);
                    for (o, &s) in out.row_mut(b).iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            out,
            Op::MaskedMeanPool {
                x,
                tokens,
                weights,
            },
            "masked_mean_pool",
            ng,
        )
    }

    /// Row-wise inner product `[n,d] . [n,d] -> [n,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("row_dot", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let d = av.cols();
        let data: Vec<F> = av
            .data()
            .chunks_exact(d)
            .zip(bv.data().chunks_exact(d))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        let out = Tensor::new(vec![data.len(), 1], data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::RowDot(a, b), "row_dot", ng)
    }

    /// In-batch InfoNCE over per-position `B x B` similarity matrices.
    ///
    /// `z` and `v` are `[B*T, d]` rows (sequence-major, already
    /// L2-normalized). `mask_bias` is `[T, B, B]` and is added to the scaled
    /// similarities; `valid[b*T + t]` selects the rows entering the mean.
    pub fn infonce(
        &mut self,
        z: Var,
        v: Var,
        layout: SeqLayout,
        inv_tau: F,
        mask_bias: &[F],
        valid: &[bool],
    ) -> Result<Var> {
        let (zv, vv) = (self.value(z), self.value(v));
        if zv.shape() != vv.shape() || zv.rows() != layout.rows() {
            return Err(Error::shape("infonce", zv.shape(), vv.shape()));
        }
        let (bsz, t_len) = (layout.seqs, layout.len);
        if mask_bias.len() != t_len * bsz * bsz || valid.len() != layout.rows() {
            return Err(Error::invalid("infonce: mask/valid size mismatch"));
        }
        let logits = similarity_logits(zv.data(), vv.data(), zv.cols(), layout, inv_tau);
        let mut probs = vec![F::zero(); logits.len()];
        let mut total = F::zero();
        let mut count = 0usize;
        for t in 0..t_len {
            for b in 0..bsz {
                if !valid[b * t_len + t] {
                    continue;
                }
                let base = (t * bsz + b) * bsz;
                let row: Vec<F> = (0..bsz)
                    .map(|c| logits[base + c] + mask_bias[base + c])
                    .collect();
                let (lse, p) = log_softmax_probs(&row);
                total += lse - row[b];
                probs[base..base + bsz].copy_from_slice(&p);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("infonce: no valid positions"));
        }
        let loss = total / F::lit(count as f64);
        let ng = self.needs(z) || self.needs(v);
        self.push(
            Tensor::scalar(loss),
            Op::InfoNce {
                z,
                v,
                layout,
                inv_tau,
                valid: valid.to_vec(),
                probs,
                count,
            },
            "infonce",
            ng,
        )
    }

    /// Mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[F]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != labels.len() || labels.is_empty() {
            return Err(Error::shape("bce_with_logits", lv.shape(), &[labels.len()]));
        }
        let n = F::lit(labels.len() as f64);
        let loss = lv
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(F::zero()) - x * y + (F::one() + (-x.abs()).exp()).ln())
            .sum::<F>()
            / n;
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                labels: labels.to_vec(),
            },
            "bce_with_logits",
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), "sum", ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s = xv.data().iter().copied().sum::<F>() / F::lit(xv.numel() as f64);
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), "mean", ng)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![F::one()]);
        let mut param_grads: Vec<Tensor<F>> = self
            .store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads, &mut param_grads);
        }
        Ok(Gradients { grads: param_grads })
    }

    fn backward_node(
        &self,
        node: &Node<F>,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        param_grads: &mut [Tensor<F>],
    ) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                for (p, &d) in param_grads[id.0].data_mut().iter_mut().zip(g) {
                    *p += d;
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(da) = slot(nodes, grads, *a) {
                    gemm(false, true, m, n, k, g, val(*b), da, true);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    gemm(true, false, k, m, n, val(*a), g, db, true);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    axpy(da, g, F::one());
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    axpy(db, g, F::one());
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    axpy(da, g, F::one());
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    axpy(db, g, -F::one());
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    axpy(dx, g, F::one());
                }
                if let Some(db) = slot(nodes, grads, *bias) {
                    let cols = db.len();
                    for row in g.chunks_exact(cols) {
                        axpy(db, row, F::one());
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    axpy(dx, g, *c);
                }
            }
            Op::MulScalar(x, s) => {
                let c = val(*s)[0];
                if let Some(dx) = slot(nodes, grads, *x) {
                    axpy(dx, g, c);
                }
                if let Some(ds) = slot(nodes, grads, *s) {
                    ds[0] += g.iter().zip(val(*x)).map(|(&a, &b)| a * b).sum::<F>();
                }
            }
            Op::Silu(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                        *d += gv * silu_grad_scalar(xv);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                        if xv > F::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (F::one() - yv);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = val(*x);
                let cols = nodes[x.0].value.cols();
                let n = F::lit(cols as f64);
                let gv = gain.map(|gn| val(gn));
                if let Some(gn) = gain {
                    if let Some(dg) = slot(nodes, grads, *gn) {
                        for ((gr, xr), &r) in g
                            .chunks_exact(cols)
                            .zip(xv.chunks_exact(cols))
                            .zip(inv_rms.iter())
                        {
                            for j in 0..cols {
                                dg[j] += gr[j] * xr[j] * r;
                            }
                        }
                    }
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    let mut gg = vec![F::zero(); cols];
                    for (((gr, xr), dr), &r) in g
                        .chunks_exact(cols)
                        .zip(xv.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                        .zip(inv_rms.iter())
                    {
                        for j in 0..cols {
                            gg[j] = match gv {
                                Some(gain) => gr[j] * gain[j],
                                None => gr[j],
                            };
                        }
                        let dot: F = gg.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        let r3 = r * r * r * dot / n;
                        for j in 0..cols {
                            dr[j] += r * gg[j] - r3 * xr[j];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            } => {
                let xv = val(*x);
                let cols = nodes[x.0].value.cols();
                let n = F::lit(cols as f64);
                let gain_v = val(*gain);
                let xhat: Vec<F> = xv
                    .chunks_exact(cols)
                    .zip(inv_std.iter())
                    .flat_map(|(xr, &inv)| {
                        let mean = xr.iter().copied().sum::<F>() / n;
                        xr.iter().map(move |&v| (v - mean) * inv)
                    })
                    .collect();
                if let Some(db) = slot(nodes, grads, *bias) {
                    for row in g.chunks_exact(cols) {
                        axpy(db, row, F::one());
                    }
                }
                if let Some(dg) = slot(nodes, grads, *gain) {
                    for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for j in 0..cols {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    let mut dh = vec![F::zero(); cols];
                    for (((gr, hr), dr), &inv) in g
                        .chunks_exact(cols)
                        .zip(xhat.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                        .zip(inv_std.iter())
                    {
                        for j in 0..cols {
                            dh[j] = gr[j] * gain_v[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<F>() / n;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<F>() / n;
                        for j in 0..cols {
                            dr[j] += inv * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::L2Normalize { x, eps, norms } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let xv = val(*x);
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((((gr, yr), dr), &nrm), xr) in g
                        .chunks_exact(cols)
                        .zip(y.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                        .zip(norms.iter())
                        .zip(xv.chunks_exact(cols))
                    {
                        let raw = xr.iter().map(|&v| v * v).sum::<F>().sqrt();
                        let proj = if raw > *eps {
                            gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>()
                        } else {
                            F::zero()
                        };
                        for j in 0..cols {
                            dr[j] += (gr[j] - yr[j] * proj) / nrm;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let width = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let pc = nodes[p.0].value.cols();
                    if let Some(dp) = slot(nodes, grads, *p) {
                        for r in 0..rows {
                            let src = &g[r * width + off..r * width + off + pc];
                            axpy(&mut dp[r * pc..(r + 1) * pc], src, F::one());
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let width = node.value.cols();
                let cols = nodes[x.0].value.cols();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (r, gr) in g.chunks_exact(width).enumerate() {
                        axpy(&mut dx[r * cols + start..r * cols + start + width], gr, F::one());
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let cols = node.value.cols();
                if let Some(ds) = slot(nodes, grads, *src) {
                    for (gr, &i) in g.chunks_exact(cols).zip(idx) {
                        axpy(&mut ds[i * cols..(i + 1) * cols], gr, F::one());
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    axpy(dx, g, F::one());
                }
            }
            Op::DecayScan { s, logit, len } => {
                let d = node.value.cols();
                let c = node.value.data();
                let lv = val(*logit);
                let gamma = expand_gamma(lv, d);
                let rows = node.value.rows();
                let mut dgamma = vec![F::zero(); d];
                let mut ds_buf = vec![F::zero(); rows * d];
                let mut carry = vec![F::zero(); d];
                for seq in 0..rows / len {
                    carry.iter_mut().for_each(|v| *v = F::zero());
                    for t in (0..*len).rev() {
                        let r = seq * len + t;
                        for j in 0..d {
                            carry[j] = g[r * d + j] + gamma[j] * carry[j];
                            ds_buf[r * d + j] = carry[j];
                            if t > 0 {
                                dgamma[j] += carry[j] * c[(r - 1) * d + j];
                            }
                        }
                    }
                }
                if let Some(dsv) = slot(nodes, grads, *s) {
                    axpy(dsv, &ds_buf, F::one());
                }
                if let Some(dl) = slot(nodes, grads, *logit) {
                    if dl.len() == 1 {
                        let gm = gamma[0];
                        dl[0] += dgamma.iter().copied().sum::<F>() * gm * (F::one() - gm);
                    } else {
                        for j in 0..d {
                            dl[j] += dgamma[j] * gamma[j] * (F::one() - gamma[j]);
                        }
                    }
                }
            }
            Op::PointwiseAttn { q, k, v, spec } => {
                let d = node.value.cols();
                let need = [q, k, v].map(|x| nodes[x.0].needs_grad);
                let mut dq = vec![F::zero(); if need[0] { g.len() } else { 0 }];
                let mut dk = vec![F::zero(); if need[1] { g.len() } else { 0 }];
                let mut dv = vec![F::zero(); if need[2] { g.len() } else { 0 }];
                attn_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    g,
                    d,
                    spec,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (x, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(dx) = slot(nodes, grads, *x) {
                        axpy(dx, &buf, F::one());
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::MaskedMeanPool { x, tokens, weights } => {
                let d = node.value.cols();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == F::zero() {
                            continue;
                        }
                        let b = r / tokens;
                        for j in 0..d {
                            dx[r * d + j] += w * g[b * d + j];
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let d = nodes[a.0].value.cols();
                if let Some(da) = slot(nodes, grads, *a) {
                    for (r, &gv) in g.iter().enumerate() {
                        axpy(&mut da[r * d..(r + 1) * d], &val(*b)[r * d..(r + 1) * d], gv);
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for (r, &gv) in g.iter().enumerate() {
                        axpy(&mut db[r * d..(r + 1) * d], &val(*a)[r * d..(r + 1) * d], gv);
                    }
                }
            }
            Op::InfoNce {
                z,
                v,
                layout,
                inv_tau,
                valid,
                probs,
                count,
            } => {
                let d = nodes[z.0].value.cols();
                let (bsz, t_len) = (layout.seqs, layout.len);
                let scale = g[0] / F::lit(*count as f64);
                let (zv, vv) = (val(*z), val(*v));
                let mut dz = vec![F::zero(); zv.len()];
                let mut dv = vec![F::zero(); vv.len()];
                for t in 0..t_len {
                    for b in 0..bsz {
                        if !valid[b * t_len + t] {
                            continue;
                        }
                        let base = (t * bsz + b) * bsz;
                        let zr = (b * t_len + t) * d;
                        for c in 0..bsz {
                            let delta = if c == b { F::one() } else { F::zero() };
                            let dl = (probs[base + c] - delta) * scale * *inv_tau;
                            if dl == F::zero() {
                                continue;
                            }
                            let vr = (c * t_len + t) * d;
                            for j in 0..d {
                                dz[zr + j] += dl * vv[vr + j];
                                dv[vr + j] += dl * zv[zr + j];
                            }
                        }
                    }
                }
                if let Some(dzs) = slot(nodes, grads, *z) {
                    axpy(dzs, &dz, F::one());
                }
                if let Some(dvs) = slot(nodes, grads, *v) {
                    axpy(dvs, &dv, F::one());
                }
            }
            Op::Bce { logits, labels } => {
                let n = F::lit(labels.len() as f64);
                if let Some(dx) = slot(nodes, grads, *logits) {
                    for ((d, &x), &y) in dx.iter_mut().zip(val(*logits)).zip(labels) {
                        *d += g[0] * (sigmoid_scalar(x) - y) / n;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let c = g[0] / F::lit(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += c);
                }
            }
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` does not
/// need a gradient.
fn slot<'g, F: Scalar>(
    nodes: &[Node<F>],
    grads: &'g mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'g mut Vec<F>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

#[inline]
fn axpy<F: Scalar>(dst: &mut [F], src: &[F], a: F) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn expand_gamma<F: Scalar>(logit: &[F], d: usize) -> Vec<F> {
    if logit.len() == 1 {
        vec![sigmoid_scalar(logit[0]); d]
    } else {
        logit.iter().map(|&l| sigmoid_scalar(l)).collect()
    }
}

pub(crate) fn scan_forward<F: Scalar>(s: &[F], gamma: &[F], layout: SeqLayout, out: &mut [F]) {
    let d = gamma.len();
    for seq in 0..layout.seqs {
        let base = seq * layout.len * d;
        out[base..base + d].copy_from_slice(&s[base..base + d]);
        for t in 1..layout.len {
            let r = base + t * d;
            for j in 0..d {
                out[r + j] = gamma[j] * out[r - d + j] + s[r + j];
            }
        }
    }
}

/// Scaled `z . v` similarities as `[T, B, B]` with entry `(t, b, c)`.
pub(crate) fn similarity_logits<F: Scalar>(
    z: &[F],
    v: &[F],
    d: usize,
    layout: SeqLayout,
    inv_tau: F,
) -> Vec<F> {
    let (bsz, t_len) = (layout.seqs, layout.len);
    let mut out = vec![F::zero(); t_len * bsz * bsz];
    for t in 0..t_len {
        for b in 0..bsz {
            let zr = &z[(b * t_len + t) * d..(b * t_len + t + 1) * d];
            for c in 0..bsz {
                let vr = &v[(c * t_len + t) * d..(c * t_len + t + 1) * d];
                let dot: F = zr.iter().zip(vr).map(|(&a, &b)| a * b).sum();
                out[(t * bsz + b) * bsz + c] = dot * inv_tau;
            }
        }
    }
    out
}

/// Returns `(logsumexp(row), softmax(row))`.
pub(crate) fn log_softmax_probs<F: Scalar>(row: &[F]) -> (F, Vec<F>) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = row.iter().map(|&x| (x - m).exp()).collect();
    let s: F = exps.iter().copied().sum();
    let lse = m + s.ln();
    (lse, exps.into_iter().map(|e| e / s).collect())
}

/// Strided GEMM on sub-blocks of row-major buffers.
///
/// `a` is `m x k` starting at `a[ao]` with row stride `ars` (and column
/// stride 1, or swapped when `ta`); likewise for `b`. Output rows of `c`
/// start at `c[co]` with row stride `crs`.
#[allow(clippy::too_many_arguments)]
fn sub_gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    ao: usize,
    ars: usize,
    ta: bool,
    b: &[F],
    bo: usize,
    brs: usize,
    tb: bool,
    c: &mut [F],
    co: usize,
    crs: usize,
) {
    let (rsa, csa) = if ta { (1, ars as isize) } else { (ars as isize, 1) };
    let (rsb, csb) = if tb { (1, brs as isize) } else { (brs as isize, 1) };
    let a_extent = if ta { (k - 1) * ars + m } else { (m - 1) * ars + k };
    let b_extent = if tb { (n - 1) * brs + k } else { (k - 1) * brs + n };
    assert!(ao + a_extent <= a.len() && bo + b_extent <= b.len());
    assert!(co + (m - 1) * crs + n <= c.len());
    // SAFETY: extents asserted above; `c` is uniquely borrowed.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(ao),
            rsa,
            csa,
            b.as_ptr().add(bo),
            rsb,
            csb,
            F::one(),
            c.as_mut_ptr().add(co),
            crs as isize,
            1,
        );
    }
}

/// Raw logits `<q_t, k_tau>` for one (sequence, head) block, `L x L`.
fn head_logits<F: Scalar>(q: &[F], k: &[F], d: usize, base: usize, hoff: usize, hd: usize, len: usize) -> Vec<F> {
    let mut logits = vec![F::zero(); len * len];
    sub_gemm(
        len,
        hd,
        len,
        F::one(),
        q,
        base + hoff,
        d,
        false,
        k,
        base + hoff,
        d,
        true,
        &mut logits,
        0,
        len,
    );
    logits
}

/// Sequences at most this long use direct loops instead of GEMM.
const SMALL_ATTN: usize = 16;

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn attn_forward_small<F: Scalar>(q: &[F], k: &[F], v: &[F], d: usize, spec: &AttnSpec<F>, out: &mut [F]) {
    let len = spec.layout.len;
    let hd = d / spec.heads;
    for seq in 0..spec.layout.seqs {
        for t in 0..len {
            let rt = (seq * len + t) * d;
            let end = if spec.causal { t + 1 } else { len };
            for tau in 0..end {
                let rs = (seq * len + tau) * d;
                for h in 0..spec.heads {
                    let o = h * hd;
                    let a = spec.logit_scale * dot(&q[rt + o..rt + o + hd], &k[rs + o..rs + o + hd]);
                    let w = spec.out_scale * silu_scalar(a);
                    for j in o..o + hd {
                        out[rt + j] += w * v[rs + j];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attn_backward_small<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    g: &[F],
    d: usize,
    spec: &AttnSpec<F>,
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
) {
    let len = spec.layout.len;
    let hd = d / spec.heads;
    for seq in 0..spec.layout.seqs {
        for t in 0..len {
            let rt = (seq * len + t) * d;
            let end = if spec.causal { t + 1 } else { len };
            for tau in 0..end {
                let rs = (seq * len + tau) * d;
                for h in 0..spec.heads {
                    let o = h * hd;
                    let a = spec.logit_scale * dot(&q[rt + o..rt + o + hd], &k[rs + o..rs + o + hd]);
                    let sig = sigmoid_scalar(a);
                    if !dv.is_empty() {
                        let w = spec.out_scale * a * sig;
                        for j in o..o + hd {
                            dv[rs + j] += w * g[rt + j];
                        }
                    }
                    let gv = dot(&g[rt + o..rt + o + hd], &v[rs + o..rs + o + hd]);
                    let dsilu = sig * (F::one() + a * (F::one() - sig));
                    let da = spec.out_scale * gv * dsilu * spec.logit_scale;
                    if !dq.is_empty() {
                        for j in o..o + hd {
                            dq[rt + j] += da * k[rs + j];
                        }
                    }
                    if !dk.is_empty() {
                        for j in o..o + hd {
                            dk[rs + j] += da * q[rt + j];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn attn_forward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    d: usize,
    spec: &AttnSpec<F>,
    out: &mut [F],
) {
    let len = spec.layout.len;
    if len <= SMALL_ATTN {
        return attn_forward_small(q, k, v, d, spec, out);
    }
    let hd = d / spec.heads;
    for seq in 0..spec.layout.seqs {
        let base = seq * len * d;
        for h in 0..spec.heads {
            let hoff = h * hd;
            let mut w = head_logits(q, k, d, base, hoff, hd, len);
            for t in 0..len {
                for tau in 0..len {
                    let i = t * len + tau;
                    w[i] = if spec.causal && tau > t {
                        F::zero()
                    } else {
                        silu_scalar(spec.logit_scale * w[i])
                    };
                }
            }
            sub_gemm(
                len,
                len,
                hd,
                spec.out_scale,
                &w,
                0,
                len,
                false,
                v,
                base + hoff,
                d,
                false,
                out,
                base + hoff,
                d,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attn_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    g: &[F],
    d: usize,
    spec: &AttnSpec<F>,
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
) {
    let len = spec.layout.len;
    if len <= SMALL_ATTN {
        return attn_backward_small(q, k, v, g, d, spec, dq, dk, dv);
    }
    let hd = d / spec.heads;
    for seq in 0..spec.layout.seqs {
        let base = seq * len * d;
        for h in 0..spec.heads {
            let hoff = h * hd;
            let logits = head_logits(q, k, d, base, hoff, hd, len);
            let mut w = vec![F::zero(); len * len];
            for t in 0..len {
                for tau in 0..len {
                    let i = t * len + tau;
                    if !(spec.causal && tau > t) {
                        w[i] = silu_scalar(spec.logit_scale * logits[i]);
                    }
                }
            }
            if !dv.is_empty() {
                // dV = out_scale * W^T G
                sub_gemm(
                    len,
                    len,
                    hd,
                    spec.out_scale,
                    &w,
                    0,
                    len,
                    true,
                    g,
                    base + hoff,
                    d,
                    false,
                    dv,
                    base + hoff,
                    d,
                );
            }
            if dq.is_empty() && dk.is_empty() {
                continue;
            }
            // dW = out_scale * G V^T, then through the SiLU.
            let mut dw = vec![F::zero(); len * len];
            sub_gemm(
                len,
                hd,
                len,
                spec.out_scale,
                g,
                base + hoff,
                d,
                false,
                v,
                base + hoff,
                d,
                true,
                &mut dw,
                0,
                len,
            );
            for t in 0..len {
                for tau in 0..len {
                    let i = t * len + tau;
                    dw[i] = if spec.causal && tau > t {
                        F::zero()
                    } else {
                        dw[i] * silu_grad_scalar(spec.logit_scale * logits[i]) * spec.logit_scale
                    };
                }
            }
            if !dq.is_empty() {
                sub_gemm(
                    len,
                    len,
                    hd,
                    F::one(),
                    &dw,
                    0,
                    len,
                    false,
                    k,
                    base + hoff,
                    d,
                    false,
                    dq,
                    base + hoff,
                    d,
                );
            }
            if !dk.is_empty() {
                sub_gemm(
                    len,
                    len,
                    hd,
                    F::one(),
                    &dw,
                    0,
                    len,
                    true,
                    q,
                    base + hoff,
                    d,
                    false,
                    dk,
                    base + hoff,
                    d,
                );
            }
        }
    }
}
