//! Linear HSTU encoder, a quadratic pointwise-attention reference, and
//! constant-cost streaming inference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::normal;
use crate::numerics::ops::{rmsnorm_rows, silu_scalar, vecmat, NORM_EPS};
use crate::numerics::{
    expand_gamma, scan_forward, AttnSpec, ParamId, ParamStore, Scalar, SeqLayout, Tape, Tensor,
    Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Linear,
    QuadraticReference,
}

/// Parameters of one layer. `decay` holds the logit `g` of `gamma =
/// sigmoid(g)`: one value, or one per channel.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_gain: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wu: ParamId,
    pub decay: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub kind: EncoderKind,
    pub hidden: usize,
    pub dropout: f64,
    pub max_len: usize,
}

/// Options for building an [`Encoder`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderSpec {
    pub num_layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub kind: EncoderKind,
    pub max_len: usize,
    pub per_channel_decay: bool,
    pub decay_init: f64,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        spec: EncoderSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let d = spec.hidden;
        if d == 0 {
            return Err(Error::invalid("encoder hidden width must be positive"));
        }
        if !(spec.decay_init > 0.0 && spec.decay_init < 1.0) {
            return Err(Error::invalid(format!(
                "decay_init {} not in (0, 1)",
                spec.decay_init
            )));
        }
        let g0 = (spec.decay_init / (1.0 - spec.decay_init)).ln() as f32;
        let std = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(spec.num_layers);
        for i in 0..spec.num_layers {
            let p = format!("encoder.{i}");
            let decay_len = if spec.per_channel_decay { d } else { 1 };
            layers.push(EncoderLayer {
                norm_gain: store.add(format!("{p}.norm"), Tensor::full(vec![d], 1.0))?,
                wq: store.add(format!("{p}.wq"), normal(rng, &[d, d], std))?,
                wk: store.add(format!("{p}.wk"), normal(rng, &[d, d], std))?,
                wv: store.add(format!("{p}.wv"), normal(rng, &[d, d], std))?,
                wu: store.add(format!("{p}.wu"), normal(rng, &[d, d], std))?,
                decay: store.add(format!("{p}.decay"), Tensor::full(vec![decay_len], g0))?,
            });
        }
        Ok(Encoder {
            layers,
            kind: spec.kind,
            hidden: d,
            dropout: spec.dropout,
            max_len: spec.max_len,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// One layer: `H + Dropout(O)`. Dropout is applied only when `rng` is
    /// given.
    pub fn layer_forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        index: usize,
        h: Var,
        layout: SeqLayout,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let d = self.hidden;
        self.layer_inner(tape, index, h, layout, rng)
            .map_err(|e| locate(e, index, d, layout.len))
    }

    fn layer_inner<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        index: usize,
        h: Var,
        layout: SeqLayout,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let layer = &self.layers[index];
        let gain = tape.param(layer.norm_gain);
        let xn = tape.rmsnorm(h, Some(gain), F::lit(NORM_EPS))?;
        let proj = |w: ParamId, tape: &mut Tape<'_, F>| -> Result<Var> {
            let w = tape.param(w);
            let y = tape.matmul(xn, w)?;
            tape.silu(y)
        };
        let q = proj(layer.wq, tape)?;
        let k = proj(layer.wk, tape)?;
        let v = proj(layer.wv, tape)?;
        let u = proj(layer.wu, tape)?;
        let o = match self.kind {
            EncoderKind::Linear => {
                let s = tape.mul(k, v)?;
                let g = tape.param(layer.decay);
                let c = tape.decay_scan(s, g, layout)?;
                let qc = tape.mul(q, c)?;
                tape.mul(qc, u)?
            }
            EncoderKind::QuadraticReference => {
                let spec = AttnSpec {
                    layout,
                    heads: 1,
                    causal: true,
                    logit_scale: F::one() / F::lit(self.hidden as f64),
                    out_scale: F::one(),
                };
                let a = tape.pointwise_attention(q, k, v, spec)?;
                let an = tape.rmsnorm(a, None, F::lit(NORM_EPS))?;
                tape.mul(u, an)?
            }
        };
        let o = match rng {
            Some(rng) if self.dropout > 0.0 => tape.dropout(o, self.dropout, rng)?,
            _ => o,
        };
        tape.add(h, o)
    }

    /// All layers in sequence; returns every position of the last layer.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        h0: Var,
        layout: SeqLayout,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if layout.len > self.max_len {
            return Err(Error::OutOfRange {
                what: "sequence length (max_len)",
                index: layout.len,
                size: self.max_len,
            });
        }
        let mut h = h0;
        for i in 0..self.layers.len() {
            h = self.layer_forward(tape, i, h, layout, rng.as_deref_mut())?;
        }
        Ok(h)
    }

    /// Decay factor of each layer, expanded to one value per channel.
    pub fn gammas<F: Scalar>(&self, store: &ParamStore<F>) -> Vec<Vec<F>> {
        self.layers
            .iter()
            .map(|l| expand_gamma(store.get(l.decay).data(), self.hidden))
            .collect()
    }

    pub fn stream_state<F: Scalar>(&self) -> StreamState<F> {
        StreamState::new(self.layers.len(), self.hidden)
    }

    /// Consumes one token through every layer in O(1) time and memory with
    /// respect to the position. Linear encoder only; no dropout.
    pub fn stream_step<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        state: &mut StreamState<F>,
        h0: &[F],
    ) -> Result<Vec<F>> {
        if self.kind != EncoderKind::Linear {
            return Err(Error::invalid("streaming needs the linear encoder"));
        }
        let d = self.hidden;
        if h0.len() != d || state.c.len() != self.layers.len() {
            return Err(Error::shape("stream_step", &[h0.len()], &[d]));
        }
        if state.position >= self.max_len {
            return Err(Error::OutOfRange {
                what: "stream position (max_len)",
                index: state.position,
                size: self.max_len,
            });
        }
        let mut h = h0.to_vec();
        let mut xn = vec![F::zero(); d];
        let mut inv = [F::zero()];
        let mut bufs = [vec![F::zero(); d], vec![F::zero(); d], vec![F::zero(); d], vec![F::zero(); d]];
        for (i, layer) in self.layers.iter().enumerate() {
            rmsnorm_rows(&h, d, Some(store.get(layer.norm_gain).data()), F::lit(NORM_EPS), &mut xn, &mut inv);
            for (buf, w) in bufs.iter_mut().zip([layer.wq, layer.wk, layer.wv, layer.wu]) {
                vecmat(&xn, store.get(w).data(), d, buf);
                buf.iter_mut().for_each(|v| *v = silu_scalar(*v));
            }
            let gamma = expand_gamma(store.get(layer.decay).data(), d);
            let [q, k, v, u] = &bufs;
            let c = &mut state.c[i];
            for j in 0..d {
                c[j] = gamma[j] * c[j] + k[j] * v[j];
                h[j] += q[j] * c[j] * u[j];
            }
            if let Some(j) = h.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("encoder layer {i} stream_step (position {})", state.position),
                    index: j,
                });
            }
        }
        state.position += 1;
        Ok(h)
    }
}

/// Rewrites a non-finite error from inside a layer to name the layer,
/// sequence and position.
fn locate(e: Error, layer: usize, d: usize, len: usize) -> Error {
    match e {
        Error::NonFinite { op, index } => {
            let row = index / d.max(1);
            Error::NonFinite {
                op: format!(
                    "encoder layer {layer} {op} (sequence {}, position {})",
                    row / len.max(1),
                    row % len.max(1)
                ),
                index,
            }
        }
        other => other,
    }
}

/// Per-layer accumulated state `C_t` of the linear encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState<F = f32> {
    pub c: Vec<Vec<F>>,
    /// Index of the next token.
    pub position: usize,
}

impl<F: Scalar> StreamState<F> {
    pub fn new(layers: usize, hidden: usize) -> Self {
        StreamState {
            c: vec![vec![F::zero(); hidden]; layers],
            position: 0,
        }
    }

    /// Bytes held by the accumulators; independent of the position.
    pub fn state_bytes(&self) -> usize {
        self.c.iter().map(|c| c.len() * std::mem::size_of::<F>()).sum()
    }
}

/// `C_t = sum_{tau <= t} gamma^(t - tau) S_tau`, evaluated directly in
/// O(L^2). Reference for the recursive scan.
pub fn recurrence_direct<F: Scalar>(s: &Tensor<F>, gamma: F) -> Tensor<F> {
    let (l, d) = (s.rows(), s.cols());
    let mut out = Tensor::zeros(vec![l, d]);
    for t in 0..l {
        for tau in 0..=t {
            let w = gamma.powi((t - tau) as i32);
            for j in 0..d {
                out.data_mut()[t * d + j] += w * s.data()[tau * d + j];
            }
        }
    }
    out
}

/// Recursive form `C_t = gamma C_{t-1} + S_t` over a single `[L, d]`
/// sequence.
pub fn recurrence_scan<F: Scalar>(s: &Tensor<F>, gamma: F) -> Tensor<F> {
    let (l, d) = (s.rows(), s.cols());
    let mut out = Tensor::zeros(vec![l, d]);
    scan_forward(
        s.data(),
        &vec![gamma; d],
        SeqLayout { seqs: 1, len: l },
        out.data_mut(),
    );
    out
}
