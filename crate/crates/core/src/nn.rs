//! Small parameterized building blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `x W (+ b)` with `W ~ N(0, 1/in)` and zero bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (input.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), normal(rng, &[input, output], std))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(vec![output]))?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        dims: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp2 {
            l1: Linear::new(store, &format!("{name}.l1"), dims[0], dims[1], true, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), dims[1], dims[2], true, rng)?,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, h)
    }
}

/// Converts stored `f32` values into the tape precision.
pub(crate) fn lift<F: Scalar>(shape: Vec<usize>, data: &[f32]) -> Result<Tensor<F>> {
    Tensor::new(shape, data.iter().map(|&v| F::lit(v as f64)).collect())
}
