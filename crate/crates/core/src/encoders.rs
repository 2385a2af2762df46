//! Small feature encoders producing the EHR and CXR node embeddings.
//!
//! Both are one-hidden-layer tanh MLPs. The EHR encoder first summarizes the
//! series into per-feature observed means plus observation rates, so any
//! series length works. Swapping in a stronger encoder only requires
//! producing a `B × d` matrix on the tape.

use rand::Rng;

use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::harness::records::{CxrInput, EhrInput};

/// `tanh(x·w1 + b1)·w2 + b2`
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform(rng: &mut impl Rng, fan_in: usize, shape: Vec<usize>) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl Mlp<Tensor> {
    pub fn init(rng: &mut impl Rng, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: init_uniform(rng, input, vec![input, hidden]),
            b1: Tensor::zeros(vec![hidden]),
            w2: init_uniform(rng, hidden, vec![hidden, output]),
            b2: Tensor::zeros(vec![output]),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Tensor::zeros(vec![input, hidden]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![hidden, output]),
            b2: Tensor::zeros(vec![output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[1]
    }
}

impl<T> Mlp<T> {
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> Mlp<U> {
        Mlp {
            w1: f("w1", &self.w1),
            b1: f("b1", &self.b1),
            w2: f("w2", &self.w2),
            b2: f("b2", &self.b2),
        }
    }
}

pub fn mlp_forward(tape: &mut Tape, x: Var, mlp: &Mlp<Var>) -> Result<Var> {
    let h = tape.matmul(x, mlp.w1)?;
    let h = tape.add_row(h, mlp.b1)?;
    let h = tape.tanh(h);
    let o = tape.matmul(h, mlp.w2)?;
    tape.add_row(o, mlp.b2)
}

/// `[observed mean per feature ‖ observation rate per feature]`, length `2J`.
pub fn ehr_summary(input: &EhrInput, features: usize) -> Result<Vec<f64>> {
    if input.features() != features {
        return Err(Error::Shape {
            op: "encode_ehr",
            left: vec![input.time_steps(), input.features()],
            right: vec![features],
        });
    }
    input.validate()?;
    let t = input.time_steps() as f64;
    let mut sums = vec![0.0; features];
    let mut seen = vec![0.0; features];
    for (row, mrow) in input.values.iter().zip(&input.mask) {
        for j in 0..features {
            sums[j] += row[j] * mrow[j];
            seen[j] += mrow[j];
        }
    }
    let mut out: Vec<f64> = sums
        .iter()
        .zip(&seen)
        .map(|(s, n)| if *n > 0.0 { s / n } else { 0.0 })
        .collect();
    out.extend(seen.iter().map(|n| n / t));
    Ok(out)
}

/// Encodes a batch of EHR series into a `B × d` matrix.
pub fn encode_ehr(tape: &mut Tape, inputs: &[&EhrInput], mlp: &Mlp<Var>) -> Result<Var> {
    let w1 = tape.value(mlp.w1).shape().to_vec();
    if w1[0] % 2 != 0 {
        return Err(Error::InvalidArgument("EHR encoder input width must be 2J".into()));
    }
    let features = w1[0] / 2;
    let rows = inputs
        .iter()
        .map(|e| ehr_summary(e, features))
        .collect::<Result<Vec<_>>>()?;
    let x = tape.constant(Tensor::from_rows(&rows)?);
    mlp_forward(tape, x, mlp)
}

/// Encodes CXR surrogate vectors into a `K × d` matrix.
pub fn encode_cxr(tape: &mut Tape, inputs: &[&CxrInput], mlp: &Mlp<Var>) -> Result<Var> {
    let features = tape.value(mlp.w1).shape()[0];
    if let Some(bad) = inputs.iter().find(|c| c.features.len() != features) {
        return Err(Error::Shape {
            op: "encode_cxr",
            left: vec![bad.features.len()],
            right: vec![features],
        });
    }
    let rows: Vec<Vec<f64>> = inputs.iter().map(|c| c.features.clone()).collect();
    let x = tape.constant(Tensor::from_rows(&rows)?);
    mlp_forward(tape, x, mlp)
}
