//! Disease correlation-guided attention fusion.
//!
//! For each disease, the disease prototype queries the patient's three
//! source features (own EHR, similar-patient message, CXR message) with
//! scaled dot-product attention. Absent sources are masked out.

use rand::Rng;

use crate::diffmath::{Tape, Tensor, Var};
use crate::encoders::init_uniform;
use crate::error::{Error, Result};

pub const SOURCES: usize = 3;
pub const MASKED: f64 = f64::NEG_INFINITY;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
}

impl FusionParams<Tensor> {
    pub fn init(rng: &mut impl Rng, dim: usize) -> Self {
        Self {
            wq: init_uniform(rng, dim, vec![dim, dim]),
            wk: init_uniform(rng, dim, vec![dim, dim]),
            wv: init_uniform(rng, dim, vec![dim, dim]),
        }
    }
}

impl<T> FusionParams<T> {
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> FusionParams<U> {
        FusionParams {
            wq: f("wq", &self.wq),
            wk: f("wk", &self.wk),
            wv: f("wv", &self.wv),
        }
    }
}

/// Additive `{0, -inf}` mask over `[own EHR, similar patients, CXR]`.
pub fn source_mask(has_neighbors: bool, has_cxr: bool) -> [f64; SOURCES] {
    [
        0.0,
        if has_neighbors { 0.0 } else { MASKED },
        if has_cxr { 0.0 } else { MASKED },
    ]
}

/// `3 × d` source features plus their mask.
#[derive(Clone, Copy, Debug)]
pub struct SourceStack {
    pub features: Var,
    pub mask: [f64; SOURCES],
}

pub fn stack_features(
    tape: &mut Tape,
    h_ehr: Var,
    m_ehr: Var,
    m_cxr: Var,
    has_neighbors: bool,
    has_cxr: bool,
) -> Result<SourceStack> {
    let d = tape.value(h_ehr).numel();
    for v in [m_ehr, m_cxr] {
        if tape.value(v).numel() != d {
            return Err(Error::Shape {
                op: "stack_features",
                left: vec![d],
                right: tape.value(v).shape().to_vec(),
            });
        }
    }
    Ok(SourceStack {
        features: tape.stack_rows(&[h_ehr, m_ehr, m_cxr])?,
        mask: source_mask(has_neighbors, has_cxr),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// Length `d`.
    pub output: Var,
    /// Length 3, zero at masked sources.
    pub alpha: Var,
}

/// Attends over one patient's sources with a single query vector.
pub fn cga_attend(
    tape: &mut Tape,
    stack: &SourceStack,
    query: Var,
    params: &FusionParams<Var>,
) -> Result<Attended> {
    let d = tape.value(stack.features).cols();
    if tape.value(query).numel() != d {
        return Err(Error::Shape {
            op: "cga_attend",
            left: vec![d],
            right: tape.value(query).shape().to_vec(),
        });
    }
    let qrow = tape.as_row(query)?;
    let q = tape.matmul(qrow, params.wq)?;
    let keys = tape.matmul(stack.features, params.wk)?;
    let values = tape.matmul(stack.features, params.wv)?;
    let q_col = tape.transpose(q)?;
    let scores = tape.matmul(keys, q_col)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let scores = tape.reshape(scores, vec![SOURCES])?;
    let alpha = tape.masked_softmax(scores, &stack.mask)?;
    let arow = tape.as_row(alpha)?;
    let out = tape.matmul(arow, values)?;
    let output = tape.reshape(out, vec![d])?;
    Ok(Attended { output, alpha })
}

/// One fused representation per disease: rows of the `N × d` result, with
/// the `N × 3` attention map alongside.
pub fn fuse_all_diseases(
    tape: &mut Tape,
    stack: &SourceStack,
    prototypes: Var,
    params: &FusionParams<Var>,
) -> Result<(Var, Var)> {
    let d = tape.value(stack.features).cols();
    let n = tape.value(prototypes).rows();
    if tape.value(prototypes).cols() != d {
        return Err(Error::Shape {
            op: "fuse_all_diseases",
            left: vec![n, d],
            right: tape.value(prototypes).shape().to_vec(),
        });
    }
    let q = tape.matmul(prototypes, params.wq)?;
    let keys = tape.matmul(stack.features, params.wk)?;
    let values = tape.matmul(stack.features, params.wv)?;
    let keys_t = tape.transpose(keys)?;
    let scores = tape.matmul(q, keys_t)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let masked: Vec<bool> = (0..n)
        .flat_map(|_| stack.mask.iter().map(|m| *m == MASKED))
        .collect();
    if !masked.is_empty() && masked[..SOURCES].iter().all(|&m| m) {
        return Err(Error::InvalidMask("every source is masked".into()));
    }
    let alpha = tape.segment_softmax(scores, &masked, SOURCES)?;
    let fused = tape.matmul(alpha, values)?;
    Ok((fused, alpha))
}
