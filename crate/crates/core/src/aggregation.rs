//! Type-specific neighbor aggregation into a patient's EHR node.
//!
//! Similar patients are aggregated with multi-head additive graph attention;
//! a patient's own CXRs are combined with softmax weights over their
//! normalized acquisition times.

use rand::Rng;

use crate::diffmath::{Tape, Tensor, Var};
use crate::encoders::init_uniform;
use crate::error::{Error, Result};
use crate::pgraph::PGraph;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead<T> {
    /// `d × d/H`
    pub proj: T,
    /// Length `2·d/H`: first half scores the target, second half the neighbor.
    pub attn: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggParams<T> {
    pub heads: Vec<AttentionHead<T>>,
    /// `d × d`
    pub cxr_proj: T,
}

impl AggParams<Tensor> {
    pub fn init(rng: &mut impl Rng, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{heads} heads do not divide embedding width {dim}"
            )));
        }
        let width = dim / heads;
        let heads = (0..heads)
            .map(|_| AttentionHead {
                proj: init_uniform(rng, dim, vec![dim, width]),
                attn: init_uniform(rng, 2 * width, vec![2 * width]),
            })
            .collect();
        Ok(Self {
            heads,
            cxr_proj: init_uniform(rng, dim, vec![dim, dim]),
        })
    }
}

impl<T> AggParams<T> {
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> AggParams<U> {
        AggParams {
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(i, h)| AttentionHead {
                    proj: f(&format!("head{i}.proj"), &h.proj),
                    attn: f(&format!("head{i}.attn"), &h.attn),
                })
                .collect(),
            cxr_proj: f("cxr_proj", &self.cxr_proj),
        }
    }
}

/// Message from similar patients, or `None` when there are none.
#[derive(Clone, Copy, Debug)]
pub struct EhrMessage {
    pub message: Var,
    pub has_neighbors: bool,
}

/// Aggregates the embeddings of one target's similar patients.
///
/// `target` and each neighbor are length-`d` vectors. With no neighbors the
/// message is the zero vector and `has_neighbors` is false.
pub fn aggregate_ehr_ehr(
    tape: &mut Tape,
    target: Var,
    neighbors: &[Var],
    params: &AggParams<Var>,
    slope: f64,
) -> Result<EhrMessage> {
    let dim = tape.value(target).numel();
    if neighbors.is_empty() {
        let zero = tape.constant(Tensor::vector(vec![0.0; dim]));
        return Ok(EhrMessage {
            message: zero,
            has_neighbors: false,
        });
    }
    let target_row = tape.as_row(target)?;
    let neighbor_rows = tape.stack_rows(neighbors)?;
    let mut head_outputs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let own = tape.matmul(target_row, head.proj)?;
        let own = tape.reshape(own, vec![tape.value(head.proj).cols()])?;
        let projected = tape.matmul(neighbor_rows, head.proj)?;
        let mut scores = Vec::with_capacity(neighbors.len());
        for k in 0..neighbors.len() {
            let other = tape.row(projected, k)?;
            let pair = tape.concat(&[own, other])?;
            let e = tape.dot(head.attn, pair)?;
            scores.push(tape.leaky_relu(e, slope)?);
        }
        let scores = tape.concat(&scores)?;
        let alpha = tape.masked_softmax(scores, &vec![0.0; neighbors.len()])?;
        let alpha = tape.as_row(alpha)?;
        let out = tape.matmul(alpha, projected)?;
        head_outputs.push(out);
    }
    let joined = tape.concat_cols(&head_outputs)?;
    let message = tape.reshape(joined, vec![dim])?;
    Ok(EhrMessage {
        message,
        has_neighbors: true,
    })
}

/// Batched form of [`aggregate_ehr_ehr`] over every target in a graph.
///
/// `embeddings` is `B × d`; the result is `B × d` with zero rows for
/// patients without neighbors.
pub fn aggregate_ehr_ehr_batch(
    tape: &mut Tape,
    embeddings: Var,
    graph: &PGraph,
    params: &AggParams<Var>,
    slope: f64,
) -> Result<Var> {
    let b = graph.len();
    if tape.value(embeddings).rows() != b {
        return Err(Error::Shape {
            op: "aggregate_ehr_ehr",
            left: tape.value(embeddings).shape().to_vec(),
            right: vec![b],
        });
    }
    let mut masked = vec![true; b * b];
    for s in 0..b {
        for &t in graph.neighbors(s) {
            masked[s * b + t] = false;
        }
    }
    let ones = tape.constant(Tensor::matrix(b, 1, vec![1.0; b])?);
    let ones_t = tape.constant(Tensor::matrix(1, b, vec![1.0; b])?);

    let mut head_outputs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let width = tape.value(head.proj).cols();
        let projected = tape.matmul(embeddings, head.proj)?;
        let attn = tape.reshape(head.attn, vec![2, width])?;
        let attn = tape.transpose(attn)?;
        // Column 0 scores the target side, column 1 the neighbor side.
        let parts = tape.matmul(projected, attn)?;
        let sel_own = tape.constant(Tensor::matrix(2, 1, vec![1.0, 0.0])?);
        let sel_nb = tape.constant(Tensor::matrix(2, 1, vec![0.0, 1.0])?);
        let own = tape.matmul(parts, sel_own)?;
        let nb = tape.matmul(parts, sel_nb)?;
        let own = tape.matmul(own, ones_t)?;
        let nb = tape.transpose(nb)?;
        let nb = tape.matmul(ones, nb)?;
        let scores = tape.add(own, nb)?;
        let scores = tape.leaky_relu(scores, slope)?;
        let alpha = tape.segment_softmax(scores, &masked, b)?;
        head_outputs.push(tape.matmul(alpha, projected)?);
    }
    tape.concat_cols(&head_outputs)
}

/// Softmax of the normalized acquisition times.
pub fn temporal_weights(delta_ts: &[f64]) -> Result<Vec<f64>> {
    let Some(max) = delta_ts.iter().copied().reduce(f64::max) else {
        return Err(Error::InvalidArgument("temporal weights need at least one CXR".into()));
    };
    let exps: Vec<f64> = delta_ts.iter().map(|t| (t - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Time-weighted sum of projected CXR embeddings for one patient.
pub fn aggregate_cxr(
    tape: &mut Tape,
    cxr_embeddings: &[Var],
    weights: &[f64],
    params: &AggParams<Var>,
) -> Result<Var> {
    if cxr_embeddings.is_empty() || cxr_embeddings.len() != weights.len() {
        return Err(Error::Shape {
            op: "aggregate_cxr",
            left: vec![cxr_embeddings.len()],
            right: vec![weights.len()],
        });
    }
    let stacked = tape.stack_rows(cxr_embeddings)?;
    let w = tape.constant(Tensor::matrix(1, weights.len(), weights.to_vec())?);
    let pooled = tape.matmul(w, stacked)?;
    let out = tape.matmul(pooled, params.cxr_proj)?;
    let dim = tape.value(out).numel();
    tape.reshape(out, vec![dim])
}

/// Batched CXR messages: `cxr_embeddings` is `K × d` holding every CXR in
/// the batch in graph edge order. Returns `B × d`, zero rows for patients
/// without CXRs.
pub fn aggregate_cxr_batch(
    tape: &mut Tape,
    cxr_embeddings: Option<Var>,
    graph: &PGraph,
    params: &AggParams<Var>,
) -> Result<Var> {
    let b = graph.len();
    let dim = tape.value(params.cxr_proj).cols();
    let Some(cxr) = cxr_embeddings else {
        return Ok(tape.constant(Tensor::zeros(vec![b, dim])));
    };
    let k = graph.cxr_edges.len();
    if tape.value(cxr).rows() != k {
        return Err(Error::Shape {
            op: "aggregate_cxr",
            left: tape.value(cxr).shape().to_vec(),
            right: vec![k],
        });
    }
    let mut weights = vec![0.0; b * k];
    let mut start = 0;
    while start < k {
        let patient = graph.cxr_edges[start].patient;
        let end = start
            + graph.cxr_edges[start..]
                .iter()
                .take_while(|e| e.patient == patient)
                .count();
        let times: Vec<f64> = graph.cxr_edges[start..end].iter().map(|e| e.delta_t).collect();
        for (j, w) in temporal_weights(&times)?.into_iter().enumerate() {
            weights[patient * k + start + j] = w;
        }
        start = end;
    }
    let w = tape.constant(Tensor::matrix(b, k, weights)?);
    let pooled = tape.matmul(w, cxr)?;
    tape.matmul(pooled, params.cxr_proj)
}
