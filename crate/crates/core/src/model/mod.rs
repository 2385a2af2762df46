//! End-to-end model: encoders, patient graph, aggregation, disease
//! prototypes, correlation-guided fusion and per-disease heads.

pub mod checkpoint;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_cxr_batch, aggregate_ehr_ehr_batch, AggParams};
use crate::diffmath::{Tape, Tensor, Var, LEAKY_SLOPE};
use crate::disease_corr::{gcn_forward, Gcn};
use crate::encoders::{encode_cxr, encode_ehr, init_uniform, Mlp};
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, SOURCES};
use crate::harness::records::{CxrInput, EhrInput, PatientRecord};
use crate::pgraph::{build_pgraph, PGraph};

/// Probability clamp applied before the log-likelihood.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// No similarity edges; the similar-patient slot is always masked.
    NoEhrEhr,
    /// Only the most recent CXR of each patient is kept.
    LastCxrOnly,
    /// One learned query shared by all diseases instead of disease prototypes.
    NoCga,
}

impl Variant {
    pub const ABLATIONS: [Variant; 3] = [Variant::NoEhrEhr, Variant::LastCxrOnly, Variant::NoCga];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEhrEhr => "no-ehr-ehr",
            Variant::LastCxrOnly => "last-cxr-only",
            Variant::NoCga => "no-cga",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::Full, Variant::NoEhrEhr, Variant::LastCxrOnly, Variant::NoCga]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_labels: usize,
    pub ehr_features: usize,
    pub cxr_features: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_labels,
            self.ehr_features,
            self.cxr_features,
            self.embed_dim,
            self.hidden,
            self.heads,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters, a function of the dimensions alone.
    pub fn param_count(&self) -> usize {
        let (n, j, f, d, h) = (
            self.n_labels,
            self.ehr_features,
            self.cxr_features,
            self.embed_dim,
            self.hidden,
        );
        let mlp = |input: usize| input * h + h + h * d + d;
        let head_width = d / self.heads;
        mlp(2 * j)
            + mlp(f)
            + self.heads * (d * head_width + 2 * head_width)
            + d * d
            + n * 2 * n
            + 2 * n * d
            + 3 * d * d
            + d
            + d * n
            + n
    }
}

/// Every trainable array, generic over storage (`Tensor` at rest, `Var` on a tape).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub ehr_encoder: Mlp<T>,
    pub cxr_encoder: Mlp<T>,
    pub aggregation: AggParams<T>,
    pub gcn: Gcn<T>,
    pub fusion: FusionParams<T>,
    /// Query of the shared-attention ablation.
    pub global_query: T,
    /// `d × N`; column `n` is the head of disease `n`.
    pub head_weights: T,
    pub head_bias: T,
}

impl ModelParams<Tensor> {
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let d = dims.embed_dim;
        Ok(Self {
            ehr_encoder: Mlp::init(rng, 2 * dims.ehr_features, dims.hidden, d),
            cxr_encoder: Mlp::init(rng, dims.cxr_features, dims.hidden, d),
            aggregation: AggParams::init(rng, d, dims.heads)?,
            gcn: Gcn::init(rng, dims.n_labels, d),
            fusion: FusionParams::init(rng, d),
            global_query: init_uniform(rng, d, vec![d]),
            head_weights: init_uniform(rng, d, vec![d, dims.n_labels]),
            head_bias: Tensor::zeros(vec![dims.n_labels]),
        })
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn on_tape(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|_, t| tape.param(t.clone()))
    }
}

impl<T> ModelParams<T> {
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> ModelParams<U> {
        let scoped = |prefix: &str, name: &str| format!("{prefix}.{name}");
        ModelParams {
            ehr_encoder: self.ehr_encoder.map(|n, t| f(&scoped("ehr_encoder", n), t)),
            cxr_encoder: self.cxr_encoder.map(|n, t| f(&scoped("cxr_encoder", n), t)),
            aggregation: self.aggregation.map(|n, t| f(&scoped("aggregation", n), t)),
            gcn: self.gcn.map(|n, t| f(&scoped("gcn", n), t)),
            fusion: self.fusion.map(|n, t| f(&scoped("fusion", n), t)),
            global_query: f("global_query", &self.global_query),
            head_weights: f("head_weights", &self.head_weights),
            head_bias: f("head_bias", &self.head_bias),
        }
    }

    /// `(name, value)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|name, t| out.push((name.to_string(), t)));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardSettings {
    pub delta: f64,
    pub window_hours: f64,
    pub variant: Variant,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `B × N`
    pub logits: Var,
    /// `B × N`
    pub probs: Var,
    /// `3B × N` (or `3B × 1` for [`Variant::NoCga`]); rows `3s..3s+3` are
    /// patient `s`'s weights over `[own EHR, similar patients, CXR]`.
    pub alpha: Var,
    pub graph: PGraph,
    /// CXR count per patient after variant preprocessing.
    pub cxr_counts: Vec<usize>,
}

impl ForwardOutput {
    /// Attention weights per patient and disease.
    pub fn attention(&self, tape: &Tape, n_labels: usize) -> Vec<Vec<[f64; SOURCES]>> {
        let alpha = tape.value(self.alpha);
        let shared = alpha.cols() == 1;
        (0..self.graph.len())
            .map(|s| {
                (0..n_labels)
                    .map(|n| {
                        let c = if shared { 0 } else { n };
                        std::array::from_fn(|j| alpha.at(SOURCES * s + j, c))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Keeps only each patient's most recent CXR.
pub fn keep_last_cxr(batch: &[PatientRecord]) -> Vec<PatientRecord> {
    batch
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if let Some(last) = r
                .cxrs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.time_hours.total_cmp(&b.1.time_hours))
                .map(|(i, _)| i)
            {
                r.cxrs = vec![r.cxrs.swap_remove(last)];
            }
            r
        })
        .collect()
}

/// Prototype matrix `N × d` from the correlation GCN on one-hot label embeddings.
pub fn disease_prototypes(tape: &mut Tape, a_hat: &Tensor, gcn: &Gcn<Var>) -> Result<Var> {
    let n = a_hat.rows();
    let a = tape.constant(a_hat.clone());
    let z = tape.constant(Tensor::eye(n));
    gcn_forward(tape, a, z, gcn)
}

/// Runs the whole model on one batch. The similarity graph is rebuilt from
/// this batch's EHR embeddings.
pub fn forward(
    tape: &mut Tape,
    batch: &[PatientRecord],
    params: &ModelParams<Var>,
    a_hat: &Tensor,
    settings: &ForwardSettings,
) -> Result<ForwardOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("forward needs at least one patient"));
    }
    let trimmed;
    let batch = if settings.variant == Variant::LastCxrOnly {
        trimmed = keep_last_cxr(batch);
        &trimmed[..]
    } else {
        batch
    };
    let b = batch.len();
    let n_labels = tape.value(params.head_weights).cols();
    let d = tape.value(params.head_weights).rows();
    if a_hat.shape() != [n_labels, n_labels] {
        return Err(Error::Shape {
            op: "forward",
            left: a_hat.shape().to_vec(),
            right: vec![n_labels, n_labels],
        });
    }

    let ehr: Vec<&EhrInput> = batch.iter().map(|r| &r.ehr).collect();
    let h = encode_ehr(tape, &ehr, &params.ehr_encoder)?;
    let mut graph = build_pgraph(batch, tape.value(h), settings.delta, settings.window_hours)?;
    if settings.variant == Variant::NoEhrEhr {
        graph = graph.without_similarity_edges();
    }

    let cxrs: Vec<&CxrInput> = batch.iter().flat_map(|r| r.cxrs.iter()).collect();
    let c = if cxrs.is_empty() {
        None
    } else {
        Some(encode_cxr(tape, &cxrs, &params.cxr_encoder)?)
    };
    let m_cxr = aggregate_cxr_batch(tape, c, &graph, &params.aggregation)?;
    let m_ehr = aggregate_ehr_ehr_batch(tape, h, &graph, &params.aggregation, LEAKY_SLOPE)?;

    let sources = tape.concat_cols(&[h, m_ehr, m_cxr])?;
    let sources = tape.reshape(sources, vec![SOURCES * b, d])?;
    let keys = tape.matmul(sources, params.fusion.wk)?;
    let values = tape.matmul(sources, params.fusion.wv)?;
    let per_source = tape.matmul(values, params.head_weights)?;
    let masked: Vec<bool> = (0..b)
        .flat_map(|s| [false, !graph.has_neighbors(s), !batch[s].has_cxr()])
        .collect();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let (alpha, weights) = match settings.variant {
        Variant::NoCga => {
            let q = tape.as_row(params.global_query)?;
            let q = tape.matmul(q, params.fusion.wq)?;
            let q_t = tape.transpose(q)?;
            let scores = tape.matmul(keys, q_t)?;
            let scores = tape.scale(scores, inv_sqrt_d);
            let alpha = tape.segment_softmax(scores, &masked, SOURCES)?;
            let ones = tape.constant(Tensor::matrix(1, n_labels, vec![1.0; n_labels])?);
            let spread = tape.matmul(alpha, ones)?;
            (alpha, spread)
        }
        _ => {
            let protos = disease_prototypes(tape, a_hat, &params.gcn)?;
            let q = tape.matmul(protos, params.fusion.wq)?;
            let q_t = tape.transpose(q)?;
            let scores = tape.matmul(keys, q_t)?;
            let scores = tape.scale(scores, inv_sqrt_d);
            let scores_t = tape.transpose(scores)?;
            let masked_t: Vec<bool> = (0..n_labels).flat_map(|_| masked.iter().copied()).collect();
            let alpha_t = tape.segment_softmax(scores_t, &masked_t, SOURCES)?;
            let alpha = tape.transpose(alpha_t)?;
            (alpha, alpha)
        }
    };
    let weighted = tape.mul(weights, per_source)?;
    let logits = tape.sum_row_groups(weighted, SOURCES)?;
    let logits = tape.add_row(logits, params.head_bias)?;
    let probs = tape.sigmoid(logits);
    Ok(ForwardOutput {
        logits,
        probs,
        alpha,
        graph,
        cxr_counts: batch.iter().map(|r| r.cxrs.len()).collect(),
    })
}

/// Mean over the batch of the summed per-disease negative log-likelihood.
pub fn bce_loss<L: AsRef<[u8]>>(tape: &mut Tape, probs: Var, labels: &[L]) -> Result<Var> {
    let p = tape.value(probs);
    let (b, n) = (p.rows(), p.cols());
    if labels.len() != b || labels.iter().any(|l| l.as_ref().len() != n) {
        return Err(Error::Shape {
            op: "bce_loss",
            left: p.shape().to_vec(),
            right: vec![labels.len(), labels.first().map_or(0, |l| l.as_ref().len())],
        });
    }
    let y: Vec<f64> = labels
        .iter()
        .flat_map(|l| l.as_ref().iter().map(|&v| f64::from(v)))
        .collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let shape = p.shape().to_vec();
    let y = tape.constant(Tensor::new(shape.clone(), y)?);
    let not_y = tape.constant(Tensor::new(shape, not_y)?);

    let clamped = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.ln(clamped);
    let one_minus = tape.affine(clamped, -1.0, 1.0);
    let log_q = tape.ln(one_minus);
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let ll = tape.add(pos, neg)?;
    let total = tape.sum(ll);
    Ok(tape.scale(total, -1.0 / b as f64))
}
