//! Batch-level heterogeneous patient graph.
//!
//! Each patient's EHR node is a target. CXR nodes attach to their own
//! patient with a normalized acquisition time; EHR nodes of different
//! patients are linked when their embeddings are similar enough.

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::harness::records::{CxrInput, PatientRecord};

const NORM_EPS: f64 = 1e-12;

/// Cosine similarity; 0.0 if either vector is (numerically) zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < NORM_EPS || nb < NORM_EPS {
        log::debug!("cosine similarity with a zero-norm embedding; treating as 0");
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Acquisition time as a fraction of the observation window.
pub fn delta_t(cxr: &CxrInput, window_hours: f64) -> Result<f64> {
    if !(window_hours > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "window length must be positive, got {window_hours}"
        )));
    }
    if !(0.0..=window_hours).contains(&cxr.time_hours) {
        return Err(Error::InvalidArgument(format!(
            "CXR time {} outside [0, {window_hours}]",
            cxr.time_hours
        )));
    }
    Ok(cxr.time_hours / window_hours)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CxrEdge {
    /// Batch index of the target patient.
    pub patient: usize,
    /// Index into that patient's CXR list.
    pub cxr: usize,
    pub delta_t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EhrEdge {
    pub source: usize,
    pub target: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PGraph {
    pub patient_ids: Vec<String>,
    pub cxr_edges: Vec<CxrEdge>,
    /// Both directions are stored.
    pub ehr_edges: Vec<EhrEdge>,
    neighbors: Vec<Vec<usize>>,
}

impl PGraph {
    pub fn len(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patient_ids.is_empty()
    }

    /// Similar patients of `target`, in ascending batch order.
    pub fn neighbors(&self, target: usize) -> &[usize] {
        &self.neighbors[target]
    }

    pub fn has_neighbors(&self, target: usize) -> bool {
        !self.neighbors[target].is_empty()
    }

    /// `delta_t` of every CXR attached to `target`, in list order.
    pub fn cxr_times(&self, target: usize) -> Vec<f64> {
        self.cxr_edges
            .iter()
            .filter(|e| e.patient == target)
            .map(|e| e.delta_t)
            .collect()
    }

    /// Drops every EHR–EHR edge.
    pub fn without_similarity_edges(mut self) -> Self {
        self.ehr_edges.clear();
        self.neighbors.iter_mut().for_each(Vec::clear);
        self
    }
}

/// Builds the graph for one batch.
///
/// `embeddings` holds one row per patient. Pairs with similarity strictly
/// above `delta` are linked.
pub fn build_pgraph(
    batch: &[PatientRecord],
    embeddings: &Tensor,
    delta: f64,
    window_hours: f64,
) -> Result<PGraph> {
    if embeddings.rows() != batch.len() {
        return Err(Error::Shape {
            op: "build_pgraph",
            left: vec![batch.len()],
            right: embeddings.shape().to_vec(),
        });
    }
    let mut cxr_edges = Vec::new();
    for (p, record) in batch.iter().enumerate() {
        for (k, cxr) in record.cxrs.iter().enumerate() {
            cxr_edges.push(CxrEdge {
                patient: p,
                cxr: k,
                delta_t: delta_t(cxr, window_hours)?,
            });
        }
    }

    let n = batch.len();
    let mut ehr_edges = Vec::new();
    let mut neighbors = vec![Vec::new(); n];
    for s in 0..n {
        for t in s + 1..n {
            let sim = cosine_similarity(embeddings.row(s), embeddings.row(t));
            if sim > delta {
                ehr_edges.push(EhrEdge {
                    source: s,
                    target: t,
                    similarity: sim,
                });
                ehr_edges.push(EhrEdge {
                    source: t,
                    target: s,
                    similarity: sim,
                });
                neighbors[s].push(t);
                neighbors[t].push(s);
            }
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }

    Ok(PGraph {
        patient_ids: batch.iter().map(|r| r.patient_id.clone()).collect(),
        cxr_edges,
        ehr_edges,
        neighbors,
    })
}
