#![allow(dead_code)]

use corrfuse::harness::records::{CxrInput, EhrInput, PatientRecord};
use corrfuse::model::train::TrainConfig;
use corrfuse::model::ModelDims;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random patients with `cxr_counts[s]` CXRs each.
pub fn toy_batch(seed: u64, cxr_counts: &[usize], j: usize, f: usize, n: usize) -> Vec<PatientRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cxr_counts
        .iter()
        .enumerate()
        .map(|(s, &k)| {
            let values: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..j).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let mask: Vec<Vec<f64>> = (0..4)
                .map(|t| (0..j).map(|c| if (t + c + s) % 3 == 0 { 0.0 } else { 1.0 }).collect())
                .collect();
            let mut ehr = EhrInput { values, mask };
            ehr.impute();
            PatientRecord {
                patient_id: format!("t{s}"),
                ehr,
                cxrs: (0..k)
                    .map(|_| CxrInput {
                        features: (0..f).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        time_hours: rng.random_range(0.0..48.0),
                    })
                    .collect(),
                labels: (0..n).map(|i| u8::from((s + i) % 2 == 0)).collect(),
            }
        })
        .collect()
}

pub fn dims(j: usize, f: usize, n: usize, d: usize, heads: usize) -> ModelDims {
    ModelDims {
        n_labels: n,
        ehr_features: j,
        cxr_features: f,
        embed_dim: d,
        hidden: 5,
        heads,
    }
}

/// Small, fast configuration for smoke tests.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        embed_dim: 8,
        hidden: 8,
        heads: 2,
        epochs: 2,
        ..TrainConfig::default()
    }
}
