//! Synthetic cohorts with planted, modality-specific label signal.
//!
//! Labels are grouped into co-occurrence blocks. A block fires with
//! probability `block_rate`; each label in a firing block turns on with
//! probability `block_cooccurrence`, so `P(j | i)` for two labels of one
//! block is about `block_cooccurrence`. Each block draws its evidence from
//! one modality (cycling ehr, cxr, neighbor unless overridden per label):
//!
//! - `ehr`: the patient's EHR baseline moves along a label direction.
//! - `cxr`: one "signal" CXR moves along a label direction; the others are
//!   distractors drawn from random label states.
//! - `neighbor`: the block is active exactly in a subset of patient groups. Group
//!   membership shows up as a shared EHR fingerprint, and each patient
//!   carries only a weak reading of their own label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::records::{CxrInput, EhrInput, PatientRecord, FORMAT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Ehr,
    Cxr,
    Neighbor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalCxr {
    /// Any of the patient's CXRs, uniformly.
    #[default]
    Any,
    /// Any CXR except the most recent one (needs `cxr_count_min >= 2`).
    NotLatest,
}

fn default_format_version() -> u32 {
    FORMAT_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub n_patients: usize,
    pub n_labels: usize,
    pub ehr_features: usize,
    pub cxr_features: usize,
    pub time_steps: usize,
    pub window_hours: f64,
    pub cxr_availability_rate: f64,
    /// Mean CXR count among patients that have any.
    pub cxr_count_mean: f64,
    pub cxr_count_min: usize,
    pub signal_cxr: SignalCxr,
    /// Consecutive labels per co-occurrence block; the last block may be shorter.
    pub block_size: usize,
    pub block_rate: f64,
    pub block_cooccurrence: f64,
    /// Per-label probability of a positive outside any block.
    pub background_rate: f64,
    /// One entry per label; `None` cycles ehr, cxr, neighbor over blocks.
    pub modalities: Option<Vec<Modality>>,
    pub neighbor_groups: usize,
    pub fingerprint_strength: f64,
    pub ehr_signal: f64,
    pub neighbor_signal: f64,
    pub cxr_signal: f64,
    /// Amplitude of the random label pattern in distractor CXRs.
    pub distractor_signal: f64,
    pub patient_noise: f64,
    pub ehr_noise: f64,
    pub cxr_noise: f64,
    pub ehr_missing_rate: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            n_patients: 2000,
            n_labels: 25,
            ehr_features: 17,
            cxr_features: 32,
            time_steps: 48,
            window_hours: 48.0,
            cxr_availability_rate: 0.6,
            cxr_count_mean: 1.89,
            cxr_count_min: 1,
            signal_cxr: SignalCxr::Any,
            block_size: 3,
            block_rate: 0.3,
            block_cooccurrence: 0.7,
            background_rate: 0.02,
            modalities: None,
            neighbor_groups: 16,
            fingerprint_strength: 1.5,
            ehr_signal: 1.0,
            neighbor_signal: 0.3,
            cxr_signal: 1.0,
            distractor_signal: 1.0,
            patient_noise: 0.5,
            ehr_noise: 1.0,
            cxr_noise: 0.5,
            ehr_missing_rate: 0.3,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.format_version != FORMAT_VERSION {
            return fail(format!("unsupported format_version {}", self.format_version));
        }
        for (name, v) in [
            ("n_patients", self.n_patients),
            ("n_labels", self.n_labels),
            ("ehr_features", self.ehr_features),
            ("cxr_features", self.cxr_features),
            ("time_steps", self.time_steps),
            ("block_size", self.block_size),
            ("neighbor_groups", self.neighbor_groups),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("cxr_availability_rate", self.cxr_availability_rate),
            ("block_rate", self.block_rate),
            ("block_cooccurrence", self.block_cooccurrence),
            ("background_rate", self.background_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.ehr_missing_rate) {
            return fail(format!("ehr_missing_rate must lie in [0, 1), got {}", self.ehr_missing_rate));
        }
        if !(self.window_hours > 0.0) {
            return fail("window_hours must be positive".into());
        }
        if self.cxr_count_min == 0 || !(self.cxr_count_mean >= self.cxr_count_min as f64) {
            return fail(format!(
                "need 1 <= cxr_count_min <= cxr_count_mean, got {} and {}",
                self.cxr_count_min, self.cxr_count_mean
            ));
        }
        if self.signal_cxr == SignalCxr::NotLatest && self.cxr_count_min < 2 {
            return fail("signal_cxr = not-latest needs cxr_count_min >= 2".into());
        }
        let noises = [
            self.fingerprint_strength,
            self.ehr_signal,
            self.neighbor_signal,
            self.cxr_signal,
            self.distractor_signal,
            self.patient_noise,
            self.ehr_noise,
            self.cxr_noise,
        ];
        if noises.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return fail("signal and noise levels must be finite and non-negative".into());
        }
        if let Some(m) = &self.modalities {
            if m.len() != self.n_labels {
                return fail(format!("modalities has {} entries for {} labels", m.len(), self.n_labels));
            }
        }
        Ok(())
    }

    pub fn modality(&self, label: usize) -> Modality {
        match &self.modalities {
            Some(m) => m[label],
            None => [Modality::Ehr, Modality::Cxr, Modality::Neighbor][self.block_of(label) % 3],
        }
    }

    pub fn block_of(&self, label: usize) -> usize {
        label / self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.n_labels.div_ceil(self.block_size)
    }

    /// Label pairs sharing a block.
    pub fn block_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n_labels {
            for j in 0..self.n_labels {
                if i != j && self.block_of(i) == self.block_of(j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Cohort-wide directions and group tables, drawn from stream 0.
struct Design {
    fingerprints: Vec<Vec<f64>>,
    ehr_dirs: Vec<Vec<f64>>,
    cxr_dirs: Vec<Vec<f64>>,
    /// `group_on[g][b]`: neighbor-driven block `b` is active in group `g`.
    group_on: Vec<Vec<bool>>,
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl Design {
    fn draw(spec: &CohortSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let fingerprints = (0..spec.neighbor_groups)
            .map(|_| unit_vector(&mut rng, spec.ehr_features))
            .collect();
        let ehr_dirs = (0..spec.n_labels)
            .map(|_| unit_vector(&mut rng, spec.ehr_features))
            .collect();
        let cxr_dirs = (0..spec.n_labels)
            .map(|_| unit_vector(&mut rng, spec.cxr_features))
            .collect();
        let group_on = (0..spec.neighbor_groups)
            .map(|_| (0..spec.n_blocks()).map(|_| rng.random_bool(0.5)).collect())
            .collect();
        Self {
            fingerprints,
            ehr_dirs,
            cxr_dirs,
            group_on,
        }
    }
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

fn signed(y: u8) -> f64 {
    2.0 * f64::from(y) - 1.0
}

fn generate_patient(spec: &CohortSpec, design: &Design, index: usize) -> PatientRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = spec.n_labels;

    let group = rng.random_range(0..spec.neighbor_groups);
    let blocks: Vec<bool> = (0..spec.n_blocks()).map(|_| rng.random_bool(spec.block_rate)).collect();
    let labels: Vec<u8> = (0..n)
        .map(|i| {
            let b = spec.block_of(i);
            let active = match spec.modality(i) {
                Modality::Neighbor => design.group_on[group][b],
                _ => blocks[b],
            };
            let fired = active && rng.random_bool(spec.block_cooccurrence);
            u8::from(fired || rng.random_bool(spec.background_rate))
        })
        .collect();

    let mut base = vec![0.0; spec.ehr_features];
    axpy(&mut base, spec.fingerprint_strength, &design.fingerprints[group]);
    for (i, &y) in labels.iter().enumerate() {
        let amp = match spec.modality(i) {
            Modality::Ehr => spec.ehr_signal,
            Modality::Neighbor => spec.neighbor_signal,
            Modality::Cxr => 0.0,
        };
        axpy(&mut base, amp * signed(y), &design.ehr_dirs[i]);
    }
    for b in &mut base {
        *b += spec.patient_noise * normal.sample(&mut rng);
    }
    let mut values = Vec::with_capacity(spec.time_steps);
    let mut mask = Vec::with_capacity(spec.time_steps);
    for _ in 0..spec.time_steps {
        let mut row = Vec::with_capacity(spec.ehr_features);
        let mut mrow = Vec::with_capacity(spec.ehr_features);
        for &b in &base {
            let v = b + spec.ehr_noise * normal.sample(&mut rng);
            if rng.random_bool(spec.ehr_missing_rate) {
                row.push(0.0);
                mrow.push(0.0);
            } else {
                row.push(v);
                mrow.push(1.0);
            }
        }
        values.push(row);
        mask.push(mrow);
    }

    let mut cxrs = Vec::new();
    if rng.random_bool(spec.cxr_availability_rate) {
        let extra = spec.cxr_count_mean - spec.cxr_count_min as f64;
        let count = spec.cxr_count_min
            + if extra > 0.0 {
                Poisson::new(extra).expect("positive rate").sample(&mut rng) as usize
            } else {
                0
            };
        let mut times: Vec<f64> = (0..count).map(|_| rng.random::<f64>() * spec.window_hours).collect();
        times.sort_by(f64::total_cmp);
        let signal = match spec.signal_cxr {
            SignalCxr::Any => rng.random_range(0..count),
            SignalCxr::NotLatest => rng.random_range(0..count - 1),
        };
        for (k, &t) in times.iter().enumerate() {
            let mut f = vec![0.0; spec.cxr_features];
            for i in (0..n).filter(|&i| spec.modality(i) == Modality::Cxr) {
                let (amp, state) = if k == signal {
                    (spec.cxr_signal, labels[i])
                } else {
                    (spec.distractor_signal, u8::from(rng.random_bool(0.5)))
                };
                axpy(&mut f, amp * signed(state), &design.cxr_dirs[i]);
            }
            for v in &mut f {
                *v += spec.cxr_noise * normal.sample(&mut rng);
            }
            cxrs.push(CxrInput {
                features: f,
                time_hours: t,
            });
        }
    }

    PatientRecord {
        patient_id: format!("p{index:05}"),
        ehr: EhrInput { values, mask },
        cxrs,
        labels,
    }
}

/// Deterministic for a given spec; patient `i` uses RNG stream `i + 1`.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<PatientRecord>> {
    spec.validate()?;
    let design = Design::draw(spec);
    Ok((0..spec.n_patients).map(|i| generate_patient(spec, &design, i)).collect())
}

/// Copy of `records` with every CXR removed.
pub fn strip_cxrs(records: &[PatientRecord]) -> Vec<PatientRecord> {
    records
        .iter()
        .map(|r| PatientRecord {
            cxrs: Vec::new(),
            ..r.clone()
        })
        .collect()
}
