//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any fails.
//!
//! `cargo test -p corrfuse --test acceptance -- 5` runs only criterion 5.

mod common;

use std::fs;
use std::time::{Duration, Instant};

use corrfuse::aggregation::{aggregate_cxr, aggregate_ehr_ehr, temporal_weights, AggParams};
use corrfuse::diffmath::gradcheck::{self, GradCheckReport};
use corrfuse::diffmath::{Tape, Tensor, Var, LEAKY_SLOPE};
use corrfuse::disease_corr::{gcn_forward, normalize_adjacency, DiseaseCorrelation, Gcn, GCN_SLOPE};
use corrfuse::eval::{average_precision, macro_prauc};
use corrfuse::fusion::{cga_attend, stack_features, FusionParams, MASKED};
use corrfuse::harness::cli;
use corrfuse::harness::records::{save_cohort, PatientRecord};
use corrfuse::harness::synth::{generate_cohort, strip_cxrs, CohortSpec, SignalCxr};
use corrfuse::model::train::{cxr_dropout, evaluate, fit, predict, train, TrainConfig};
use corrfuse::model::{bce_loss, forward, ForwardSettings, ModelParams, Variant};
use corrfuse::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Settings shared by the training-based criteria.
fn acceptance_config(seed: u64) -> TrainConfig {
    TrainConfig {
        embed_dim: 16,
        hidden: 64,
        epochs: 120,
        seed,
        ..TrainConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed, uneven weights.
fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).numel();
    let w = tape.constant(Tensor::vector((0..n).map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64 / 11.0)).collect()));
    let flat = tape.reshape(out, vec![n])?;
    tape.dot(flat, w)
}

/// Flattens structured parameters so they can be gradient-checked as inputs.
macro_rules! flatten {
    ($params:expr) => {{
        let mut out: Vec<Tensor> = Vec::new();
        let _ = $params.map(|_, t| out.push(t.clone()));
        out
    }};
}

// ---------------------------------------------------------------- 1

fn criterion_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut results: Vec<(&str, f64, GradCheckReport)> = Vec::new();
    let m23 = random_tensor(&mut rng, vec![2, 3]);
    let m23b = random_tensor(&mut rng, vec![2, 3]);
    let m34 = random_tensor(&mut rng, vec![3, 4]);
    let v3 = random_tensor(&mut rng, vec![3]);
    let positive = Tensor::matrix(2, 3, m23.data().iter().map(|x| x.abs() + 0.5).collect())?;
    // Kinks at 0 and at the clamp bounds are avoided.
    let away = Tensor::matrix(2, 3, m23.data().iter().map(|x| if x.abs() < 0.05 { x + 0.2 } else { *x }).collect())?;

    type Op = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let unary: Vec<(&str, Tensor, Op)> = vec![
        ("tanh", m23.clone(), Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("sigmoid", m23.clone(), Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("leaky_relu", away.clone(), Box::new(|t, v| t.leaky_relu(v[0], LEAKY_SLOPE))),
        ("exp", m23.clone(), Box::new(|t, v| Ok(t.exp(v[0])))),
        ("ln", positive, Box::new(|t, v| Ok(t.ln(v[0])))),
        ("clamp", away.clone(), Box::new(|t, v| Ok(t.clamp(v[0], -0.5, 0.5)))),
        ("affine", m23.clone(), Box::new(|t, v| Ok(t.affine(v[0], -1.5, 0.25)))),
        ("scale", m23.clone(), Box::new(|t, v| Ok(t.scale(v[0], 3.0)))),
        ("transpose", m23.clone(), Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", m23.clone(), Box::new(|t, v| t.reshape(v[0], vec![3, 2]))),
        ("row", m23.clone(), Box::new(|t, v| t.row(v[0], 1))),
        ("gather_rows", m23.clone(), Box::new(|t, v| t.gather_rows(v[0], &[1, 0, 1]))),
        ("sum", m23.clone(), Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", m23.clone(), Box::new(|t, v| Ok(t.mean(v[0])))),
        ("sum_row_groups", random_tensor(&mut rng, vec![6, 2]), Box::new(|t, v| t.sum_row_groups(v[0], 3))),
        (
            "masked_softmax",
            v3.clone(),
            Box::new(|t, v| t.masked_softmax(v[0], &[0.0, MASKED, 0.0])),
        ),
        (
            "segment_softmax",
            random_tensor(&mut rng, vec![2, 3]),
            Box::new(|t, v| t.segment_softmax(v[0], &[false, true, false, false, false, false], 3)),
        ),
    ];
    for (name, input, f) in unary {
        let r = gradcheck::check(&[input], |t, v| {
            let out = f(t, v)?;
            project(t, out)
        })?;
        results.push((name, 1e-4, r));
    }

    let binary: Vec<(&str, Tensor, Tensor, Op)> = vec![
        ("matmul", m23.clone(), m34.clone(), Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", m23.clone(), m23b.clone(), Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", m23.clone(), m23b.clone(), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", m23.clone(), m23b.clone(), Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", m23.clone(), v3.clone(), Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("dot", v3.clone(), random_tensor(&mut rng, vec![3]), Box::new(|t, v| t.dot(v[0], v[1]))),
        ("concat", v3.clone(), m23.clone(), Box::new(|t, v| t.concat(&[v[0], v[1]]))),
        ("concat_cols", m23.clone(), m23b.clone(), Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("stack_rows", v3.clone(), random_tensor(&mut rng, vec![3]), Box::new(|t, v| t.stack_rows(&[v[0], v[1], v[0]]))),
    ];
    for (name, a, b, f) in binary {
        let r = gradcheck::check(&[a, b], |t, v| {
            let out = f(t, v)?;
            project(t, out)
        })?;
        results.push((name, 1e-4, r));
    }

    // Similar-patient aggregation: target, three neighbors, then parameters.
    let d = 8;
    let agg = AggParams::init(&mut rng, d, 2)?;
    let agg_flat = flatten!(agg);
    let mut inputs: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, vec![d])).collect();
    inputs.extend(agg_flat.iter().cloned());
    let r = gradcheck::check(&inputs, |t, v| {
        let mut it = v[4..].iter().copied();
        let p = agg.map(|_, _| it.next().unwrap());
        let m = aggregate_ehr_ehr(t, v[0], &v[1..4], &p, LEAKY_SLOPE)?;
        project(t, m.message)
    })?;
    results.push(("aggregate_ehr_ehr", 1e-4, r));

    let mut inputs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, vec![d])).collect();
    inputs.extend(agg_flat.iter().cloned());
    let weights = temporal_weights(&[0.1, 0.5, 0.9])?;
    let r = gradcheck::check(&inputs, |t, v| {
        let mut it = v[3..].iter().copied();
        let p = agg.map(|_, _| it.next().unwrap());
        let m = aggregate_cxr(t, &v[..3], &weights, &p)?;
        project(t, m)
    })?;
    results.push(("aggregate_cxr", 1e-4, r));

    let n_labels = 4;
    let corr = DiseaseCorrelation::from_labels(&[vec![1u8, 1, 0, 0], vec![1, 0, 1, 0], vec![0, 0, 1, 1]], 0.4)?;
    let a_hat = corr.normalized.clone();
    let gcn = Gcn::init(&mut rng, n_labels, d);
    let r = gradcheck::check(&[Tensor::eye(n_labels), gcn.w1.clone(), gcn.w2.clone()], |t, v| {
        let a = t.constant(a_hat.clone());
        let z = gcn_forward(t, a, v[0], &Gcn { w1: v[1], w2: v[2] })?;
        project(t, z)
    })?;
    results.push(("gcn_forward", 1e-4, r));

    let fusion = FusionParams::init(&mut rng, d);
    for (name, has_nb, has_cxr) in [("cga_attend", true, true), ("cga_attend (cxr masked)", true, false)] {
        let mut inputs: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, vec![d])).collect();
        inputs.extend([fusion.wq.clone(), fusion.wk.clone(), fusion.wv.clone()]);
        let r = gradcheck::check(&inputs, |t, v| {
            let stack = stack_features(t, v[0], v[1], v[2], has_nb, has_cxr)?;
            let p = FusionParams { wq: v[4], wk: v[5], wv: v[6] };
            let a = cga_attend(t, &stack, v[3], &p)?;
            project(t, a.output)
        })?;
        results.push((name, 1e-4, r));
    }

    // Whole pipeline: B = 2, d = 8, N = 3, linked patients, one with CXRs.
    let dims = common::dims(3, 4, 3, 8, 2);
    let params = ModelParams::init(&dims, &mut rng)?;
    let batch = common::toy_batch(5, &[2, 0], 3, 4, 3);
    let labels: Vec<&[u8]> = batch.iter().map(|r| r.labels.as_slice()).collect();
    let corr = DiseaseCorrelation::from_labels(&[vec![1u8, 1, 0], vec![1, 0, 1], vec![0, 1, 1]], 0.4)?;
    let tensors = flatten!(params);
    for variant in [Variant::Full, Variant::NoCga] {
        let settings = ForwardSettings {
            delta: -0.99,
            window_hours: 48.0,
            variant,
        };
        let r = gradcheck::check(&tensors, |t, v| {
            let mut it = v.iter().copied();
            let p = params.map(|_, _| it.next().unwrap());
            let out = forward(t, &batch, &p, &corr.normalized, &settings)?;
            assert!(out.graph.has_neighbors(0));
            bce_loss(t, out.probs, &labels)
        })?;
        results.push((if variant == Variant::Full { "forward + bce_loss" } else { "forward + bce_loss (no-cga)" }, 1e-3, r));
    }

    let elapsed = start.elapsed();
    let failures: Vec<String> = results
        .iter()
        .filter(|(_, tol, r)| !r.passes(*tol))
        .map(|(n, _, r)| format!("{n} ({:.2e})", r.max_rel_err))
        .collect();
    let worst = results
        .iter()
        .max_by(|a, b| (a.2.max_rel_err / a.1).total_cmp(&(b.2.max_rel_err / b.1)))
        .unwrap();
    let checked: usize = results.iter().map(|r| r.2.checked).sum();
    Ok(outcome(
        failures.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, {checked} elements, worst {} at {:.2e} (tol {:.0e}), {:.1}s{}",
            results.len(),
            worst.0,
            worst.2.max_rel_err,
            worst.1,
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_oracles() -> Result<Outcome> {
    let mut errs: Vec<(&str, f64)> = Vec::new();
    let mut exact = true;

    let dts = [0.0, 0.25, 1.0];
    let w = temporal_weights(&dts)?;
    let z: f64 = dts.iter().map(|t| t.exp()).sum();
    errs.push(("temporal weights", dts.iter().zip(&w).map(|(t, w)| (t.exp() / z - w).abs()).fold(0.0, f64::max)));

    let corr = DiseaseCorrelation::from_labels(&[vec![1u8, 1], vec![1, 0], vec![1, 1]], 0.4)?;
    errs.push(("A_12", (corr.conditional.at(0, 1) - 2.0 / 3.0).abs()));
    errs.push(("A_21", (corr.conditional.at(1, 0) - 1.0).abs()));
    exact &= corr.binary.at(0, 1) == 1.0 && corr.binary.at(1, 0) == 1.0;
    // max(B, Bᵀ) + I is all ones, every degree is 2.
    errs.push(("A_hat (hand)", corr.normalized.data().iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max)));

    // Masked attention with the CXR slot removed.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 4;
    let fusion = FusionParams::init(&mut rng, d);
    let rows: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, vec![d])).collect();
    let mut tape = Tape::new();
    let v: Vec<Var> = rows.iter().map(|r| tape.constant(r.clone())).collect();
    let p = fusion.map(|_, t| tape.constant(t.clone()));
    let stack = stack_features(&mut tape, v[0], v[1], v[2], true, false)?;
    let att = cga_attend(&mut tape, &stack, v[3], &p)?;
    let alpha = tape.value(att.alpha).data().to_vec();
    exact &= alpha[2] == 0.0;
    let matvec = |x: &[f64], m: &Tensor| -> Vec<f64> { (0..d).map(|c| (0..d).map(|r| x[r] * m.at(r, c)).sum()).collect() };
    let q = matvec(rows[3].data(), &fusion.wq);
    let logits: Vec<f64> = (0..2)
        .map(|j| {
            let k = matvec(rows[j].data(), &fusion.wk);
            k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
        })
        .collect();
    let zsum: f64 = logits.iter().map(|l| l.exp()).sum();
    errs.push(("masked attention", (0..2).map(|j| (logits[j].exp() / zsum - alpha[j]).abs()).fold(0.0, f64::max)));

    // GCN on the path graph 0 - 1 - 2.
    let path = Tensor::matrix(3, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0])?;
    let a_hat = normalize_adjacency(&path)?;
    let deg = [2.0f64, 3.0, 2.0];
    let mut brute = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let linked = i == j || path.at(i, j) == 1.0;
            brute[i][j] = if linked { 1.0 / (deg[i] * deg[j]).sqrt() } else { 0.0 };
        }
    }
    errs.push(("A_hat (path)", (0..9).map(|k| (brute[k / 3][k % 3] - a_hat.data()[k]).abs()).fold(0.0, f64::max)));
    let gcn = Gcn::init(&mut rng, 3, 2);
    let mut tape = Tape::new();
    let a = tape.constant(a_hat.clone());
    let z = tape.constant(Tensor::eye(3));
    let g = gcn.map(|_, t| tape.constant(t.clone()));
    let out = gcn_forward(&mut tape, a, z, &g)?;
    let hidden = 6;
    let mut first = vec![[0.0; 6]; 3];
    for i in 0..3 {
        for k in 0..hidden {
            let s: f64 = (0..3).map(|j| brute[i][j] * gcn.w1.at(j, k)).sum();
            first[i][k] = if s >= 0.0 { s } else { GCN_SLOPE * s };
        }
    }
    let mut err = 0.0f64;
    for i in 0..3 {
        for c in 0..2 {
            let expect: f64 = (0..3)
                .map(|j| brute[i][j] * (0..hidden).map(|k| first[j][k] * gcn.w2.at(k, c)).sum::<f64>())
                .sum();
            err = err.max((expect - tape.value(out).at(i, c)).abs());
        }
    }
    errs.push(("gcn (path)", err));

    let worst = errs.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    Ok(outcome(
        exact && worst.1 <= 1e-10,
        format!("{} oracles, worst {} off by {:.1e}; binarized A and masked alpha exact: {exact}", errs.len(), worst.0, worst.1),
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_missing_modality() -> Result<Outcome> {
    let config = acceptance_config(0);
    let records = generate_cohort(&CohortSpec::default())?;
    let (full, split) = train(&records, &config, Variant::Full)?;
    let stripped_test = strip_cxrs(&split.test);
    let preds = predict(&stripped_test, &full.params, &full.correlation, &config, Variant::Full)?;
    let finite = preds.probs.iter().flatten().all(|p| p.is_finite());
    let labels: Vec<&[u8]> = stripped_test.iter().map(|r| r.labels.as_slice()).collect();
    let full_report = macro_prauc(&preds.probs, &labels)?;

    let (ehr_only, ehr_split) = train(&strip_cxrs(&records), &config, Variant::Full)?;
    let ehr_report = evaluate(&ehr_split.test, &ehr_only, &config)?;
    let worse = full_report
        .per_disease
        .iter()
        .zip(&ehr_report.per_disease)
        .filter(|(a, b)| matches!((a, b), (Some(a), Some(b)) if *a < *b - 0.02))
        .count();
    let margin = full_report.macro_avg - ehr_report.macro_avg;
    Ok(outcome(
        finite && margin >= -0.02,
        format!(
            "all {} patients finite: {finite}; macro {:.4} without CXRs vs EHR-only {:.4} ({margin:+.4}); {worse} diseases more than 0.02 below",
            stripped_test.len(),
            full_report.macro_avg,
            ehr_report.macro_avg
        ),
    ))
}

// ---------------------------------------------------------------- 4, 5

fn seed_scores(spec: &CohortSpec, variants: &[Variant]) -> Result<Vec<Vec<f64>>> {
    (0..SEEDS)
        .map(|seed| {
            let records = generate_cohort(&CohortSpec { seed, ..spec.clone() })?;
            let config = acceptance_config(seed);
            variants
                .iter()
                .map(|&v| {
                    let (out, split) = train(&records, &config, v)?;
                    Ok(evaluate(&split.test, &out, &config)?.macro_avg)
                })
                .collect()
        })
        .collect()
}

fn criterion_temporal() -> Result<Outcome> {
    let start = Instant::now();
    let spec = CohortSpec {
        signal_cxr: SignalCxr::NotLatest,
        cxr_count_min: 2,
        cxr_count_mean: 2.5,
        ..CohortSpec::default()
    };
    let scores = seed_scores(&spec, &[Variant::Full, Variant::LastCxrOnly])?;
    let full = mean(&scores.iter().map(|s| s[0]).collect::<Vec<_>>());
    let last = mean(&scores.iter().map(|s| s[1]).collect::<Vec<_>>());
    let elapsed = start.elapsed();
    Ok(outcome(
        full - last >= 0.03 && elapsed < Duration::from_secs(600),
        format!(
            "{SEEDS}-seed mean full {full:.4} vs last-cxr-only {last:.4} ({:+.4}), {:.0}s",
            full - last,
            elapsed.as_secs_f64()
        ),
    ))
}

fn criterion_modality_inconsistency() -> Result<Outcome> {
    let variants = [Variant::Full, Variant::NoEhrEhr, Variant::LastCxrOnly, Variant::NoCga];
    let scores = seed_scores(&CohortSpec::default(), &variants)?;
    let full = mean(&scores.iter().map(|s| s[0]).collect::<Vec<_>>());
    let mut pass = true;
    let mut parts = vec![format!("full {full:.4}")];
    for (k, v) in variants.iter().enumerate().skip(1) {
        let m = mean(&scores.iter().map(|s| s[k]).collect::<Vec<_>>());
        let min_margin = scores.iter().map(|s| s[0] - s[k]).fold(f64::INFINITY, f64::min);
        pass &= full > m && min_margin >= -0.01;
        parts.push(format!("{v} {m:.4} (worst seed {min_margin:+.4})"));
    }
    Ok(outcome(pass, format!("{SEEDS}-seed means: {}", parts.join(", "))))
}

// ---------------------------------------------------------------- 6

fn criterion_memorization() -> Result<Outcome> {
    let spec = CohortSpec {
        n_patients: 16,
        n_labels: 4,
        block_size: 2,
        ..CohortSpec::default()
    };
    let records = generate_cohort(&spec)?;
    let config = TrainConfig {
        epochs: 200,
        patience: 0,
        cxr_dropout_rate: 0.0,
        ..TrainConfig::default()
    };
    let out = fit(&records, &records, &config, Variant::Full)?;
    let first = out
        .history
        .iter()
        .find(|h| h.val_macro_prauc.is_some_and(|v| v >= 0.99))
        .map(|h| h.epoch);
    let best = evaluate(&records, &out, &config)?;
    Ok(outcome(
        first.is_some(),
        format!(
            "training macro PRAUC {:.4} at kept epoch {}; first epoch >= 0.99: {}",
            best.macro_avg,
            out.best_epoch,
            first.map_or("never".to_string(), |e| e.to_string())
        ),
    ))
}

// ---------------------------------------------------------------- 7

/// Precision/recall at every distinct threshold, straight from the definition.
fn brute_force_ap(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return None;
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let predicted: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = predicted.iter().filter(|&&i| labels[i] == 1).count();
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / predicted.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

fn criterion_metric() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut max_diff = 0.0f64;
    let mut agree = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=20);
        // Coarse scores on half the trials to force ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| if trial % 2 == 0 { f64::from(rng.random_range(0..5u8)) / 4.0 } else { rng.random() })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        match (average_precision(&scores, &labels), brute_force_ap(&scores, &labels)) {
            (None, None) => agree += 1,
            (Some(a), Some(b)) => {
                max_diff = max_diff.max((a - b).abs());
                agree += usize::from((a - b).abs() <= 1e-12);
            }
            _ => {}
        }
    }

    let mut gaps = Vec::new();
    for prevalence in [0.3, 0.5] {
        let positives = (200.0 * prevalence) as usize;
        let mut labels: Vec<u8> = (0..200).map(|i| u8::from(i < positives)).collect();
        let mut total = 0.0;
        for _ in 0..1000 {
            labels.shuffle(&mut rng);
            let scores: Vec<f64> = (0..200).map(|_| rng.random()).collect();
            total += average_precision(&scores, &labels).unwrap();
        }
        gaps.push((prevalence, total / 1000.0 - prevalence));
    }
    let stat_ok = gaps.iter().all(|(_, g)| g.abs() <= 0.02);
    Ok(outcome(
        agree == 1000 && stat_ok,
        format!(
            "{agree}/1000 brute-force matches (max diff {max_diff:.1e}); random-score AP minus prevalence: {}",
            gaps.iter().map(|(p, g)| format!("{p}: {g:+.4}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- 8, 9

fn run_cli(args: &[&str]) -> i32 {
    cli::run(std::iter::once("corrfuse").chain(args.iter().copied()))
}

fn pipeline(dir: &std::path::Path) -> Result<Vec<u8>> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    fs::write(dir.join("spec.json"), r#"{"format_version": 1, "n_patients": 300}"#)?;
    fs::write(dir.join("train.json"), r#"{"format_version": 1, "epochs": 5, "embed_dim": 16, "hidden": 32}"#)?;
    let codes = [
        run_cli(&["--quiet", "--seed", "7", "gen-data", "--spec", &p("spec.json"), "--out", &p("cohort.jsonl")]),
        run_cli(&["--quiet", "--seed", "7", "train", "--data", &p("cohort.jsonl"), "--config", &p("train.json"), "--out", &p("ckpt")]),
        run_cli(&["--quiet", "eval", "--ckpt", &p("ckpt"), "--data", &p("cohort.jsonl"), "--report", &p("report.csv")]),
    ];
    assert_eq!(codes, [0, 0, 0], "pipeline exit codes");
    Ok(fs::read(dir.join("report.csv"))?)
}

fn criterion_determinism() -> Result<Outcome> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    let ra = pipeline(a.path())?;
    let rb = pipeline(b.path())?;
    Ok(outcome(
        ra == rb && !ra.is_empty(),
        format!("two runs with --seed 7: {} and {} report bytes, identical: {}", ra.len(), rb.len(), ra == rb),
    ))
}

fn criterion_mask() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let spec = CohortSpec {
        n_patients: 400,
        time_steps: 12,
        seed: 3,
        ..CohortSpec::default()
    };
    let mut records: Vec<PatientRecord> = generate_cohort(&spec)?;
    let config = TrainConfig {
        epochs: 3,
        embed_dim: 16,
        hidden: 32,
        ..TrainConfig::default()
    };
    let (out, _) = train(&records, &config, Variant::Full)?;
    corrfuse::model::checkpoint::Checkpoint::from_outcome(&out, &config).save(&dir.path().join("ckpt"))?;

    // Batch-wise dropout, as in training, then dump attention for everyone.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for chunk in records.chunks_mut(config.batch_size) {
        cxr_dropout(chunk, config.cxr_dropout_rate, &mut rng);
    }
    save_cohort(&records, &dir.path().join("dropped.jsonl"))?;
    let code = run_cli(&[
        "--quiet", "eval", "--ckpt", &p("ckpt"), "--data", &p("dropped.jsonl"), "--report", &p("r.csv"),
        "--alpha-out", &p("alpha.csv"), "--split", "all",
    ]);
    let dump = fs::read_to_string(dir.path().join("alpha.csv"))?;
    let (mut rows, mut bad, mut with, mut without) = (0, 0, 0, 0);
    let mut seen = std::collections::HashSet::new();
    for line in dump.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let n_cxr: usize = cols[2].parse().unwrap();
        let alpha_cxr: f64 = cols[5].parse().unwrap();
        rows += 1;
        bad += usize::from((alpha_cxr == 0.0) != (n_cxr == 0));
        if seen.insert(cols[0].to_string()) {
            if n_cxr == 0 { without += 1 } else { with += 1 }
        }
    }
    let expected_rows = records.len() * spec.n_labels;
    Ok(outcome(
        code == 0 && bad == 0 && rows == expected_rows && with > 0 && without > 0,
        format!("{rows} (patient, disease) rows over {with} patients with CXRs and {without} without; {bad} violations"),
    ))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Result<Outcome>); 9] = [
        (1, "gradient suite", criterion_gradients),
        (2, "closed-form oracles", criterion_oracles),
        (3, "missing-modality robustness", criterion_missing_modality),
        (4, "temporal asynchrony", criterion_temporal),
        (5, "modality inconsistency", criterion_modality_inconsistency),
        (6, "memorization", criterion_memorization),
        (7, "metric correctness", criterion_metric),
        (8, "determinism", criterion_determinism),
        (9, "mask correctness", criterion_mask),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = run().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        failed += usize::from(!result.pass);
        println!(
            "criterion {id} [{}] {name}: {} ({:.1}s)",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
