//! Average precision (area under the step-wise precision–recall curve).

use crate::error::{Error, Result};

/// Step-wise average precision: `Σ (R_k − R_{k−1}) · P_k` over descending
/// score thresholds, where tied scores form a single threshold.
///
/// Returns `None` when there are no positive labels.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PraucReport {
    /// `None` for labels without positives.
    pub per_disease: Vec<Option<f64>>,
    pub macro_avg: f64,
    pub undefined_labels: Vec<usize>,
}

/// Per-column average precision and their mean over defined columns.
pub fn macro_prauc<P, L>(predictions: &[P], labels: &[L]) -> Result<PraucReport>
where
    P: AsRef<[f64]>,
    L: AsRef<[u8]>,
{
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "macro_prauc",
            left: vec![predictions.len()],
            right: vec![labels.len()],
        });
    }
    let n = labels.first().map_or(0, |l| l.as_ref().len());
    if predictions
        .iter()
        .zip(labels)
        .any(|(p, l)| p.as_ref().len() != n || l.as_ref().len() != n)
    {
        return Err(Error::InvalidArgument("ragged prediction or label rows".into()));
    }
    let per_disease: Vec<Option<f64>> = (0..n)
        .map(|j| {
            let s: Vec<f64> = predictions.iter().map(|p| p.as_ref()[j]).collect();
            let y: Vec<u8> = labels.iter().map(|l| l.as_ref()[j]).collect();
            average_precision(&s, &y)
        })
        .collect();
    let defined: Vec<f64> = per_disease.iter().flatten().copied().collect();
    let undefined_labels = per_disease
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(i, _)| i)
        .collect();
    let macro_avg = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(PraucReport {
        per_disease,
        macro_avg,
        undefined_labels,
    })
}

/// Per-disease CSV: `disease,prauc,baseline,delta_pct`, then a `macro` row.
///
/// `delta_pct` is the relative change against `baseline`; both columns are
/// empty without one.
pub fn per_disease_report(
    report: &PraucReport,
    names: &[String],
    baseline: Option<&PraucReport>,
) -> Result<String> {
    if names.len() != report.per_disease.len() {
        return Err(Error::InvalidArgument(format!(
            "{} disease names for {} labels",
            names.len(),
            report.per_disease.len()
        )));
    }
    if let Some(b) = baseline {
        if b.per_disease.len() != names.len() {
            return Err(Error::InvalidArgument("baseline label count differs".into()));
        }
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let delta = |m: Option<f64>, b: Option<f64>| match (m, b) {
        (Some(m), Some(b)) if b > 0.0 => format!("{:.1}", (m - b) / b * 100.0),
        _ => String::new(),
    };
    let mut out = String::from("disease,prauc,baseline,delta_pct\n");
    for (i, name) in names.iter().enumerate() {
        let m = report.per_disease[i];
        let b = baseline.and_then(|b| b.per_disease[i]);
        out.push_str(&format!("{name},{},{},{}\n", fmt(m), fmt(b), delta(m, b)));
    }
    let bm = baseline.map(|b| b.macro_avg);
    out.push_str(&format!(
        "macro,{},{},{}\n",
        fmt(Some(report.macro_avg)),
        fmt(bm),
        delta(Some(report.macro_avg), bm)
    ));
    Ok(out)
}
