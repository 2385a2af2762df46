//! wasm-bindgen entry points for `www/index.html`.
//!
//! Each export takes plain text from the page and returns JSON. The plain
//! `*_json` functions do the work so they can be tested natively.

use serde_json::json;
use wasm_bindgen::prelude::*;

use corrfuse::aggregation::temporal_weights;
use corrfuse::disease_corr::DiseaseCorrelation;
use corrfuse::pgraph::cosine_similarity;

/// Rows of numbers separated by commas or whitespace; blank lines skipped.
fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| format!("line {}: {t:?} is not a number", i + 1)))
                .collect()
        })
        .collect()
}

fn matrix_rows(t: &corrfuse::diffmath::Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Conditional co-occurrence `A`, its binarization at `tau` and the
/// normalized adjacency, from one multi-hot label row per line.
pub fn correlation_json(labels: &str, tau: f64) -> Result<String, String> {
    let rows = parse_rows(labels)?;
    let labels: Vec<Vec<u8>> = rows
        .iter()
        .map(|r| {
            r.iter()
                .map(|&v| match v {
                    v if v == 0.0 => Ok(0),
                    v if v == 1.0 => Ok(1),
                    _ => Err(format!("labels must be 0 or 1, got {v}")),
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let corr = DiseaseCorrelation::from_labels(&labels, tau).map_err(|e| e.to_string())?;
    Ok(json!({
        "counts": corr.stats.counts,
        "conditional": matrix_rows(&corr.conditional),
        "binary": matrix_rows(&corr.binary),
        "normalized": matrix_rows(&corr.normalized),
    })
    .to_string())
}

/// Pairwise cosine similarities and the undirected edges above `delta`.
pub fn similarity_graph_json(points: &str, delta: f64) -> Result<String, String> {
    let rows = parse_rows(points)?;
    if let Some(r) = rows.iter().find(|r| r.len() != rows[0].len()) {
        return Err(format!("all points need {} coordinates, found one with {}", rows[0].len(), r.len()));
    }
    let n = rows.len();
    let sims: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| cosine_similarity(&rows[i], &rows[j])).collect())
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if sims[i][j] > delta {
                edges.push([i, j]);
            }
        }
    }
    let isolated = (0..n)
        .filter(|&i| !edges.iter().any(|e| e.contains(&i)))
        .count();
    Ok(json!({ "similarity": sims, "edges": edges, "isolated": isolated }).to_string())
}

/// Softmax weights of CXRs taken at `times` (hours) within `window` hours.
pub fn temporal_weights_json(times: &str, window: f64) -> Result<String, String> {
    if !(window > 0.0) {
        return Err("window must be positive".into());
    }
    let times: Vec<f64> = parse_rows(times)?.into_iter().flatten().collect();
    if let Some(t) = times.iter().find(|t| !(0.0..=window).contains(*t)) {
        return Err(format!("time {t} lies outside [0, {window}]"));
    }
    let dts: Vec<f64> = times.iter().map(|t| t / window).collect();
    let weights = temporal_weights(&dts).map_err(|e| e.to_string())?;
    Ok(json!({ "delta_t": dts, "weights": weights }).to_string())
}

#[wasm_bindgen]
pub fn correlation(labels: &str, tau: f64) -> Result<String, JsValue> {
    correlation_json(labels, tau).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = similarityGraph)]
pub fn similarity_graph(points: &str, delta: f64) -> Result<String, JsValue> {
    similarity_graph_json(points, delta).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = temporalWeights)]
pub fn temporal_weights_js(times: &str, window: f64) -> Result<String, JsValue> {
    temporal_weights_json(times, window).map_err(|e| JsValue::from_str(&e))
}
