//! Training loop, augmentation and batched prediction.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Tensor};
use crate::disease_corr::DiseaseCorrelation;
use crate::error::{Error, Result};
use crate::eval::{macro_prauc, PraucReport};
use crate::fusion::SOURCES;
use crate::harness::records::{PatientRecord, FORMAT_VERSION};
use crate::model::{bce_loss, forward, ForwardSettings, ModelDims, ModelParams, Variant};

fn default_format_version() -> u32 {
    FORMAT_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub batch_size: usize,
    /// Batch size used for validation and prediction; defaults to `batch_size`.
    pub eval_batch_size: Option<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub delta: f64,
    pub tau: f64,
    pub cxr_dropout_rate: f64,
    pub seed: u64,
    pub window_hours: f64,
    pub embed_dim: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            batch_size: 64,
            eval_batch_size: None,
            learning_rate: 1e-3,
            epochs: 100,
            patience: 10,
            delta: 0.6,
            tau: 0.4,
            cxr_dropout_rate: 0.3,
            seed: 0,
            window_hours: 48.0,
            embed_dim: 64,
            hidden: 128,
            heads: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.format_version != FORMAT_VERSION {
            return fail(format!("unsupported format_version {}", self.format_version));
        }
        if self.batch_size == 0 || self.eval_batch_size == Some(0) {
            return fail("batch sizes must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.delta > -1.0 && self.delta < 1.0) {
            return fail(format!("delta must lie in (-1, 1), got {}", self.delta));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.cxr_dropout_rate) {
            return fail(format!(
                "cxr_dropout_rate must lie in [0, 1), got {}",
                self.cxr_dropout_rate
            ));
        }
        if !(self.window_hours > 0.0) {
            return fail(format!("window_hours must be positive, got {}", self.window_hours));
        }
        if self.embed_dim == 0 || self.hidden == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        Ok(())
    }

    pub fn eval_batch(&self) -> usize {
        self.eval_batch_size.unwrap_or(self.batch_size)
    }

    pub fn forward_settings(&self, variant: Variant) -> ForwardSettings {
        ForwardSettings {
            delta: self.delta,
            window_hours: self.window_hours,
            variant,
        }
    }

    /// Model dimensions for a dataset shaped like `sample`.
    pub fn dims_for(&self, sample: &PatientRecord, cxr_features: usize) -> ModelDims {
        ModelDims {
            n_labels: sample.labels.len(),
            ehr_features: sample.ehr.features(),
            cxr_features,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            heads: self.heads,
        }
    }
}

/// CXR feature width of a dataset, or 1 when no patient has a CXR.
pub fn cxr_width(records: &[PatientRecord]) -> usize {
    records
        .iter()
        .flat_map(|r| r.cxrs.first())
        .map(|c| c.features.len())
        .next()
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<PatientRecord>,
    pub val: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

const SPLIT_SALT: u64 = 0x5eed_0712;

/// Shuffled 7:1:2 train/validation/test split.
pub fn split_dataset(records: &[PatientRecord], seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n = records.len();
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let take = |r: &[usize]| r.iter().map(|&i| records[i].clone()).collect();
    Split {
        train: take(&idx[..n_train]),
        val: take(&idx[n_train..n_train + n_val]),
        test: take(&idx[n_train + n_val..]),
    }
}

/// Strips every CXR from `⌊rate · m⌋` of the `m` CXR-bearing patients.
pub fn cxr_dropout(batch: &mut [PatientRecord], rate: f64, rng: &mut impl Rng) {
    let with_cxr: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].has_cxr()).collect();
    let drop = (rate * with_cxr.len() as f64).floor() as usize;
    if drop == 0 {
        return;
    }
    for k in index::sample(rng, with_cxr.len(), drop) {
        batch[with_cxr[k]].cxrs.clear();
    }
}

/// Adam with the usual moment defaults.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

impl ModelParams<crate::diffmath::Tensor> {
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let Self {
            ehr_encoder,
            cxr_encoder,
            aggregation,
            gcn,
            fusion,
            global_query,
            head_weights,
            head_bias,
        } = self;
        for mlp in [ehr_encoder, cxr_encoder] {
            out.extend([&mut mlp.w1, &mut mlp.b1, &mut mlp.w2, &mut mlp.b2]);
        }
        for head in &mut aggregation.heads {
            out.extend([&mut head.proj, &mut head.attn]);
        }
        out.push(&mut aggregation.cxr_proj);
        out.extend([&mut gcn.w1, &mut gcn.w2]);
        out.extend([&mut fusion.wq, &mut fusion.wk, &mut fusion.wv]);
        out.extend([global_query, head_weights, head_bias]);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_prauc: Option<f64>,
}

pub fn history_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,val_macro_prauc\n");
    for h in history {
        let val = h.val_macro_prauc.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{:.6},{val}\n", h.epoch, h.train_loss));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<Tensor>,
    pub dims: ModelDims,
    pub correlation: DiseaseCorrelation,
    pub history: Vec<EpochMetrics>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub variant: Variant,
}

/// One gradient step on a batch; returns the loss before the update.
pub fn train_step(
    params: &mut ModelParams<Tensor>,
    optimizer: &mut Adam,
    batch: &[PatientRecord],
    correlation: &DiseaseCorrelation,
    settings: &ForwardSettings,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let out = forward(&mut tape, batch, &vars, &correlation.normalized, settings)?;
    let labels: Vec<&[u8]> = batch.iter().map(|r| r.labels.as_slice()).collect();
    let loss = bce_loss(&mut tape, out.probs, &labels)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .named()
        .iter()
        .map(|(_, v)| {
            tape.grad(**v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(**v).numel()])
        })
        .collect();
    optimizer.step(&mut params.tensors_mut(), &grads);
    Ok(value)
}

/// Fits a fresh model on `train`, early-stopping on `val` macro PRAUC.
///
/// With an empty `val` the last epoch is kept.
pub fn fit(
    train: &[PatientRecord],
    val: &[PatientRecord],
    config: &TrainConfig,
    variant: Variant,
) -> Result<TrainOutcome> {
    config.validate()?;
    let Some(first) = train.first() else {
        return Err(Error::EmptyDataset("training split is empty"));
    };
    for r in train.iter().chain(val) {
        r.validate(config.window_hours)?;
    }
    let dims = config.dims_for(first, cxr_width(train));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(&dims, &mut rng)?;
    let labels: Vec<&[u8]> = train.iter().map(|r| r.labels.as_slice()).collect();
    let correlation = DiseaseCorrelation::from_labels(&labels, config.tau)?;
    let settings = config.forward_settings(variant);
    let mut optimizer = Adam::new(config.learning_rate);

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<Tensor>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch: Vec<PatientRecord> = chunk.iter().map(|&i| train[i].clone()).collect();
            cxr_dropout(&mut batch, config.cxr_dropout_rate, &mut rng);
            let loss = train_step(&mut params, &mut optimizer, &batch, &correlation, &settings)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss,
                    epoch,
                    step,
                    learning_rate: config.learning_rate,
                });
            }
            total += loss;
            steps += 1;
        }
        let val_score = if val.is_empty() {
            None
        } else {
            let preds = predict(val, &params, &correlation, config, variant)?;
            let labels: Vec<&[u8]> = val.iter().map(|r| r.labels.as_slice()).collect();
            Some(macro_prauc(&preds.probs, &labels)?.macro_avg)
        };
        history.push(EpochMetrics {
            epoch,
            train_loss: total / steps.max(1) as f64,
            val_macro_prauc: val_score,
        });
        log::info!(
            "epoch {epoch}: loss {:.4} val {:?}",
            total / steps.max(1) as f64,
            val_score
        );

        match (val_score, &best) {
            (None, _) => best = Some((0.0, epoch, params.clone())),
            (Some(s), Some((b, _, _))) if s <= *b => {}
            (Some(s), _) => best = Some((s, epoch, params.clone())),
        }
        if let (Some(_), Some((_, best_epoch, _))) = (val_score, &best) {
            if config.patience > 0 && epoch - best_epoch >= config.patience {
                break;
            }
        }
    }
    let (_, best_epoch, params) = best.ok_or(Error::Config("epochs must be at least 1".into()))?;
    Ok(TrainOutcome {
        params,
        dims,
        correlation,
        history,
        best_epoch,
        variant,
    })
}

/// Splits 7:1:2 and fits on the training part.
pub fn train(records: &[PatientRecord], config: &TrainConfig, variant: Variant) -> Result<(TrainOutcome, Split)> {
    let split = split_dataset(records, config.seed);
    let outcome = fit(&split.train, &split.val, config, variant)?;
    Ok((outcome, split))
}

#[derive(Clone, Debug)]
pub struct Predictions {
    /// `B × N` probabilities.
    pub probs: Vec<Vec<f64>>,
    /// Per patient, per disease weights over `[own EHR, similar patients, CXR]`.
    pub attention: Vec<Vec<[f64; SOURCES]>>,
    pub cxr_counts: Vec<usize>,
}

/// Runs the model over `records` in consecutive batches of the evaluation batch size.
pub fn predict(
    records: &[PatientRecord],
    params: &ModelParams<Tensor>,
    correlation: &DiseaseCorrelation,
    config: &TrainConfig,
    variant: Variant,
) -> Result<Predictions> {
    let settings = config.forward_settings(variant);
    let mut out = Predictions {
        probs: Vec::with_capacity(records.len()),
        attention: Vec::with_capacity(records.len()),
        cxr_counts: Vec::with_capacity(records.len()),
    };
    let n_labels = correlation.n_labels();
    for chunk in records.chunks(config.eval_batch()) {
        let mut tape = Tape::new();
        let vars = params.map(|_, t| tape.constant(t.clone()));
        let f = forward(&mut tape, chunk, &vars, &correlation.normalized, &settings)?;
        let probs = tape.value(f.probs);
        out.probs.extend((0..chunk.len()).map(|s| probs.row(s).to_vec()));
        out.attention.extend(f.attention(&tape, n_labels));
        out.cxr_counts.extend(f.cxr_counts.iter().copied());
    }
    Ok(out)
}

/// Macro PRAUC of a trained model on `records`.
pub fn evaluate(
    records: &[PatientRecord],
    outcome: &TrainOutcome,
    config: &TrainConfig,
) -> Result<PraucReport> {
    let preds = predict(records, &outcome.params, &outcome.correlation, config, outcome.variant)?;
    let labels: Vec<&[u8]> = records.iter().map(|r| r.labels.as_slice()).collect();
    macro_prauc(&preds.probs, &labels)
}

/// CSV of the attention map: one row per patient and disease.
pub fn attention_csv(records: &[PatientRecord], preds: &Predictions) -> String {
    let mut out = String::from("patient_id,disease,n_cxr,alpha_ehr,alpha_similar,alpha_cxr\n");
    for (s, r) in records.iter().enumerate() {
        for (n, a) in preds.attention[s].iter().enumerate() {
            out.push_str(&format!(
                "{},{n},{},{},{},{}\n",
                r.patient_id, preds.cxr_counts[s], a[0], a[1], a[2]
            ));
        }
    }
    out
}
