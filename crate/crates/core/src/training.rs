//! Optimization loop, learning-rate schedule, AdamW, checkpoints and
//! prediction with a trained model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::DropoutStream;
use crate::encodings::ensure_encodings;
use crate::error::{Error, Result};
use crate::graphbuild::{build_graph, NormalizationStats, PrefixGraph};
use crate::model::{forward, loss_and_grad, GraphBatch, ModelConfig, ModelParams};
use crate::prefixing::EventPrefixRecord;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub early_stop: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 600,
            warmup_epochs: 50,
            base_lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 128,
            seed: 42,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config("warmup_epochs must be smaller than epochs".into()));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("base_lr must be positive and weight_decay nonnegative".into()));
        }
        if self.early_stop == Some(0) {
            return Err(Error::Config("early_stop patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size configuration from the published experiments.
    Paper,
    /// Smaller model and schedule that trains on a CPU in minutes.
    Desk,
}

impl Profile {
    pub fn configs(self) -> (ModelConfig, TrainConfig) {
        match self {
            Profile::Paper => (ModelConfig::default(), TrainConfig::default()),
            Profile::Desk => (
                ModelConfig {
                    hidden_dim: 32,
                    num_layers: 3,
                    num_heads: 4,
                    ..ModelConfig::default()
                },
                TrainConfig {
                    epochs: 300,
                    warmup_epochs: 25,
                    batch_size: 32,
                    ..TrainConfig::default()
                },
            ),
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay towards 0.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let w = config.warmup_epochs;
    if epoch < w {
        return config.base_lr * epoch as f64 / w as f64;
    }
    let span = (config.epochs - w) as f64;
    let progress = (epoch - w) as f64 / span;
    config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One AdamW update. Weight decay shrinks the parameters first and is kept
/// out of the moment estimates.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= lr * weight_decay * params[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("parameter entry {i}")));
    }
    Ok(())
}

fn flatten(p: &ModelParams<Matrix>) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.num_scalars());
    p.visit(&mut |_, m| out.extend_from_slice(m.data()));
    out
}

fn unflatten(p: &mut ModelParams<Matrix>, flat: &[f64]) {
    let mut at = 0;
    p.visit_mut(&mut |_, m| {
        let n = m.len();
        m.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ModelParams<Matrix>,
    pub stats: NormalizationStats,
    /// One entry per completed epoch.
    pub curve: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Set when training stopped on a non-finite loss.
    pub diverged_at: Option<usize>,
}

impl TrainedModel {
    pub fn best_val_loss(&self) -> f64 {
        self.curve.get(self.best_epoch).map_or(f64::INFINITY, |m| m.val_loss)
    }

    /// Turns a diverged run into [`Error::Diverged`].
    pub fn check_converged(&self) -> Result<()> {
        match self.diverged_at {
            Some(epoch) => Err(Error::Diverged { epoch }),
            None => Ok(()),
        }
    }
}

/// Mean L1 loss in evaluation mode.
pub fn mean_loss(params: &ModelParams<Matrix>, config: &ModelConfig, graphs: &[PrefixGraph], batch_size: usize) -> Result<f64> {
    if graphs.is_empty() {
        return Ok(f64::NAN);
    }
    let preds = predict_normalized(params, config, graphs, batch_size)?;
    Ok(preds.iter().zip(graphs).map(|(p, g)| (p - g.target).abs()).sum::<f64>() / graphs.len() as f64)
}

/// Raw model outputs, one per graph, in evaluation mode.
pub fn predict_normalized(
    params: &ModelParams<Matrix>,
    config: &ModelConfig,
    graphs: &[PrefixGraph],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(batch_size.max(1)) {
        let refs: Vec<&PrefixGraph> = chunk.iter().collect();
        let batch = GraphBatch::new(&refs, config, params.edge_feature_len())?;
        out.extend(forward(params, config, &batch, None)?.predictions);
    }
    Ok(out)
}

/// Trains from seeded initialization and returns the parameters with the
/// lowest validation loss (training loss when there is no validation set).
pub fn train_model(
    train: &[PrefixGraph],
    validation: &[PrefixGraph],
    stats: &NormalizationStats,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainedModel> {
    model_config.validate()?;
    train_config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let enc = model_config.encoding_config();
    let mut train = train.to_vec();
    ensure_encodings(&mut train, &enc);
    let mut validation = validation.to_vec();
    ensure_encodings(&mut validation, &enc);

    let mut params = ModelParams::init(model_config, stats.num_classes(), stats.edge_feature_len())?;
    let mut flat = flatten(&params);
    let mut adam = AdamState::new(flat.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut curve = Vec::with_capacity(train_config.epochs);
    let mut diverged_at = None;
    let mut step = 0u64;

    'epochs: for epoch in 0..train_config.epochs {
        let lr = lr_schedule(epoch, train_config);
        order.shuffle(&mut shuffler);
        let mut total = 0.0;
        for chunk in order.chunks(train_config.batch_size) {
            let refs: Vec<&PrefixGraph> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = GraphBatch::new(&refs, model_config, params.edge_feature_len())?;
            let mut stream = DropoutStream::new(train_config.seed, step);
            step += 1;
            let (loss, grads) = match loss_and_grad(&params, model_config, &batch, Some(&mut stream)) {
                Ok(r) => r,
                Err(Error::NonFiniteOutput | Error::NonFiniteGradient(_)) => {
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            total += loss * chunk.len() as f64;
            if adamw_step(&mut flat, &flatten(&grads), &mut adam, lr, train_config.weight_decay).is_err() {
                diverged_at = Some(epoch);
                break 'epochs;
            }
            unflatten(&mut params, &flat);
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if validation.is_empty() {
            train_loss
        } else {
            match mean_loss(&params, model_config, &validation, train_config.batch_size) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::NonFiniteOutput) => {
                    diverged_at = Some(epoch);
                    break;
                }
                Err(e) => return Err(e),
            }
        };
        curve.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best.clone_from(&params);
        } else if train_config.early_stop.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }

    Ok(TrainedModel {
        model_config: model_config.clone(),
        train_config: train_config.clone(),
        params: best,
        stats: stats.clone(),
        curve,
        best_epoch,
        diverged_at,
    })
}

/// Predicted remaining time in seconds, clamped at zero.
pub fn predict(model: &TrainedModel, record: &EventPrefixRecord) -> Result<f64> {
    Ok(predict_records(model, std::slice::from_ref(record))?[0])
}

pub fn predict_records(model: &TrainedModel, records: &[EventPrefixRecord]) -> Result<Vec<f64>> {
    if let Some(r) = records.iter().find(|r| r.k() < 2) {
        return Err(Error::PrefixTooShort(r.k()));
    }
    let graphs: Vec<PrefixGraph> = records.iter().map(|r| build_graph(r, &model.stats)).collect();
    predict_graphs(model, &graphs)
}

/// Denormalized, clamped predictions in seconds for prebuilt graphs.
pub fn predict_graphs(model: &TrainedModel, graphs: &[PrefixGraph]) -> Result<Vec<f64>> {
    let raw = predict_normalized(&model.params, &model.model_config, graphs, model.train_config.batch_size)?;
    Ok(raw.into_iter().map(|y| denormalize(y, &model.stats)).collect())
}

pub fn denormalize(normalized: f64, stats: &NormalizationStats) -> f64 {
    (normalized * stats.max_case_duration_seconds).max(0.0)
}

pub fn write_metrics_csv(curve: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
    for m in curve {
        w.write_record([
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.val_loss.to_string(),
            m.lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RMTCKPT\0";
pub const CHECKPOINT_VERSION: &str = "remtime-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: String,
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab_size: usize,
    edge_feature_len: usize,
    best_epoch: usize,
    diverged_at: Option<usize>,
    curve: Vec<EpochMetrics>,
    stats: NormalizationStats,
}

/// Binary checkpoint: magic, a length-prefixed JSON header with the
/// configuration echo, then every array as name, rows, cols and
/// little-endian `f64` values.
pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION.into(),
        model_config: model.model_config.clone(),
        train_config: model.train_config.clone(),
        vocab_size: model.params.vocab_size(),
        edge_feature_len: model.params.edge_feature_len(),
        best_epoch: model.best_epoch,
        diverged_at: model.diverged_at,
        curve: model.curve.clone(),
        stats: model.stats.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut arrays = Vec::new();
    model.params.visit(&mut |name, m| arrays.push((name.to_string(), m.clone())));
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, m) in arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersionMismatch {
            expected: CHECKPOINT_VERSION.into(),
            found: header.version,
        });
    }
    let mut params = ModelParams::init(&header.model_config, header.vocab_size, header.edge_feature_len)?;
    let count = read_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = vec![0.0; rows * cols];
        let mut b = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let name = String::from_utf8(name).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        arrays.push((name, Matrix::from_vec(rows, cols, data)));
    }
    let mut problem = None;
    let mut it = arrays.into_iter();
    params.visit_mut(&mut |name, m| match it.next() {
        Some((n, a)) if n == name && a.shape() == m.shape() => *m = a,
        _ => {
            problem.get_or_insert_with(|| name.to_string());
        }
    });
    if let Some(name) = problem.or_else(|| it.next().map(|(n, _)| n)) {
        return Err(Error::Format(format!("checkpoint array `{name}` is missing or mis-shaped")));
    }
    Ok(TrainedModel {
        model_config: header.model_config,
        train_config: header.train_config,
        params,
        stats: header.stats,
        curve: header.curve,
        best_epoch: header.best_epoch,
        diverged_at: header.diverged_at,
    })
}
