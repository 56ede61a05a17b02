//! Mini-batch training loop: seeded shuffling, Adam updates over the
//! combined objective, per-epoch negative resampling, and early stopping on
//! train-set rating MSE (the stopping metric is deliberately the train MSE;
//! there is no validation split). The parameters returned are the snapshot
//! from the best-MSE epoch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{build_exposure_table, DataError, Dataset, ExposureTable, Rating};
use crate::derive_seed;
use crate::graph_embed::EmbeddingTable;
use crate::model::{
    backward, forward, gather_rows, scatter_rows, Batch, D2RecParams, ForwardOverrides,
    FreeTable, ModelConfig, ModelError, RatingPredictor, ReweightMode, Variant,
};
use crate::nncore::AdamState;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("embedding table has dim {got}, config wants {want}")]
    EmbeddingDimMismatch { got: usize, want: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The hyperparameter grids used for tuning. Sweeping them is the caller's
/// loop; the defaults below pick one point.
pub const D_EMB_GRID: [usize; 4] = [32, 64, 128, 256];
pub const BATCH_SIZE_GRID: [usize; 4] = [64, 128, 512, 1000];
pub const LR_GRID: [f64; 3] = [0.0001, 0.001, 0.01];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d_emb: usize,
    /// Factor width; `None` matches the embedding width.
    pub d_factor: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub kappa: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
    pub variant: Variant,
    pub omega_max: f64,
    pub reweight_mode: ReweightMode,
    pub exposure_logit_bias: f64,
    /// Redraw the negative rows each epoch (seeded per epoch); otherwise one
    /// fixed table is reused.
    pub resample_negatives: bool,
    /// Copy the pretrained embeddings into trainable tables and update them
    /// jointly. Off by default: the pretrained vectors stay frozen.
    pub fine_tune_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_emb: 64,
            d_factor: None,
            batch_size: 512,
            lr: 0.001,
            kappa: 0.5,
            max_epochs: 200,
            patience: 10,
            negatives_per_positive: 1,
            seed: 42,
            variant: Variant::Full,
            omega_max: 100.0,
            reweight_mode: ReweightMode::ScalePrediction,
            exposure_logit_bias: 0.0,
            resample_negatives: true,
            fine_tune_embeddings: false,
        }
    }
}

impl TrainConfig {
    pub fn d_factor(&self) -> usize {
        self.d_factor.unwrap_or(self.d_emb)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_emb: self.d_emb,
            d_factor: self.d_factor(),
            variant: self.variant,
            kappa: self.kappa,
            omega_max: self.omega_max,
            reweight_mode: self.reweight_mode,
            exposure_logit_bias: self.exposure_logit_bias,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.d_emb == 0 || self.lr <= 0.0 {
            return Err(TrainError::BadConfig("d_emb and lr must be positive".to_string()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::BadConfig(
                "batch_size must be >= 2 (the discrepancy loss is undefined on single rows)"
                    .to_string(),
            ));
        }
        if self.patience == 0 {
            return Err(TrainError::BadConfig("patience must be >= 1".to_string()));
        }
        if self.max_epochs > 0 && self.patience > self.max_epochs {
            return Err(TrainError::BadConfig(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.negatives_per_positive == 0 {
            return Err(TrainError::BadConfig(
                "training needs negatives_per_positive >= 1 (the exposure loss has two classes)"
                    .to_string(),
            ));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rating_loss: f64,
    pub exposure_loss: f64,
    pub discrepancy_loss: f64,
    pub total: f64,
    pub train_mse: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// CSV layout: `epoch,rating_loss,exposure_loss,discrepancy_loss,total,train_mse`.
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let file = File::create(path)
            .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })?;
        let mut w = BufWriter::new(file);
        let mut emit = |s: String| {
            w.write_all(s.as_bytes())
                .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })
        };
        emit("epoch,rating_loss,exposure_loss,discrepancy_loss,total,train_mse\n".to_string())?;
        for r in &self.epochs {
            emit(format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.epoch, r.rating_loss, r.exposure_loss, r.discrepancy_loss, r.total, r.train_mse
            ))?;
        }
        w.flush().map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })
    }
}

/// Trained parameters plus bookkeeping needed downstream.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: D2RecParams,
    pub history: TrainHistory,
    pub positive_rate: f64,
    pub best_epoch: usize,
}

/// Seeded shuffle into contiguous chunks. A trailing chunk of a single row
/// merges into its predecessor: the discrepancy loss is undefined on
/// one-row batches.
pub fn make_batches(table: &ExposureTable, batch_size: usize, epoch_seed: u64) -> Vec<Batch> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    assert!(batch_size >= 2, "batch_size must be >= 2");
    let mut rows = table.rows.clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(epoch_seed);
    rows.shuffle(&mut rng);
    let mut chunks: Vec<&[crate::dataio::ExposureRow]> = rows.chunks(batch_size).collect();
    let mut merged_last = None;
    if chunks.len() > 1 && chunks.last().unwrap().len() < 2 {
        let tail = chunks.pop().unwrap();
        let prev = chunks.pop().unwrap();
        let mut joined = prev.to_vec();
        joined.extend_from_slice(tail);
        merged_last = Some(joined);
    }
    let mut batches: Vec<Batch> = chunks.iter().map(|c| Batch::from_rows(c)).collect();
    if let Some(joined) = merged_last {
        batches.push(Batch::from_rows(&joined));
    }
    batches
}

/// True once the last `patience` epochs have all failed to improve on the
/// minimum train MSE reached before them.
pub fn early_stop(history: &[EpochRecord], patience: usize) -> bool {
    if history.is_empty() {
        return false;
    }
    let mut best_idx = 0;
    for (k, rec) in history.iter().enumerate() {
        if rec.train_mse < history[best_idx].train_mse {
            best_idx = k;
        }
    }
    history.len() - 1 - best_idx >= patience
}

/// Test seams: override the per-epoch MSE with a scripted trace, or capture
/// the parameter snapshot taken at a given epoch.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub mse_override: Option<&'a mut dyn FnMut(usize) -> f64>,
    pub capture_epoch: Option<usize>,
    pub captured: Option<D2RecParams>,
}

pub fn train(
    ds: &Dataset,
    theta: Option<&EmbeddingTable>,
    beta: Option<&EmbeddingTable>,
    train_ratings: &[Rating],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_hooks(ds, theta, beta, train_ratings, cfg, &mut TrainHooks::default())
}

pub fn train_with_hooks(
    ds: &Dataset,
    theta: Option<&EmbeddingTable>,
    beta: Option<&EmbeddingTable>,
    train_ratings: &[Rating],
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let needs_pretrained = cfg.variant != Variant::NoNetworkEmbeddings;
    if needs_pretrained {
        let theta = theta.ok_or_else(|| {
            TrainError::BadConfig("variant needs pretrained user embeddings".to_string())
        })?;
        let beta = beta.ok_or_else(|| {
            TrainError::BadConfig("variant needs pretrained item embeddings".to_string())
        })?;
        if theta.dim() != cfg.d_emb {
            return Err(TrainError::EmbeddingDimMismatch { got: theta.dim(), want: cfg.d_emb });
        }
        if beta.dim() != cfg.d_emb {
            return Err(TrainError::EmbeddingDimMismatch { got: beta.dim(), want: cfg.d_emb });
        }
    }

    let mut params = D2RecParams::new(&model_cfg, ds.n_users, ds.n_items, derive_seed(cfg.seed, 1));
    if cfg.fine_tune_embeddings && needs_pretrained {
        params.free_user = Some(FreeTable::from_matrix(theta.unwrap().vectors.clone()));
        params.free_item = Some(FreeTable::from_matrix(beta.unwrap().vectors.clone()));
    }

    // The positive rate entering the importance weights is pinned from the
    // first table build; resampled epochs redraw negatives only.
    let base_table = build_exposure_table(
        train_ratings,
        ds.n_items,
        cfg.negatives_per_positive,
        derive_seed(cfg.seed, 2),
    )?;
    let positive_rate = base_table.positive_rate;

    let mut head_states: Vec<(AdamState, AdamState)> = params
        .stored_heads_mut()
        .iter()
        .map(|h| {
            (AdamState::new(h.weight.values.len(), cfg.lr), AdamState::new(h.bias.len(), cfg.lr))
        })
        .collect();
    let mut free_states: Option<[AdamState; 2]> = match (&params.free_user, &params.free_item) {
        (Some(u), Some(i)) => Some([
            AdamState::new(u.values.values.len(), cfg.lr),
            AdamState::new(i.values.values.len(), cfg.lr),
        ]),
        _ => None,
    };

    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, D2RecParams)> = None;

    for epoch in 0..cfg.max_epochs {
        let table = if cfg.resample_negatives && epoch > 0 {
            build_exposure_table(
                train_ratings,
                ds.n_items,
                cfg.negatives_per_positive,
                derive_seed(cfg.seed, 1000 + epoch as u64),
            )?
        } else {
            base_table.clone()
        };
        let batches = make_batches(&table, cfg.batch_size, derive_seed(cfg.seed, 5000 + epoch as u64));

        let mut rating_sum = 0.0;
        let mut exposure_sum = 0.0;
        let mut disc_sum = 0.0;
        let mut total_sum = 0.0;

        for (batch_idx, batch) in batches.iter().enumerate() {
            let (theta_batch, beta_batch) = {
                let (theta_src, beta_src) =
                    resolve_sources(&params, theta, beta, cfg.fine_tune_embeddings);
                (gather_rows(theta_src, &batch.users), gather_rows(beta_src, &batch.items))
            };
            params.zero_grads();
            let (cache, report) = forward(
                &params,
                &model_cfg,
                &theta_batch,
                &beta_batch,
                batch,
                positive_rate,
                &ForwardOverrides::default(),
            )?;
            if !report.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            let (d_theta, d_beta) =
                backward(&mut params, &model_cfg, &theta_batch, &beta_batch, batch, &cache);
            if params.free_user.is_some() {
                scatter_rows(&mut params.free_user.as_mut().unwrap().grad, &batch.users, &d_theta);
                scatter_rows(&mut params.free_item.as_mut().unwrap().grad, &batch.items, &d_beta);
            }

            for (h, (sw, sb)) in params.stored_heads_mut().into_iter().zip(&mut head_states) {
                sw.step(&mut h.weight.values, &h.grad_weight.values);
                sb.step(&mut h.bias, &h.grad_bias);
            }
            if let Some(states) = free_states.as_mut() {
                let tables = [
                    params.free_user.as_mut().unwrap(),
                    params.free_item.as_mut().unwrap(),
                ];
                for (table, state) in tables.into_iter().zip(states.iter_mut()) {
                    state.step(&mut table.values.values, &table.grad.values);
                }
            }

            rating_sum += report.rating_loss;
            exposure_sum += report.exposure_loss;
            disc_sum += report.discrepancy_loss;
            total_sum += report.total;
        }

        let measured_mse = train_mse(&params, &model_cfg, theta, beta, cfg, train_ratings, positive_rate);
        let train_mse_value = match hooks.mse_override.as_mut() {
            Some(f) => f(epoch),
            None => measured_mse,
        };
        if !train_mse_value.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        history.epochs.push(EpochRecord {
            epoch,
            rating_loss: rating_sum,
            exposure_loss: exposure_sum,
            discrepancy_loss: disc_sum,
            total: total_sum,
            train_mse: train_mse_value,
        });
        if best.as_ref().map_or(true, |(_, best_mse, _)| train_mse_value < *best_mse) {
            best = Some((epoch, train_mse_value, params.clone()));
        }
        if hooks.capture_epoch == Some(epoch) {
            hooks.captured = Some(params.clone());
        }
        if early_stop(&history.epochs, cfg.patience) {
            break;
        }
    }

    let (best_epoch, _, best_params) = match best {
        Some(b) => b,
        None => (0, f64::INFINITY, params),
    };
    Ok(TrainOutcome { params: best_params, history, positive_rate, best_epoch })
}

fn resolve_sources<'a>(
    params: &'a D2RecParams,
    theta: Option<&'a EmbeddingTable>,
    beta: Option<&'a EmbeddingTable>,
    fine_tune: bool,
) -> (&'a crate::nncore::DenseMatrix, &'a crate::nncore::DenseMatrix) {
    match (&params.free_user, &params.free_item) {
        (Some(u), Some(i)) if fine_tune || params.variant == Variant::NoNetworkEmbeddings => {
            (&u.values, &i.values)
        }
        _ => (&theta.unwrap().vectors, &beta.unwrap().vectors),
    }
}

/// Rating MSE over the train positives under the current parameters.
fn train_mse(
    params: &D2RecParams,
    model_cfg: &ModelConfig,
    theta: Option<&EmbeddingTable>,
    beta: Option<&EmbeddingTable>,
    cfg: &TrainConfig,
    train_ratings: &[Rating],
    positive_rate: f64,
) -> f64 {
    let (theta_src, beta_src) = resolve_sources(params, theta, beta, cfg.fine_tune_embeddings);
    let predictor = RatingPredictor {
        params,
        cfg: model_cfg,
        theta: theta_src,
        beta: beta_src,
        positive_rate,
        clamp_predictions: false,
    };
    let pairs: Vec<(u32, u32)> = train_ratings.iter().map(|r| (r.user, r.item)).collect();
    let yhat = predictor.predict_many(&pairs);
    let mut sum = 0.0;
    for (r, y) in train_ratings.iter().zip(&yhat) {
        sum += (r.value - y) * (r.value - y);
    }
    sum / train_ratings.len() as f64
}
