use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::loss_bce_grad;
use super::{loss_bce, Adam, EncodedBatch, ModelGraph, Tape, Tensor, WeightStore};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

/// Training hyperparameters. Defaults: Adam(1e-3), batch 128, patience 3,
/// 5% stratified holdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 50,
            patience: 3,
            holdout_fraction: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 0.5) {
            return Err(Error::InvalidConfig(
                "holdout fraction must lie in (0, 0.5)".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch size and max epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Per-epoch loss curves plus where early stopping landed (1-indexed epochs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub holdout_loss: Vec<f64>,
    pub stopped_at: usize,
    pub best_epoch: usize,
}

/// Integer-coded samples with targets in [0,1].
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    codes: Vec<u16>,
    width: usize,
    targets: Vec<f64>,
}

impl EncodedDataset {
    pub fn new(codes: Vec<u16>, width: usize, targets: Vec<f64>) -> Result<Self> {
        if codes.len() != width * targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} codes cannot form {} rows of width {width}",
                codes.len(),
                targets.len()
            )));
        }
        Ok(EncodedDataset {
            codes,
            width,
            targets,
        })
    }

    pub fn n(&self) -> usize {
        self.targets.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Replace targets (teacher-student relabeling keeps the inputs).
    pub fn with_targets(&self, targets: Vec<f64>) -> Result<Self> {
        EncodedDataset::new(self.codes.clone(), self.width, targets)
    }

    pub fn gather(&self, indices: &[usize]) -> (EncodedBatch, Vec<f64>) {
        let mut codes = Vec::with_capacity(indices.len() * self.width);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            codes.extend_from_slice(&self.codes[i * self.width..(i + 1) * self.width]);
            targets.push(self.targets[i]);
        }
        (
            EncodedBatch {
                codes,
                rows: indices.len(),
                width: self.width,
            },
            targets,
        )
    }

    pub fn full_batch(&self) -> EncodedBatch {
        EncodedBatch {
            codes: self.codes.clone(),
            rows: self.n(),
            width: self.width,
        }
    }
}

/// Pre-computed flat feature vectors with targets; used to train
/// classification heads over frozen extractors without recomputing the
/// extractor forward pass every batch.
#[derive(Debug, Clone)]
pub struct FeatureDataset {
    values: Vec<f64>,
    width: usize,
    targets: Vec<f64>,
}

impl FeatureDataset {
    pub fn new(values: Vec<f64>, width: usize, targets: Vec<f64>) -> Result<Self> {
        if values.len() != width * targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot form {} rows of width {width}",
                values.len(),
                targets.len()
            )));
        }
        Ok(FeatureDataset {
            values,
            width,
            targets,
        })
    }

    pub fn n(&self) -> usize {
        self.targets.len()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn gather(&self, indices: &[usize]) -> (Tensor, Vec<f64>) {
        let mut values = Vec::with_capacity(indices.len() * self.width);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(&self.values[i * self.width..(i + 1) * self.width]);
            targets.push(self.targets[i]);
        }
        (
            Tensor::from_vec(&[indices.len(), self.width], values).expect("gather shape"),
            targets,
        )
    }
}

/// Borrowed view over either dataset kind. The same value must be passed to
/// every call on a given [`Trainer`].
#[derive(Clone, Copy)]
pub enum DataRef<'a> {
    Codes(&'a EncodedDataset),
    Features(&'a FeatureDataset),
}

impl DataRef<'_> {
    pub fn n(&self) -> usize {
        match self {
            DataRef::Codes(d) => d.n(),
            DataRef::Features(d) => d.n(),
        }
    }

    fn target(&self, i: usize) -> f64 {
        match self {
            DataRef::Codes(d) => d.targets[i],
            DataRef::Features(d) => d.targets[i],
        }
    }
}

/// Incremental trainer: owns the model, the optimizer state, the epoch
/// shuffle stream, and a holdout split fixed at construction. [`train`] is
/// the plain run-to-early-stop loop; federated learning drives `run_epoch`
/// round by round instead.
pub struct Trainer {
    model: ModelGraph,
    adam: Adam,
    cfg: TrainConfig,
    train_idx: Vec<usize>,
    holdout_idx: Vec<usize>,
    rng: rand_chacha::ChaCha12Rng,
    epochs_run: usize,
}

impl Trainer {
    pub fn new(model: ModelGraph, data: DataRef, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = data.n();
        if n == 0 {
            return Err(Error::EmptyInput("training dataset is empty".into()));
        }
        let mut rng = seed::rng(cfg.seed);

        // Stratified holdout split, drawn once before any epoch.
        let mut pos: Vec<usize> = (0..n).filter(|&i| data.target(i) >= 0.5).collect();
        let mut neg: Vec<usize> = (0..n).filter(|&i| data.target(i) < 0.5).collect();
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let take = |v: &[usize]| ((v.len() as f64) * cfg.holdout_fraction).round() as usize;
        let (mut hp, mut hn) = (take(&pos), take(&neg));
        if hp + hn == 0 {
            if pos.len() >= neg.len() {
                hp = 1;
            } else {
                hn = 1;
            }
        }
        if hp >= pos.len() && hn >= neg.len() {
            return Err(Error::InsufficientData(
                "holdout split leaves no training samples".into(),
            ));
        }
        let mut holdout_idx: Vec<usize> = pos[..hp].iter().chain(neg[..hn].iter()).copied().collect();
        let mut train_idx: Vec<usize> = pos[hp..].iter().chain(neg[hn..].iter()).copied().collect();
        holdout_idx.sort_unstable();
        train_idx.sort_unstable();
        if holdout_idx.is_empty() {
            return Err(Error::InsufficientData(
                "holdout split is empty; need at least 1 sample".into(),
            ));
        }

        let adam = Adam::new(model.store(), cfg.learning_rate);
        Ok(Trainer {
            model,
            adam,
            cfg: cfg.clone(),
            train_idx,
            holdout_idx,
            rng,
            epochs_run: 0,
        })
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    pub fn into_model(self) -> ModelGraph {
        self.model
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }

    pub fn holdout_size(&self) -> usize {
        self.holdout_idx.len()
    }

    pub fn snapshot(&self) -> WeightStore {
        self.model.store().clone()
    }

    pub fn restore(&mut self, snapshot: &WeightStore) {
        copy_weight_values(self.model.store_mut(), snapshot);
    }

    /// Overwrite the model weights with another store's values (federated
    /// round start). Optimizer state is kept.
    pub fn set_weights(&mut self, global: &WeightStore) {
        copy_weight_values(self.model.store_mut(), global);
    }

    /// One full pass over the training split: seeded shuffle, mini-batches,
    /// one optimizer step per batch. Returns the mean train loss.
    pub fn run_epoch(&mut self, data: DataRef) -> Result<f64> {
        self.epochs_run += 1;
        let epoch = self.epochs_run;
        let mut order = self.train_idx.clone();
        order.shuffle(&mut self.rng);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_no, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let (preds, targets, tape, batch) = self.forward_chunk(data, chunk)?;
            let loss = loss_bce(&preds, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();

            let grad = Tensor::from_vec(&[chunk.len(), 1], loss_bce_grad(&preds, &targets))
                .expect("loss grad shape");
            let grads = match &batch {
                ChunkInput::Codes(b) => self.model.backward(b, &tape, &grad),
                ChunkInput::Features(f) => self.model.backward_features(f, &tape, &grad),
            };
            self.adam.apply(self.model.store_mut(), &grads);
        }
        Ok(loss_sum / seen as f64)
    }

    /// Mean BCE over the holdout split with the current weights.
    pub fn holdout_loss(&self, data: DataRef) -> Result<f64> {
        let mut preds = Vec::with_capacity(self.holdout_idx.len());
        let mut targets = Vec::with_capacity(self.holdout_idx.len());
        for chunk in self.holdout_idx.chunks(self.cfg.batch_size) {
            let (p, t) = self.predict_chunk(data, chunk)?;
            preds.extend(p);
            targets.extend(t);
        }
        loss_bce(&preds, &targets)
    }

    fn predict_chunk(&self, data: DataRef, chunk: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        match data {
            DataRef::Codes(d) => {
                let (batch, targets) = d.gather(chunk);
                Ok((self.model.forward(&batch)?, targets))
            }
            DataRef::Features(d) => {
                let (feats, targets) = d.gather(chunk);
                let out = self.model.forward_features(&feats)?;
                Ok((out.data().to_vec(), targets))
            }
        }
    }

    fn forward_chunk(
        &self,
        data: DataRef,
        chunk: &[usize],
    ) -> Result<(Vec<f64>, Vec<f64>, Tape, ChunkInput)> {
        match data {
            DataRef::Codes(d) => {
                let (batch, targets) = d.gather(chunk);
                let (out, tape) = self.model.forward_with_tape(&batch)?;
                Ok((out.data().to_vec(), targets, tape, ChunkInput::Codes(batch)))
            }
            DataRef::Features(d) => {
                let (feats, targets) = d.gather(chunk);
                let (out, tape) = self.model.forward_features_with_tape(&feats)?;
                Ok((
                    out.data().to_vec(),
                    targets,
                    tape,
                    ChunkInput::Features(feats),
                ))
            }
        }
    }
}

enum ChunkInput {
    Codes(EncodedBatch),
    Features(Tensor),
}

fn copy_weight_values(dst: &mut WeightStore, src: &WeightStore) {
    assert_eq!(dst.len(), src.len(), "weight store layout mismatch");
    for i in 0..dst.len() {
        debug_assert_eq!(dst.entry(i).name, src.entry(i).name);
        let src_data = src.entry(i).tensor.data().to_vec();
        dst.tensor_mut(i).data_mut().copy_from_slice(&src_data);
    }
}

/// Train with early stopping: stops once `patience` epochs pass without a new
/// holdout-loss minimum and returns the weights of the best epoch.
pub fn train(
    model: ModelGraph,
    data: DataRef,
    cfg: &TrainConfig,
) -> Result<(ModelGraph, TrainHistory)> {
    let mut trainer = Trainer::new(model, data, cfg)?;
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        holdout_loss: Vec::new(),
        stopped_at: 0,
        best_epoch: 0,
    };
    let mut best_loss = f64::INFINITY;
    let mut best_weights: Option<WeightStore> = None;

    for epoch in 1..=cfg.max_epochs {
        let train_loss = trainer.run_epoch(data)?;
        let holdout = trainer.holdout_loss(data)?;
        if !holdout.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
            });
        }
        history.train_loss.push(train_loss);
        history.holdout_loss.push(holdout);
        history.stopped_at = epoch;
        if holdout < best_loss {
            best_loss = holdout;
            history.best_epoch = epoch;
            best_weights = Some(trainer.snapshot());
        }
        if epoch - history.best_epoch >= cfg.patience {
            break;
        }
    }

    let snapshot = best_weights.expect("at least one epoch ran");
    trainer.restore(&snapshot);
    let model = trainer.into_model();
    debug_assert!(model.store().all_finite());
    Ok((model, history))
}
