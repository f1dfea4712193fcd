use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Mode, Network, ParamBlock};
use super::optim::Adam;
use super::TrainError;
use crate::catalog::LayerCatalog;
use crate::data::{sample_eval_pool, DatasetView};
use crate::genome::{decode, Genome, Phenotype};
use crate::scalar::Scalar;

/// Which loss series early stopping watches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    TrainingLoss,
    ValidationLoss,
}

impl std::str::FromStr for Monitor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "training_loss" | "train" => Ok(Monitor::TrainingLoss),
            "validation_loss" | "val" => Ok(Monitor::ValidationLoss),
            other => Err(format!("unknown monitor `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
    pub monitor: Monitor,
}

impl TrainConfig {
    pub const DEFAULT_BATCH_SIZE: usize = 32;
    pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
    pub const PATIENCE: usize = 10;
    pub const EVAL_EPOCHS: usize = 25;
    pub const FINAL_EPOCHS: usize = 100;

    /// Short training used to score a candidate.
    pub fn fitness_eval(seed: u64) -> Self {
        Self {
            epochs: Self::EVAL_EPOCHS,
            batch_size: Self::DEFAULT_BATCH_SIZE,
            learning_rate: Self::DEFAULT_LEARNING_RATE,
            patience: Self::PATIENCE,
            seed,
            monitor: Monitor::TrainingLoss,
        }
    }

    /// Full training of the selected architecture.
    pub fn final_training(seed: u64) -> Self {
        Self {
            epochs: Self::FINAL_EPOCHS,
            ..Self::fitness_eval(seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Waiting,
    Stop,
}

/// Stops once the monitored loss has failed to strictly improve for
/// `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            wait: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            return Verdict::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Waiting
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult<S> {
    /// Network holding the parameters of the best monitored epoch.
    pub network: Network<S>,
    pub epoch_losses: Vec<f64>,
    /// Filled only when validation loss is monitored.
    pub val_losses: Vec<f64>,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub stopped_early_at: Option<usize>,
}

const EVAL_BATCH: usize = 128;

/// Inference-mode mean loss and accuracy over a view.
pub fn evaluate<S: Scalar>(net: &Network<S>, view: &DatasetView) -> Result<(f64, f64), TrainError> {
    if view.is_empty() {
        return Err(TrainError::EmptyData("evaluation"));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let positions: Vec<usize> = (0..view.len()).collect();
    for chunk in positions.chunks(EVAL_BATCH) {
        let (x, labels) = view.gather::<S>(chunk);
        let probs = net.predict(x)?;
        let classes = probs.shape().numel();
        for (row, (&y, pred)) in probs
            .data()
            .chunks(classes)
            .zip(labels.iter().zip(probs.argmax_rows()))
        {
            if pred == y {
                correct += 1;
            }
            loss_sum -= row[y].to_f64_lossy().max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok((loss_sum / view.len() as f64, correct as f64 / view.len() as f64))
}

/// Mini-batch Adam training with early stopping; the returned network holds
/// the parameters of the best monitored epoch.
pub fn train<S: Scalar>(
    p: &Phenotype,
    train: &DatasetView,
    val: &DatasetView,
    cfg: &TrainConfig,
) -> Result<TrainResult<S>, TrainError> {
    train_with_log(p, train, val, cfg, |_, _| {})
}

/// [`train`] with a per-epoch callback receiving `(epoch, training_loss)`.
pub fn train_with_log<S: Scalar>(
    p: &Phenotype,
    train: &DatasetView,
    val: &DatasetView,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainResult<S>, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    let batch_size = cfg.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::<S>::build(p, train.sample_shape(), &mut rng)?;
    let mut opt = Adam::new(cfg.learning_rate, net.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<Vec<ParamBlock<S>>> = None;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut val_losses = Vec::new();
    let mut stopped_early_at = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let (x, labels) = train.gather::<S>(chunk);
            let pass = net.forward(x, Mode::Train, &mut rng)?;
            let (loss, grads) = net.backward(&pass, &labels, false)?;
            net.update_running_stats(&pass);
            opt.step(net.params_mut(), &grads.params);
            total += loss * chunk.len() as f64;
        }
        let epoch_loss = total / train.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(epoch_loss));
        }
        epoch_losses.push(epoch_loss);
        on_epoch(epoch, epoch_loss);
        let monitored = match cfg.monitor {
            Monitor::TrainingLoss => epoch_loss,
            Monitor::ValidationLoss => {
                let (l, _) = evaluate(&net, val)?;
                val_losses.push(l);
                l
            }
        };
        match stopper.observe(epoch, monitored) {
            Verdict::Improved => best = Some(net.params().to_vec()),
            Verdict::Waiting => {}
            Verdict::Stop => {
                stopped_early_at = Some(epoch);
                break;
            }
        }
    }
    if let Some(params) = best {
        net.params_mut().clone_from_slice(&params);
    }
    let (_, val_accuracy) = evaluate(&net, val)?;
    Ok(TrainResult {
        network: net,
        epoch_losses,
        val_losses,
        val_accuracy,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        stopped_early_at,
    })
}

/// Candidate-scoring protocol: a seeded draw of `records` from the pool, split
/// `train_fraction` / rest, trained for `train.epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub records: usize,
    pub train_fraction: f64,
    pub train: TrainConfig,
}

impl EvalSettings {
    pub const RECORDS: usize = 1000;
    pub const TRAIN_FRACTION: f64 = 0.7;

    pub fn standard(seed: u64) -> Self {
        Self {
            records: Self::RECORDS,
            train_fraction: Self::TRAIN_FRACTION,
            train: TrainConfig::fitness_eval(seed),
        }
    }

    /// `(train, validation)` sizes of one evaluation draw.
    pub fn split_sizes(&self) -> (usize, usize) {
        let n_train = (self.records as f64 * self.train_fraction).round() as usize;
        (n_train, self.records - n_train)
    }
}

/// The evaluation draw for `split_seed`: disjoint training and validation views.
pub fn fitness_split(pool: &DatasetView, settings: &EvalSettings, split_seed: u64) -> Result<(DatasetView, DatasetView), TrainError> {
    let draw = sample_eval_pool(pool, settings.records, split_seed)?;
    let (n_train, _) = settings.split_sizes();
    Ok((draw.slice(0..n_train), draw.slice(n_train..draw.len())))
}

/// Validation accuracy after a short training run; networks whose loss
/// diverges score 0.
pub fn evaluate_fitness(
    g: &Genome,
    catalog: &LayerCatalog,
    pool: &DatasetView,
    settings: &EvalSettings,
    split_seed: u64,
    train_seed: u64,
) -> Result<f64, TrainError> {
    let (train_view, val_view) = fitness_split(pool, settings, split_seed)?;
    let phenotype = decode(g, catalog);
    let cfg = TrainConfig {
        seed: train_seed,
        ..settings.train.clone()
    };
    match train::<f32>(&phenotype, &train_view, &val_view, &cfg) {
        Ok(r) => Ok(r.val_accuracy),
        Err(TrainError::NonFiniteLoss(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}
