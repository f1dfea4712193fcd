//! Experiment driver: flat key/value configuration, the evolve then
//! final-train protocol, run artifacts and the (mutation rate, generations)
//! sweep.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{default_catalog, LayerCatalog};
use crate::data::{load_idx, shuffle_split, DataError, Dataset, DatasetView, FileChecksum, TRAIN_FRACTION};
use crate::dot::to_dot;
use crate::evolution::{
    budget, derive_seed, evolve, BoxError, BudgetSpec, EvolutionConfig, EvolutionError, EvolutionObserver, FitnessRecord,
    MutationKind,
};
use crate::genome::{active_nodes, decode, CgpParams, Genome, GenomeError};
use crate::trainer::{evaluate, evaluate_fitness, train_with_log, EvalSettings, Monitor, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error("final training repeat {repeat}: {source}")]
    Training {
        repeat: usize,
        #[source]
        source: TrainError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl ExperimentError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentError::Config { .. } | ExperimentError::InvalidConfig(_) => "config",
            ExperimentError::Io { .. } => "io",
            ExperimentError::Data(_) => "data",
            ExperimentError::Genome(_) => "genome",
            ExperimentError::Evolution(_) => "evolution",
            ExperimentError::Training { .. } => "training",
            ExperimentError::Json { .. } => "json",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub name: String,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

/// Every knob of a run. Defaults are the full-scale protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub cols: usize,
    pub levels_back: usize,
    pub mutation_rate: f64,
    pub generations: usize,
    pub eval_epochs: usize,
    pub train_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub stagnation_threshold: usize,
    pub seed: u64,
    pub eval_records: usize,
    pub eval_train_fraction: f64,
    pub final_repeats: usize,
    /// Cap on final-training records per repeat; 0 keeps the whole split.
    pub final_train_limit: usize,
    /// Cap on test records; 0 keeps all.
    pub final_test_limit: usize,
    pub monitor: Monitor,
    pub mutation: MutationKind,
    pub mutation_retry_cap: usize,
    pub offspring_per_generation: usize,
    /// Draw a fresh evaluation pool every generation instead of once per run.
    pub resample_pool: bool,
    pub sweep_mutation_rates: Vec<f64>,
    pub sweep_generations: Vec<usize>,
    pub datasets: Vec<DatasetPaths>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cgp = CgpParams::standard(0.1, 10);
        Self {
            cols: cgp.cols,
            levels_back: cgp.levels_back,
            mutation_rate: cgp.mutation_rate,
            generations: cgp.generations,
            eval_epochs: TrainConfig::EVAL_EPOCHS,
            train_epochs: TrainConfig::FINAL_EPOCHS,
            patience: TrainConfig::PATIENCE,
            batch_size: TrainConfig::DEFAULT_BATCH_SIZE,
            learning_rate: TrainConfig::DEFAULT_LEARNING_RATE,
            stagnation_threshold: EvolutionConfig::STAGNATION_THRESHOLD,
            seed: 0,
            eval_records: EvalSettings::RECORDS,
            eval_train_fraction: EvalSettings::TRAIN_FRACTION,
            final_repeats: 10,
            final_train_limit: 0,
            final_test_limit: 0,
            monitor: Monitor::TrainingLoss,
            mutation: MutationKind::Point,
            mutation_retry_cap: EvolutionConfig::MUTATION_RETRY_CAP,
            offspring_per_generation: EvolutionConfig::OFFSPRING,
            resample_pool: false,
            sweep_mutation_rates: CgpParams::STANDARD_MUTATION_RATES.to_vec(),
            sweep_generations: CgpParams::STANDARD_GENERATIONS.to_vec(),
            datasets: Vec::new(),
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

const DATASET_KEYS: [&str; 4] = ["train_images", "train_labels", "test_images", "test_labels"];

fn default_dataset_name(train_images: &Path) -> String {
    train_images
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Relative dataset
    /// paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ExperimentError> {
        let mut cfg = RunConfig::default();
        let mut paths: BTreeMap<String, BTreeMap<&'static str, PathBuf>> = BTreeMap::new();
        let mut dataset_order: Option<Vec<String>> = None;
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            match base_dir {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ExperimentError::Config {
                line: line_no,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            macro_rules! num {
                () => {
                    value.parse().map_err(|e| err(format!("bad value for `{key}`: {e}")))?
                };
            }
            match key {
                "cgp.rows" => {
                    let rows: usize = num!();
                    if rows != 1 {
                        return Err(err("only cgp.rows = 1 is supported".into()));
                    }
                }
                "cgp.cols" => cfg.cols = num!(),
                "cgp.levels_back" => cfg.levels_back = num!(),
                "mutation_rate" => cfg.mutation_rate = num!(),
                "generations" => cfg.generations = num!(),
                "eval_epochs" => cfg.eval_epochs = num!(),
                "train_epochs" => cfg.train_epochs = num!(),
                "patience" => cfg.patience = num!(),
                "batch_size" => cfg.batch_size = num!(),
                "learning_rate" => cfg.learning_rate = num!(),
                "stagnation_threshold" => cfg.stagnation_threshold = num!(),
                "seed" => cfg.seed = num!(),
                "eval_records" => cfg.eval_records = num!(),
                "eval_train_fraction" => cfg.eval_train_fraction = num!(),
                "final_repeats" => cfg.final_repeats = num!(),
                "final_train_limit" => cfg.final_train_limit = num!(),
                "final_test_limit" => cfg.final_test_limit = num!(),
                "monitor" => cfg.monitor = value.parse().map_err(err)?,
                "mutation" => {
                    let keep_len = match cfg.mutation {
                        MutationKind::Segment { len } => Some(len),
                        _ => None,
                    };
                    cfg.mutation = value.parse().map_err(err)?;
                    if let (MutationKind::Segment { len }, Some(k)) = (&mut cfg.mutation, keep_len) {
                        *len = k;
                    }
                }
                "segment_len" => {
                    let n: usize = num!();
                    cfg.mutation = MutationKind::Segment { len: n };
                }
                "mutation_retry_cap" => cfg.mutation_retry_cap = num!(),
                "offspring_per_generation" => cfg.offspring_per_generation = num!(),
                "resample_pool" => cfg.resample_pool = num!(),
                "sweep.mutation_rates" => cfg.sweep_mutation_rates = parse_list(value).map_err(err)?,
                "sweep.generations" => cfg.sweep_generations = parse_list(value).map_err(err)?,
                "datasets" => dataset_order = Some(parse_list(value).map_err(err)?),
                _ => {
                    let (ds, field) = match key.rsplit_once('.') {
                        Some((ds, f)) => (ds.to_string(), f),
                        None => (String::new(), key),
                    };
                    let field = DATASET_KEYS
                        .iter()
                        .find(|k| **k == field)
                        .ok_or_else(|| err(format!("unknown key `{key}`")))?;
                    paths.entry(ds).or_default().insert(field, resolve(value));
                }
            }
        }
        let names: Vec<String> = match dataset_order {
            Some(order) => order,
            None => paths.keys().cloned().collect(),
        };
        for name in names {
            let mut fields = paths
                .remove(&name)
                .ok_or_else(|| ExperimentError::InvalidConfig(format!("dataset `{name}` has no paths")))?;
            let mut need = |k: &str| {
                fields
                    .remove(k)
                    .ok_or_else(|| ExperimentError::InvalidConfig(format!("dataset `{name}` is missing `{k}`")))
            };
            let train_images = need("train_images")?;
            let train_labels = need("train_labels")?;
            let test_images = fields.remove("test_images");
            let test_labels = fields.remove("test_labels");
            if test_images.is_some() != test_labels.is_some() {
                return Err(ExperimentError::InvalidConfig(format!(
                    "dataset `{name}`: test_images and test_labels go together"
                )));
            }
            let name = if name.is_empty() {
                default_dataset_name(&train_images)
            } else {
                name
            };
            cfg.datasets.push(DatasetPaths {
                name,
                train_images,
                train_labels,
                test_images,
                test_labels,
            });
        }
        if let Some(extra) = paths.keys().next() {
            return Err(ExperimentError::InvalidConfig(format!(
                "dataset `{extra}` is not listed in `datasets`"
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path.parent())
    }

    /// Canonical key/value form; parses back to an equal config.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("cgp.rows", "1".into());
        kv("cgp.cols", self.cols.to_string());
        kv("cgp.levels_back", self.levels_back.to_string());
        kv("mutation_rate", self.mutation_rate.to_string());
        kv("generations", self.generations.to_string());
        kv("eval_epochs", self.eval_epochs.to_string());
        kv("train_epochs", self.train_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("stagnation_threshold", self.stagnation_threshold.to_string());
        kv("seed", self.seed.to_string());
        kv("eval_records", self.eval_records.to_string());
        kv("eval_train_fraction", self.eval_train_fraction.to_string());
        kv("final_repeats", self.final_repeats.to_string());
        kv("final_train_limit", self.final_train_limit.to_string());
        kv("final_test_limit", self.final_test_limit.to_string());
        kv(
            "monitor",
            match self.monitor {
                Monitor::TrainingLoss => "training_loss",
                Monitor::ValidationLoss => "validation_loss",
            }
            .into(),
        );
        kv("mutation", self.mutation.to_string());
        if let MutationKind::Segment { len } = self.mutation {
            kv("segment_len", len.to_string());
        }
        kv("mutation_retry_cap", self.mutation_retry_cap.to_string());
        kv("offspring_per_generation", self.offspring_per_generation.to_string());
        kv("resample_pool", self.resample_pool.to_string());
        kv("sweep.mutation_rates", join(&self.sweep_mutation_rates));
        kv("sweep.generations", join(&self.sweep_generations));
        if !self.datasets.is_empty() {
            kv("datasets", join(&self.datasets.iter().map(|d| d.name.clone()).collect::<Vec<_>>()));
        }
        for d in &self.datasets {
            kv(&format!("{}.train_images", d.name), d.train_images.display().to_string());
            kv(&format!("{}.train_labels", d.name), d.train_labels.display().to_string());
            if let (Some(i), Some(l)) = (&d.test_images, &d.test_labels) {
                kv(&format!("{}.test_images", d.name), i.display().to_string());
                kv(&format!("{}.test_labels", d.name), l.display().to_string());
            }
        }
        out
    }

    pub fn cgp(&self) -> CgpParams {
        CgpParams {
            rows: 1,
            cols: self.cols,
            levels_back: self.levels_back,
            mutation_rate: self.mutation_rate,
            generations: self.generations,
        }
    }

    pub fn budget_spec(&self) -> BudgetSpec {
        BudgetSpec::new(1, self.generations as u64, self.eval_epochs as u64, self.train_epochs as u64)
    }

    pub fn evolution(&self) -> EvolutionConfig {
        EvolutionConfig {
            cgp: self.cgp(),
            budget: self.budget_spec(),
            stagnation_threshold: self.stagnation_threshold,
            offspring_per_generation: self.offspring_per_generation,
            mutation_retry_cap: self.mutation_retry_cap,
            mutation: self.mutation,
            seed: self.seed,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            records: self.eval_records,
            train_fraction: self.eval_train_fraction,
            train: TrainConfig {
                epochs: self.eval_epochs,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
                patience: self.patience,
                seed: 0,
                monitor: self.monitor,
            },
        }
    }

    pub fn final_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            patience: self.patience,
            seed,
            monitor: self.monitor,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::InvalidConfig(m.into()));
        self.cgp().validate()?;
        self.evolution().validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.eval_epochs == 0 || self.train_epochs == 0 {
            return bad("eval_epochs and train_epochs must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.eval_train_fraction > 0.0 && self.eval_train_fraction < 1.0) {
            return bad("eval_train_fraction must lie strictly between 0 and 1");
        }
        let (t, v) = self.eval_settings().split_sizes();
        if t == 0 || v == 0 {
            return bad("eval_records too small for a train/validation split");
        }
        if self.final_repeats == 0 {
            return bad("final_repeats must be at least 1");
        }
        if self.sweep_mutation_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("sweep.mutation_rates must lie in [0, 1]");
        }
        if self.sweep_generations.contains(&0) {
            return bad("sweep.generations must be positive");
        }
        Ok(())
    }

    fn dataset(&self) -> Result<&DatasetPaths, ExperimentError> {
        match self.datasets.as_slice() {
            [d] => Ok(d),
            [] => Err(ExperimentError::InvalidConfig("no dataset paths given".into())),
            _ => Err(ExperimentError::InvalidConfig(
                "a single run takes exactly one dataset; multiple datasets are for sweeps".into(),
            )),
        }
    }
}

/// Training file plus optional held-out test file.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub name: String,
    pub train: Arc<Dataset>,
    pub test: Option<Arc<Dataset>>,
}

impl LoadedData {
    pub fn load(paths: &DatasetPaths) -> Result<Self, ExperimentError> {
        let train = Arc::new(load_idx(&paths.train_images, &paths.train_labels)?);
        let test = match (&paths.test_images, &paths.test_labels) {
            (Some(i), Some(l)) => Some(Arc::new(load_idx(i, l)?)),
            _ => None,
        };
        Ok(Self {
            name: paths.name.clone(),
            train,
            test,
        })
    }

    pub fn checksums(&self) -> Vec<FileChecksum> {
        let mut c = self.train.checksums().to_vec();
        if let Some(t) = &self.test {
            c.extend_from_slice(t.checksums());
        }
        c
    }
}

const MASTER_SPLIT_STREAM: u64 = 0x5EED_0001;
const POOL_STREAM: u64 = 0x5EED_0002;
const FINAL_STREAM: u64 = 0x5EED_0003;

/// Candidates are scored on records from the training part of the master
/// 80/20 split of the training file.
pub fn evaluation_pool(cfg: &RunConfig, data: &LoadedData) -> DatasetView {
    shuffle_split(&data.train, TRAIN_FRACTION, derive_seed(cfg.seed, MASTER_SPLIT_STREAM)).train
}

/// Writes `history.csv` rows and `best.genome` as the loop advances.
struct ArtifactWriter<'a> {
    dir: &'a Path,
    catalog: &'a LayerCatalog,
    history: BufWriter<File>,
}

impl<'a> ArtifactWriter<'a> {
    fn new(dir: &'a Path, catalog: &'a LayerCatalog) -> Result<Self, ExperimentError> {
        let path = dir.join("history.csv");
        let mut history = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        writeln!(history, "{}", FitnessRecord::CSV_HEADER).map_err(io_err(&path))?;
        history.flush().map_err(io_err(&path))?;
        Ok(Self { dir, catalog, history })
    }
}

impl EvolutionObserver for ArtifactWriter<'_> {
    fn on_improvement(&mut self, genome: &Genome, _fitness: f64) -> Result<(), BoxError> {
        let tmp = self.dir.join("best.genome.tmp");
        fs::write(&tmp, genome.to_text(self.catalog))?;
        fs::rename(&tmp, self.dir.join("best.genome"))?;
        Ok(())
    }

    fn on_generation(&mut self, record: &FitnessRecord, _parent: &Genome) -> Result<(), BoxError> {
        writeln!(self.history, "{}", record.csv_row())?;
        self.history.flush()?;
        Ok(())
    }
}

/// Result of the search phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolveSummary {
    pub budget: u64,
    pub history: Vec<FitnessRecord>,
    pub initial_fitness: f64,
    pub best_fitness: f64,
    pub best_genome: String,
    pub best_active_nodes: usize,
    pub best_shape_trace: String,
    pub seconds: f64,
}

/// Runs the search; with `out_dir`, streams `history.csv` and `best.genome`
/// and finishes with `best.dot`.
pub fn evolve_phase(
    cfg: &RunConfig,
    data: &LoadedData,
    catalog: &LayerCatalog,
    out_dir: Option<&Path>,
) -> Result<(Genome, EvolveSummary), ExperimentError> {
    let start = Instant::now();
    let evo = cfg.evolution();
    let budget = budget(&evo.budget)?;
    let pool = evaluation_pool(cfg, data);
    let settings = cfg.eval_settings();
    let fixed_split_seed = derive_seed(cfg.seed, POOL_STREAM);
    let resample = cfg.resample_pool;
    let evaluator = |g: &Genome, seed: u64| -> Result<f64, BoxError> {
        let split_seed = if resample { derive_seed(seed, POOL_STREAM) } else { fixed_split_seed };
        Ok(evaluate_fitness(g, catalog, &pool, &settings, split_seed, seed)?)
    };
    let input_shape = data.train.sample_shape();
    let outcome = match out_dir {
        Some(dir) => {
            let mut writer = ArtifactWriter::new(dir, catalog)?;
            evolve(&evo, catalog, &input_shape, &evaluator, &mut writer)?
        }
        None => evolve(&evo, catalog, &input_shape, &evaluator, &mut ())?,
    };
    let phenotype = decode(&outcome.best, catalog);
    let summary = EvolveSummary {
        budget,
        history: outcome.history,
        initial_fitness: outcome.initial_fitness,
        best_fitness: outcome.best_fitness,
        best_genome: outcome.best.to_text(catalog),
        best_active_nodes: active_nodes(&outcome.best).len(),
        best_shape_trace: crate::shapecheck::explain(&phenotype, &input_shape),
        seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        write_file(&dir.join("best.dot"), &to_dot(&outcome.best, catalog, &input_shape, false))?;
    }
    Ok((outcome.best, summary))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalRun {
    pub repeat: usize,
    pub seed: u64,
    pub train_records: usize,
    pub test_records: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub runs: Vec<FinalRun>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single repeat.
    pub std: f64,
    pub param_count: usize,
    pub seconds: f64,
}

pub fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains `genome` from scratch `final_repeats` times. Each repeat reshuffles
/// the training file 80/20 with its own seed; accuracy is measured on the
/// test file when given, else on the 20% part.
pub fn train_phase(
    cfg: &RunConfig,
    data: &LoadedData,
    catalog: &LayerCatalog,
    genome: &Genome,
    out_dir: Option<&Path>,
) -> Result<TrainSummary, ExperimentError> {
    let start = Instant::now();
    let phenotype = decode(genome, catalog);
    let cap = |v: DatasetView, limit: usize| if limit == 0 { v } else { v.take(limit) };
    let mut log = match out_dir {
        Some(dir) => {
            let path = dir.join("train_log.csv");
            let mut f = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
            writeln!(f, "repeat,epoch,train_loss").map_err(io_err(&path))?;
            Some((path, f))
        }
        None => None,
    };
    let mut runs = Vec::with_capacity(cfg.final_repeats);
    let mut param_count = 0;
    for repeat in 0..cfg.final_repeats {
        let seed = derive_seed(cfg.seed, FINAL_STREAM + repeat as u64);
        let split = shuffle_split(&data.train, TRAIN_FRACTION, seed);
        let train_view = cap(split.train, cfg.final_train_limit);
        let val_view = cap(split.test, cfg.final_test_limit);
        let test_view = match &data.test {
            Some(t) => cap(t.full_view(), cfg.final_test_limit),
            None => val_view.clone(),
        };
        let mut io_failure = None;
        let result = train_with_log::<f32>(
            &phenotype,
            &train_view,
            &val_view,
            &cfg.final_train_config(seed),
            |epoch, loss| {
                if let Some((path, f)) = log.as_mut() {
                    if let Err(e) = writeln!(f, "{repeat},{epoch},{loss}").and_then(|_| f.flush()) {
                        io_failure.get_or_insert((path.clone(), e));
                    }
                }
            },
        );
        if let Some((path, source)) = io_failure {
            return Err(ExperimentError::Io { path, source });
        }
        let result = result.map_err(|source| ExperimentError::Training { repeat, source })?;
        let (_, test_accuracy) =
            evaluate(&result.network, &test_view).map_err(|source| ExperimentError::Training { repeat, source })?;
        param_count = result.network.param_count();
        if repeat == 0 {
            if let Some(dir) = out_dir {
                let (blob, manifest) = (dir.join("best.params"), dir.join("best.manifest"));
                result.network.save_params(&blob, &manifest).map_err(io_err(&blob))?;
            }
        }
        runs.push(FinalRun {
            repeat,
            seed,
            train_records: train_view.len(),
            test_records: test_view.len(),
            epochs_run: result.epoch_losses.len(),
            best_epoch: result.best_epoch,
            final_train_loss: result.epoch_losses.last().copied().unwrap_or(f64::NAN),
            test_accuracy,
        });
    }
    let accuracies: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (mean, std) = mean_and_sample_std(&accuracies);
    Ok(TrainSummary {
        runs,
        accuracies,
        mean,
        std,
        param_count,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Wall-clock figures, kept apart so reports compare equal across reruns.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WallClock {
    pub evolve_seconds: f64,
    pub train_seconds: f64,
    pub total_seconds: f64,
}

/// Fixed protocol choices recorded with every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolNotes {
    pub optimizer: String,
    pub normalization: String,
    pub spread: String,
    pub early_stopping: String,
    pub final_split: String,
}

impl ProtocolNotes {
    pub fn for_config(cfg: &RunConfig) -> Self {
        Self {
            optimizer: format!(
                "adam lr={} beta1=0.9 beta2=0.999 eps=1e-8 batch_size={}",
                cfg.learning_rate, cfg.batch_size
            ),
            normalization: "pixel / 255, no centering".into(),
            spread: "sample standard deviation (n - 1)".into(),
            early_stopping: format!(
                "monitor={} patience={} strict improvement, best weights restored",
                match cfg.monitor {
                    Monitor::TrainingLoss => "training_loss",
                    Monitor::ValidationLoss => "validation_loss",
                },
                cfg.patience
            ),
            final_split: "fresh 80/20 shuffle of the training file per repeat; test file when given".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub config: RunConfig,
    pub protocol: ProtocolNotes,
    pub catalog: String,
    pub checksums: Vec<FileChecksum>,
    pub budget: u64,
    pub evolution: EvolveSummary,
    pub final_training: TrainSummary,
    pub final_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub wall_clock: WallClock,
}

impl RunReport {
    /// Copy with every wall-clock field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_clock = WallClock::default();
        r.evolution.seconds = 0.0;
        r.final_training.seconds = 0.0;
        r
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| ExperimentError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_file(path, &(text + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn prepare_run_dir(cfg: &RunConfig, catalog: &LayerCatalog, dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("config.txt"), &cfg.to_kv())?;
    write_file(&dir.join("catalog.txt"), &catalog.to_text())
}

/// Full protocol for a single dataset: search, then repeated final training.
pub fn run_experiment(cfg: &RunConfig, catalog: &LayerCatalog, out_dir: &Path) -> Result<RunReport, ExperimentError> {
    let start = Instant::now();
    cfg.validate()?;
    prepare_run_dir(cfg, catalog, out_dir)?;
    let data = LoadedData::load(cfg.dataset()?)?;
    let (best, evolution) = evolve_phase(cfg, &data, catalog, Some(out_dir))?;
    write_json(&out_dir.join("evolve.json"), &evolution)?;
    let final_training = train_phase(cfg, &data, catalog, &best, Some(out_dir))?;
    let report = RunReport {
        dataset: data.name.clone(),
        config: cfg.clone(),
        protocol: ProtocolNotes::for_config(cfg),
        catalog: catalog.to_text(),
        checksums: data.checksums(),
        budget: evolution.budget,
        final_accuracies: final_training.accuracies.clone(),
        mean_accuracy: final_training.mean,
        std_accuracy: final_training.std,
        wall_clock: WallClock {
            evolve_seconds: evolution.seconds,
            train_seconds: final_training.seconds,
            total_seconds: start.elapsed().as_secs_f64(),
        },
        evolution,
        final_training,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// [`run_experiment`] reading the config from a file and using the default catalog.
pub fn run_experiment_file(config_path: &Path, out_dir: &Path) -> Result<RunReport, ExperimentError> {
    let cfg = RunConfig::from_file(config_path)?;
    run_experiment(&cfg, &default_catalog(), out_dir)
}

/// One (dataset, mutation rate, generations) cell of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub dataset: String,
    pub mutation_rate: f64,
    pub generations: usize,
    pub budget: u64,
    pub dir: PathBuf,
    pub outcome: Result<CellResult, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub datasets: Vec<String>,
    pub cells: Vec<SweepCell>,
}

fn format_budget(b: u64) -> String {
    if b.is_multiple_of(1000) {
        format!("{}K", b / 1000)
    } else if b >= 1000 {
        format!("{}K", b as f64 / 1000.0)
    } else {
        b.to_string()
    }
}

impl SweepSummary {
    /// Rows of budget x mutation rate, one mean/std/status column triple per dataset.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("budget,budget_label,mutation_rate,generations");
        for d in &self.datasets {
            out.push_str(&format!(",{d}_mean,{d}_std,{d}_status"));
        }
        out.push('\n');
        let mut keys: Vec<(u64, usize, f64)> = Vec::new();
        for c in &self.cells {
            if !keys.iter().any(|k| k.1 == c.generations && k.2 == c.mutation_rate) {
                keys.push((c.budget, c.generations, c.mutation_rate));
            }
        }
        for (budget, generations, rate) in keys {
            out.push_str(&format!("{budget},{},{rate},{generations}", format_budget(budget)));
            for d in &self.datasets {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| &c.dataset == d && c.generations == generations && c.mutation_rate == rate);
                match cell.map(|c| &c.outcome) {
                    Some(Ok(r)) => out.push_str(&format!(",{},{},ok", r.mean, r.std)),
                    Some(Err(e)) => out.push_str(&format!(",,,failed: {}", e.replace([',', '\n'], ";"))),
                    None => out.push_str(",,,missing"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every (dataset, generations, mutation rate) cell, at most `jobs` at
/// a time, each in its own directory under `out_dir`. Failed cells are
/// recorded and the sweep continues.
pub fn sweep(cfg: &RunConfig, catalog: &LayerCatalog, out_dir: &Path, jobs: usize) -> Result<SweepSummary, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut plan = Vec::new();
    for d in &cfg.datasets {
        for &g in &cfg.sweep_generations {
            for &mr in &cfg.sweep_mutation_rates {
                let mut cell = cfg.clone();
                cell.generations = g;
                cell.mutation_rate = mr;
                cell.datasets = vec![d.clone()];
                let dir = out_dir.join(format!("{}_g{}_mr{}", d.name, g, mr));
                plan.push(cell_stub(&cell, &d.name, dir));
            }
        }
    }
    let results: Vec<Mutex<Option<SweepCell>>> = plan.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(plan.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((cell_cfg, stub)) = plan.get(i) else { break };
                let outcome = run_experiment(cell_cfg, catalog, &stub.dir)
                    .map(|r| CellResult {
                        accuracies: r.final_accuracies,
                        mean: r.mean_accuracy,
                        std: r.std_accuracy,
                    })
                    .map_err(|e| e.to_string());
                *results[i].lock().expect("no poisoning") = Some(SweepCell {
                    outcome,
                    ..stub.clone()
                });
            });
        }
    });
    let summary = SweepSummary {
        datasets: cfg.datasets.iter().map(|d| d.name.clone()).collect(),
        cells: results
            .into_iter()
            .map(|m| m.into_inner().expect("no poisoning").expect("every cell ran"))
            .collect(),
    };
    write_file(&out_dir.join("summary.csv"), &summary.to_csv())?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn cell_stub(cell: &RunConfig, dataset: &str, dir: PathBuf) -> (RunConfig, SweepCell) {
    let budget = budget(&cell.budget_spec()).unwrap_or(0);
    (
        cell.clone(),
        SweepCell {
            dataset: dataset.to_string(),
            mutation_rate: cell.mutation_rate,
            generations: cell.generations,
            budget,
            dir,
            outcome: Err("not run".into()),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_standard_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.cols, c.levels_back, c.eval_epochs, c.train_epochs, c.patience), (30, 10, 25, 100, 10));
        assert_eq!(budget(&c.budget_spec()).unwrap(), 25_000);
        assert_eq!(c.final_repeats, 10);
    }

    #[test]
    fn kv_round_trip() {
        let text = "cgp.cols = 12\nmutation_rate=0.05 # comment\ngenerations = 3\nmutation = segment\nsegment_len = 4\n\
                    train_images = data/mnist/train-images\ntrain_labels = data/mnist/train-labels\n";
        let c = RunConfig::parse(text, Some(Path::new("/base"))).unwrap();
        assert_eq!(c.cols, 12);
        assert_eq!(c.mutation, MutationKind::Segment { len: 4 });
        assert_eq!(c.datasets[0].name, "mnist");
        assert_eq!(c.datasets[0].train_images, PathBuf::from("/base/data/mnist/train-images"));
        assert_eq!(RunConfig::parse(&c.to_kv(), None).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        match RunConfig::parse("seed = 1\nwarp_drive = on\n", None) {
            Err(ExperimentError::Config { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_and_sample_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_and_sample_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn budget_labels() {
        assert_eq!(format_budget(25_000), "25K");
        assert_eq!(format_budget(62_500), "62.5K");
        assert_eq!(format_budget(125_000), "125K");
    }

    #[test]
    fn empty_sweep_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.sweep_generations.clear();
        let s = sweep(&cfg, &default_catalog(), dir.path(), 2).unwrap();
        assert!(s.cells.is_empty());
        let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
    }
}
