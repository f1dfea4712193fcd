//! Mutation operators and the (1 + 2) evolution loop.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::LayerCatalog;
use crate::genome::{active_nodes, decode, random_genome, random_node, CgpParams, Genome, GenomeError, NodeGene, INPUT_TERMINAL};
use crate::shapecheck::{compile, TensorShape};

pub type BoxError = Box<dyn std::error::Error + Send + Sync + 'static>;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("budget fields must all be at least 1: {0:?}")]
    InvalidBudget(BudgetSpec),
    #[error("budget {0:?} overflows a 64-bit count")]
    BudgetOverflow(BudgetSpec),
    #[error("segment of {len} nodes does not fit a grid of {cols} columns")]
    SegmentTooLong { len: usize, cols: usize },
    #[error("no valid offspring after {0} draws")]
    MutationExhausted(usize),
    #[error("invalid evolution config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error("generation {generation}, offspring {offspring:?}: fitness evaluation failed: {source}")]
    Evaluator {
        generation: usize,
        offspring: Option<usize>,
        #[source]
        source: BoxError,
    },
}

/// Population, generations, evaluation epochs and final training epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub population: u64,
    pub generations: u64,
    pub eval_epochs: u64,
    pub train_epochs: u64,
}

impl BudgetSpec {
    pub const STANDARD_EVAL_EPOCHS: u64 = 25;
    pub const STANDARD_TRAIN_EPOCHS: u64 = 100;

    pub fn new(population: u64, generations: u64, eval_epochs: u64, train_epochs: u64) -> Self {
        Self {
            population,
            generations,
            eval_epochs,
            train_epochs,
        }
    }

    pub fn standard(generations: u64) -> Self {
        Self::new(1, generations, Self::STANDARD_EVAL_EPOCHS, Self::STANDARD_TRAIN_EPOCHS)
    }

    pub fn budget(&self) -> Result<u64, EvolutionError> {
        budget(self)
    }
}

/// `P * G * E * T`, checked.
pub fn budget(spec: &BudgetSpec) -> Result<u64, EvolutionError> {
    let fields = [spec.population, spec.generations, spec.eval_epochs, spec.train_epochs];
    if fields.contains(&0) {
        return Err(EvolutionError::InvalidBudget(*spec));
    }
    fields
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or(EvolutionError::BudgetOverflow(*spec))
}

/// Operator used to create offspring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MutationKind {
    Point,
    Gene,
    Segment { len: usize },
}

impl MutationKind {
    pub const DEFAULT_SEGMENT_LEN: usize = 3;
}

impl fmt::Display for MutationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MutationKind::Point => f.write_str("point"),
            MutationKind::Gene => f.write_str("gene"),
            MutationKind::Segment { .. } => f.write_str("segment"),
        }
    }
}

impl std::str::FromStr for MutationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point" => Ok(MutationKind::Point),
            "gene" => Ok(MutationKind::Gene),
            "segment" => Ok(MutationKind::Segment {
                len: Self::DEFAULT_SEGMENT_LEN,
            }),
            other => Err(format!("unknown mutation operator `{other}` (point, gene, segment)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub cgp: CgpParams,
    pub budget: BudgetSpec,
    pub stagnation_threshold: usize,
    pub offspring_per_generation: usize,
    pub mutation_retry_cap: usize,
    pub mutation: MutationKind,
    pub seed: u64,
}

impl EvolutionConfig {
    pub const STAGNATION_THRESHOLD: usize = 5;
    pub const OFFSPRING: usize = 2;
    pub const MUTATION_RETRY_CAP: usize = 100;

    pub fn standard(mutation_rate: f64, generations: usize, seed: u64) -> Self {
        Self {
            cgp: CgpParams::standard(mutation_rate, generations),
            budget: BudgetSpec::standard(generations as u64),
            stagnation_threshold: Self::STAGNATION_THRESHOLD,
            offspring_per_generation: Self::OFFSPRING,
            mutation_retry_cap: Self::MUTATION_RETRY_CAP,
            mutation: MutationKind::Point,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EvolutionError> {
        self.cgp.validate()?;
        if self.stagnation_threshold == 0 {
            return Err(EvolutionError::InvalidConfig("stagnation_threshold must be at least 1".into()));
        }
        if self.offspring_per_generation == 0 {
            return Err(EvolutionError::InvalidConfig("offspring_per_generation must be at least 1".into()));
        }
        if self.mutation_retry_cap == 0 {
            return Err(EvolutionError::InvalidConfig("mutation_retry_cap must be at least 1".into()));
        }
        if let MutationKind::Segment { len } = self.mutation {
            if len == 0 || len > self.cgp.cols {
                return Err(EvolutionError::SegmentTooLong {
                    len,
                    cols: self.cgp.cols,
                });
            }
        }
        Ok(())
    }
}

/// One generation of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub generation: usize,
    /// Fitness of the parent the offspring were bred from.
    pub parent_fitness: f64,
    pub offspring_fitness: Vec<f64>,
    pub best_so_far: f64,
    pub neutral_mutation_applied: bool,
    /// Offspring index that became the new parent, if any.
    pub replaced_by: Option<usize>,
    /// Offspring that fell back to a neutral mutation after exhausting redraws.
    pub mutation_fallbacks: usize,
}

impl FitnessRecord {
    pub const CSV_HEADER: &'static str = "generation,parent_fitness,off0_fitness,off1_fitness,best_so_far,neutral_applied";

    /// Row matching [`Self::CSV_HEADER`]; extra offspring are appended.
    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{}", self.generation, self.parent_fitness);
        for i in 0..self.offspring_fitness.len().max(2) {
            row.push(',');
            if let Some(f) = self.offspring_fitness.get(i) {
                row.push_str(&f.to_string());
            }
        }
        row.push_str(&format!(",{},{}", self.best_so_far, u8::from(self.neutral_mutation_applied)));
        row
    }
}

/// Rerolls a connection to any other legal source, if one exists.
fn reroll_ref<R: Rng + ?Sized>(old: usize, range: std::ops::Range<usize>, rng: &mut R) -> usize {
    if range.len() < 2 {
        return old;
    }
    loop {
        let r = rng.gen_range(range.clone());
        if r != old {
            return r;
        }
    }
}

/// Each gene (function, connection, output) mutates independently with
/// probability `rate`. A function change that alters arity drops surplus
/// connections or draws the missing ones fresh.
pub fn point_mutate<R: Rng + ?Sized>(parent: &Genome, rate: f64, catalog: &LayerCatalog, rng: &mut R) -> Genome {
    let params = *parent.params();
    let rate = rate.clamp(0.0, 1.0);
    let mut nodes: Vec<NodeGene> = parent.nodes().to_vec();
    for (i, node) in nodes.iter_mut().enumerate() {
        let col = i + 1;
        let range = params.connection_range(col);
        if rng.gen_bool(rate) {
            if let Ok(f) = catalog.sample_replacement(node.function, rng) {
                node.function = f;
            }
        }
        for r in node.inputs.iter_mut() {
            if rng.gen_bool(rate) {
                *r = reroll_ref(*r, range.clone(), rng);
            }
        }
        let arity = catalog.entries()[node.function].arity();
        while node.inputs.len() < arity {
            node.inputs.push(rng.gen_range(range.clone()));
        }
        node.inputs.truncate(arity);
    }
    let mut output = parent.output();
    if rng.gen_bool(rate) {
        let r = params.output_range();
        output = reroll_ref(output, *r.start()..*r.end() + 1, rng);
    }
    Genome::from_genes_unchecked(params, nodes, output)
}

const RESAMPLE_CAP: usize = 1000;

/// Fresh gene for `col` differing from `old` whenever the grid allows it.
fn fresh_node<R: Rng + ?Sized>(params: &CgpParams, catalog: &LayerCatalog, col: usize, old: &NodeGene, rng: &mut R) -> NodeGene {
    for _ in 0..RESAMPLE_CAP {
        let n = random_node(params, catalog, col, rng);
        if n != *old {
            return n;
        }
    }
    old.clone()
}

/// Replaces the whole gene tuple of one uniformly chosen node.
pub fn gene_mutate<R: Rng + ?Sized>(parent: &Genome, catalog: &LayerCatalog, rng: &mut R) -> Genome {
    gene_mutate_at(parent, catalog, rng).0
}

/// [`gene_mutate`] that also reports the chosen column.
pub fn gene_mutate_at<R: Rng + ?Sized>(parent: &Genome, catalog: &LayerCatalog, rng: &mut R) -> (Genome, usize) {
    let params = *parent.params();
    let col = rng.gen_range(1..=params.cols);
    let mut nodes = parent.nodes().to_vec();
    nodes[col - 1] = fresh_node(&params, catalog, col, &nodes[col - 1], rng);
    (Genome::from_genes_unchecked(params, nodes, parent.output()), col)
}

/// Resamples `segment_len` consecutive nodes starting at a uniform column.
pub fn segment_mutate<R: Rng + ?Sized>(
    parent: &Genome,
    segment_len: usize,
    catalog: &LayerCatalog,
    rng: &mut R,
) -> Result<Genome, EvolutionError> {
    let params = *parent.params();
    if segment_len == 0 || segment_len > params.cols {
        return Err(EvolutionError::SegmentTooLong {
            len: segment_len,
            cols: params.cols,
        });
    }
    let start = rng.gen_range(1..=params.cols - segment_len + 1);
    let mut nodes = parent.nodes().to_vec();
    for col in start..start + segment_len {
        nodes[col - 1] = random_node(&params, catalog, col, rng);
    }
    Ok(Genome::from_genes_unchecked(params, nodes, parent.output()))
}

/// Resamples one inactive node, leaving the phenotype untouched. Returns the
/// parent unchanged when every node is active.
pub fn neutral_mutate<R: Rng + ?Sized>(parent: &Genome, catalog: &LayerCatalog, rng: &mut R) -> Genome {
    let params = *parent.params();
    let active = active_nodes(parent);
    let inactive: Vec<usize> = (1..=params.cols).filter(|c| active.binary_search(c).is_err()).collect();
    if inactive.is_empty() {
        return parent.clone();
    }
    let col = inactive[rng.gen_range(0..inactive.len())];
    let mut nodes = parent.nodes().to_vec();
    nodes[col - 1] = fresh_node(&params, catalog, col, &nodes[col - 1], rng);
    Genome::from_genes_unchecked(params, nodes, parent.output())
}

/// Whether a genome may be handed to the fitness evaluator.
pub fn is_viable(g: &Genome, catalog: &LayerCatalog, input_shape: &TensorShape) -> bool {
    g.output() != INPUT_TERMINAL && compile(&decode(g, catalog), input_shape).is_ok()
}

fn mutate_once<R: Rng + ?Sized>(
    parent: &Genome,
    config: &EvolutionConfig,
    catalog: &LayerCatalog,
    rng: &mut R,
) -> Result<Genome, EvolutionError> {
    match config.mutation {
        MutationKind::Point => Ok(point_mutate(parent, config.cgp.mutation_rate, catalog, rng)),
        MutationKind::Gene => Ok(gene_mutate(parent, catalog, rng)),
        MutationKind::Segment { len } => segment_mutate(parent, len, catalog, rng),
    }
}

/// Redraws mutations of `parent` until one compiles with a non-empty active
/// set, at most `mutation_retry_cap` times.
pub fn valid_mutate<R: Rng + ?Sized>(
    parent: &Genome,
    config: &EvolutionConfig,
    catalog: &LayerCatalog,
    input_shape: &TensorShape,
    rng: &mut R,
) -> Result<Genome, EvolutionError> {
    for _ in 0..config.mutation_retry_cap {
        let child = mutate_once(parent, config, catalog, rng)?;
        if is_viable(&child, catalog, input_shape) {
            return Ok(child);
        }
    }
    Err(EvolutionError::MutationExhausted(config.mutation_retry_cap))
}

/// Maps a compiling genome to an accuracy in `[0, 1]`. `seed` drives any
/// randomness inside the evaluation; it must be safe to call concurrently.
pub trait FitnessEvaluator: Sync {
    fn evaluate(&self, genome: &Genome, seed: u64) -> Result<f64, BoxError>;
}

impl<F> FitnessEvaluator for F
where
    F: Fn(&Genome, u64) -> Result<f64, BoxError> + Sync,
{
    fn evaluate(&self, genome: &Genome, seed: u64) -> Result<f64, BoxError> {
        self(genome, seed)
    }
}

/// Hooks for persisting progress as the loop runs.
pub trait EvolutionObserver {
    /// A new best genome; also fired once for the initial parent.
    fn on_improvement(&mut self, _genome: &Genome, _fitness: f64) -> Result<(), BoxError> {
        Ok(())
    }

    fn on_generation(&mut self, _record: &FitnessRecord, _parent: &Genome) -> Result<(), BoxError> {
        Ok(())
    }
}

impl EvolutionObserver for () {}

#[derive(Debug, Clone)]
pub struct EvolutionOutcome {
    pub best: Genome,
    pub best_fitness: f64,
    pub initial_fitness: f64,
    pub history: Vec<FitnessRecord>,
}

/// SplitMix64 finalizer over `base` and a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INIT_STREAM: u64 = u64::MAX;

fn checked_fitness(f: f64, generation: usize, offspring: Option<usize>) -> Result<f64, EvolutionError> {
    if (0.0..=1.0).contains(&f) {
        Ok(f)
    } else {
        Err(EvolutionError::Evaluator {
            generation,
            offspring,
            source: format!("fitness {f} outside [0, 1]").into(),
        })
    }
}

fn evaluate_all<E: FitnessEvaluator + ?Sized>(
    evaluator: &E,
    children: &[Genome],
    seeds: &[u64],
    generation: usize,
) -> Result<Vec<f64>, EvolutionError> {
    let results: Vec<Result<f64, BoxError>> = if children.len() == 1 {
        vec![evaluator.evaluate(&children[0], seeds[0])]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = children
                .iter()
                .zip(seeds)
                .map(|(c, &seed)| s.spawn(move || evaluator.evaluate(c, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err("fitness evaluator panicked".into())))
                .collect()
        })
    };
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| match r {
            Ok(f) => checked_fitness(f, generation, Some(i)),
            Err(source) => Err(EvolutionError::Evaluator {
                generation,
                offspring: Some(i),
                source,
            }),
        })
        .collect()
}

/// Runs the loop from a random viable parent.
pub fn evolve<E: FitnessEvaluator + ?Sized, O: EvolutionObserver + ?Sized>(
    config: &EvolutionConfig,
    catalog: &LayerCatalog,
    input_shape: &TensorShape,
    evaluator: &E,
    observer: &mut O,
) -> Result<EvolutionOutcome, EvolutionError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INIT_STREAM));
    let parent = random_genome(&config.cgp, catalog, input_shape, &mut rng)?;
    evolve_from(parent, config, catalog, input_shape, evaluator, observer)
}

/// Runs the loop from a given parent.
pub fn evolve_from<E: FitnessEvaluator + ?Sized, O: EvolutionObserver + ?Sized>(
    initial: Genome,
    config: &EvolutionConfig,
    catalog: &LayerCatalog,
    input_shape: &TensorShape,
    evaluator: &E,
    observer: &mut O,
) -> Result<EvolutionOutcome, EvolutionError> {
    config.validate()?;
    let observe = |r: Result<(), BoxError>, generation: usize| {
        r.map_err(|source| EvolutionError::Evaluator {
            generation,
            offspring: None,
            source,
        })
    };
    let init_seed = derive_seed(derive_seed(config.seed, INIT_STREAM), 0);
    let initial_fitness = evaluator
        .evaluate(&initial, init_seed)
        .map_err(|source| EvolutionError::Evaluator {
            generation: 0,
            offspring: None,
            source,
        })
        .and_then(|f| checked_fitness(f, 0, None))?;
    observe(observer.on_improvement(&initial, initial_fitness), 0)?;

    let mut parent = initial;
    let mut parent_fitness = initial_fitness;
    let mut best = parent.clone();
    let mut best_fitness = parent_fitness;
    let mut stagnation = 0usize;
    let mut history = Vec::with_capacity(config.cgp.generations);

    for generation in 0..config.cgp.generations {
        let gen_seed = derive_seed(config.seed, generation as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(gen_seed);
        let mut fallbacks = 0;
        let mut children = Vec::with_capacity(config.offspring_per_generation);
        for _ in 0..config.offspring_per_generation {
            match valid_mutate(&parent, config, catalog, input_shape, &mut rng) {
                Ok(c) => children.push(c),
                Err(EvolutionError::MutationExhausted(_)) => {
                    fallbacks += 1;
                    children.push(neutral_mutate(&parent, catalog, &mut rng));
                }
                Err(e) => return Err(e),
            }
        }
        let seeds: Vec<u64> = (0..children.len()).map(|k| derive_seed(gen_seed, k as u64)).collect();
        let fitness = evaluate_all(evaluator, &children, &seeds, generation)?;

        let bred_from = parent_fitness;
        let mut replaced_by = None;
        for (k, &f) in fitness.iter().enumerate() {
            let threshold = replaced_by.map_or(parent_fitness, |j: usize| fitness[j]);
            if f > threshold {
                replaced_by = Some(k);
            }
        }
        let mut neutral = false;
        if let Some(k) = replaced_by {
            parent = children.swap_remove(k);
            parent_fitness = fitness[k];
            stagnation = 0;
            if parent_fitness > best_fitness {
                best = parent.clone();
                best_fitness = parent_fitness;
                observe(observer.on_improvement(&best, best_fitness), generation)?;
            }
        } else {
            stagnation += 1;
            if stagnation >= config.stagnation_threshold {
                parent = neutral_mutate(&parent, catalog, &mut rng);
                neutral = true;
                stagnation = 0;
            }
        }
        let record = FitnessRecord {
            generation,
            parent_fitness: bred_from,
            offspring_fitness: fitness,
            best_so_far: best_fitness,
            neutral_mutation_applied: neutral,
            replaced_by,
            mutation_fallbacks: fallbacks,
        };
        observe(observer.on_generation(&record, &parent), generation)?;
        history.push(record);
    }
    Ok(EvolutionOutcome {
        best,
        best_fitness,
        initial_fitness,
        history,
    })
}
