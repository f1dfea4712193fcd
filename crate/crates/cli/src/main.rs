use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cgp_nas::catalog::{default_catalog, LayerCatalog};
use cgp_nas::dot::to_dot;
use cgp_nas::evolution::MutationKind;
use cgp_nas::experiment::{
    evolve_phase, prepare_run_dir, read_json, run_experiment, sweep, train_phase, write_json, DatasetPaths,
    ExperimentError, LoadedData, RunConfig, RunReport, SweepSummary,
};
use cgp_nas::genome::Genome;
use cgp_nas::shapecheck::TensorShape;
use clap::{Args, Parser, Subcommand};

/// Evolve small CNN architectures with Cartesian Genetic Programming.
#[derive(Parser)]
#[command(name = "cgp-nas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for an architecture; writes history.csv, best.genome, best.dot.
    Evolve(RunArgs),
    /// Train a genome from scratch several times and report test accuracy.
    TrainBest {
        #[command(flatten)]
        run: RunArgs,
        /// Genome file (default: <out-dir>/best.genome).
        #[arg(long)]
        genome: Option<PathBuf>,
    },
    /// Evolve then train the best genome; writes report.json.
    Run(RunArgs),
    /// Run every (mutation rate, generations) cell; writes summary.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Render a genome file as a Graphviz digraph.
    ExportDot {
        genome: PathBuf,
        /// Also draw inactive nodes, greyed out.
        #[arg(long)]
        show_inactive: bool,
        /// Catalog file the genome refers to (default: built-in catalog).
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Input shape as H,W,C.
        #[arg(long, default_value = "28,28,1")]
        input_shape: String,
        /// Write here instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Summarize a report.json, summary.json, or a run directory.
    Report { path: PathBuf },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Key/value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
    /// Redraw the evaluation records for every offspring.
    #[arg(long)]
    resample_pool: bool,
    /// Offspring operator: point, gene or segment.
    #[arg(long)]
    mutation: Option<MutationKind>,
    #[arg(long)]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.resample_pool {
            cfg.resample_pool = true;
        }
        if let Some(m) = self.mutation {
            cfg.mutation = match (m, cfg.mutation) {
                (MutationKind::Segment { .. }, MutationKind::Segment { len }) => MutationKind::Segment { len },
                _ => m,
            };
        }
        match (&self.train_images, &self.train_labels) {
            (Some(i), Some(l)) => {
                let name = i
                    .parent()
                    .and_then(|p| p.file_name())
                    .map_or_else(|| "dataset".to_string(), |n| n.to_string_lossy().into_owned());
                cfg.datasets = vec![DatasetPaths {
                    name,
                    train_images: i.clone(),
                    train_labels: l.clone(),
                    test_images: None,
                    test_labels: None,
                }];
            }
            (None, None) => {}
            _ => bail!("--train-images and --train-labels go together"),
        }
        match (&self.test_images, &self.test_labels) {
            (Some(i), Some(l)) => {
                let [d] = cfg.datasets.as_mut_slice() else {
                    bail!("test files need exactly one training dataset");
                };
                d.test_images = Some(i.clone());
                d.test_labels = Some(l.clone());
            }
            (None, None) => {}
            _ => bail!("--test-images and --test-labels go together"),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn single_dataset(cfg: &RunConfig) -> Result<&DatasetPaths> {
        match cfg.datasets.as_slice() {
            [d] => Ok(d),
            [] => bail!("no dataset given (config paths or --train-images/--train-labels)"),
            _ => bail!("this command takes exactly one dataset"),
        }
    }
}

fn load_catalog(path: Option<&Path>) -> Result<LayerCatalog> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(LayerCatalog::from_text(&text)?)
        }
        None => Ok(default_catalog()),
    }
}

fn parse_shape(s: &str) -> Result<TensorShape> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad input shape `{s}`"))?;
    match dims.as_slice() {
        [h, w, c] => Ok(TensorShape::spatial(*h, *w, *c)),
        [n] => Ok(TensorShape::flat(*n)),
        _ => bail!("input shape must be H,W,C or N"),
    }
}

fn print_report(r: &RunReport) {
    println!("dataset        {}", r.dataset);
    println!("budget         {}", r.budget);
    println!(
        "search         {} generations, best fitness {:.4} (initial {:.4})",
        r.evolution.history.len(),
        r.evolution.best_fitness,
        r.evolution.initial_fitness
    );
    println!("active layers  {}", r.evolution.best_active_nodes);
    println!(
        "test accuracy  {:.4} +- {:.4} ({}) over {} runs",
        r.mean_accuracy,
        r.std_accuracy,
        r.protocol.spread,
        r.final_accuracies.len()
    );
    println!("wall clock     {:.1}s", r.wall_clock.total_seconds);
    print!("{}", r.evolution.best_shape_trace);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let report = run_experiment(&cfg, &default_catalog(), &args.out_dir)?;
            print_report(&report);
        }
        Command::Evolve(args) => {
            let cfg = args.config()?;
            let catalog = default_catalog();
            prepare_run_dir(&cfg, &catalog, &args.out_dir)?;
            let data = LoadedData::load(RunArgs::single_dataset(&cfg)?)?;
            let (_, summary) = evolve_phase(&cfg, &data, &catalog, Some(&args.out_dir))?;
            write_json(&args.out_dir.join("evolve.json"), &summary)?;
            println!("best fitness {:.4} after {} generations", summary.best_fitness, summary.history.len());
            print!("{}", summary.best_genome);
        }
        Command::TrainBest { run, genome } => {
            let cfg = run.config()?;
            let catalog_file = run.out_dir.join("catalog.txt");
            let catalog = load_catalog(catalog_file.exists().then_some(catalog_file.as_path()))?;
            let genome_path = genome.unwrap_or_else(|| run.out_dir.join("best.genome"));
            let text = std::fs::read_to_string(&genome_path).with_context(|| format!("reading {}", genome_path.display()))?;
            let g = Genome::from_text(&text, &catalog)?;
            std::fs::create_dir_all(&run.out_dir)?;
            let data = LoadedData::load(RunArgs::single_dataset(&cfg)?)?;
            let summary = train_phase(&cfg, &data, &catalog, &g, Some(&run.out_dir))?;
            write_json(&run.out_dir.join("final.json"), &summary)?;
            println!(
                "test accuracy {:.4} +- {:.4} over {} runs",
                summary.mean,
                summary.std,
                summary.accuracies.len()
            );
        }
        Command::Sweep { run, jobs } => {
            let cfg = run.config()?;
            let summary = sweep(&cfg, &default_catalog(), &run.out_dir, jobs)?;
            print!("{}", summary.to_csv());
        }
        Command::ExportDot {
            genome,
            show_inactive,
            catalog,
            input_shape,
            output,
        } => {
            let catalog = load_catalog(catalog.as_deref())?;
            let text = std::fs::read_to_string(&genome).with_context(|| format!("reading {}", genome.display()))?;
            let g = Genome::from_text(&text, &catalog)?;
            let dot = to_dot(&g, &catalog, &parse_shape(&input_shape)?, show_inactive);
            match output {
                Some(p) => std::fs::write(&p, dot).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{dot}"),
            }
        }
        Command::Report { path } => {
            let file = if path.is_dir() {
                ["report.json", "summary.json"]
                    .iter()
                    .map(|f| path.join(f))
                    .find(|p| p.exists())
                    .with_context(|| format!("no report.json or summary.json in {}", path.display()))?
            } else {
                path
            };
            if file.file_name().is_some_and(|n| n == "summary.json") {
                let s: SweepSummary = read_json(&file)?;
                print!("{}", s.to_csv());
            } else {
                let r: RunReport = read_json(&file)?;
                print_report(&r);
            }
        }
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(x) = e.downcast_ref::<ExperimentError>() {
        return x.kind();
    }
    if e.downcast_ref::<cgp_nas::genome::GenomeError>().is_some() {
        return "genome";
    }
    if e.downcast_ref::<cgp_nas::catalog::CatalogError>().is_some() {
        return "catalog";
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "usage"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "status": "error",
                "kind": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
