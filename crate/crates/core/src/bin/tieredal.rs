use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tieredal::data;
use tieredal::orchestrator::{self, AlStrategy, DatasetSource, ExperimentConfig, Method};

const OUT_DIR_ENV: &str = "TIEREDAL_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "tieredal",
    version,
    about = "Tiered-hardness interactive labeling experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run simulated-annotator experiments and write one results JSON per run.
    Run(Box<RunArgs>),
    /// Serve the live labeling HTTP API.
    Serve(ServeArgs),
    /// Generate a synthetic Gaussian-blob dataset.
    GenData(GenArgs),
    /// Convert a headerless CSV (features..., label) into the binary dataset format.
    ImportCsv(ImportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AutoAssign {
    HighestConfidence,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum HumanCorrect {
    Logdetmi,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    al_strategy: Option<AlStrategy>,
    #[arg(long, value_enum, default_value = "highest_confidence")]
    auto_assign_strategy: AutoAssign,
    #[arg(long)]
    b1: Option<usize>,
    #[arg(long)]
    b2: Option<usize>,
    #[arg(long)]
    b3: Option<usize>,
    /// Dataset file in the binary format; omit for synthetic blobs.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "logdetmi")]
    human_correct_strategy: HumanCorrect,
    #[arg(long)]
    num_partitions: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed_size: Option<usize>,
    #[arg(long)]
    thread_count: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    c_a: Option<f64>,
    #[arg(long)]
    c_v: Option<f64>,
    /// Output directory; the TIEREDAL_OUT_DIR environment variable takes precedence.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    blobs: BlobArgs,
}

#[derive(Args)]
struct BlobArgs {
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 20)]
    num_classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImportArgs {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Text file with one thumbnail path per row, stored next to the dataset.
    #[arg(long)]
    thumbnails: Option<PathBuf>,
}

fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.unwrap_or_else(|| PathBuf::from("results")),
    }
}

fn build_config(a: &RunArgs) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(
        al_strategy,
        b1,
        b2,
        b3,
        num_partitions,
        rounds,
        runs,
        seed_size,
        thread_count,
        method,
        c_a,
        c_v,
        rng_seed
    );
    if let Some(e) = a.epochs {
        cfg.train.t_max = e;
    }
    if let Some(p) = &a.dataset {
        cfg.dataset = DatasetSource::File { path: p.clone() };
    } else if let DatasetSource::Synthetic {
        num_classes,
        per_class,
        dim,
        spread,
        seed,
    } = &mut cfg.dataset
    {
        let b = &a.blobs;
        *num_classes = b.num_classes.unwrap_or(*num_classes);
        *per_class = b.per_class.unwrap_or(*per_class);
        *dim = b.dim.unwrap_or(*dim);
        *spread = b.spread.unwrap_or(*spread);
        *seed = b.data_seed.unwrap_or(*seed);
    }
    Ok(cfg)
}

fn run(a: RunArgs) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = build_config(&a)?;
    let out_dir = resolve_out_dir(a.out_dir);
    let results = orchestrator::run_experiment(&cfg, Some(&out_dir))?;
    for r in &results {
        let last = r.records.last().expect("round 0 is always recorded");
        println!(
            "{}: rounds={} test_accuracy={:.4} cost={}{}",
            orchestrator::results_path(&out_dir, r.run).display(),
            last.round,
            last.test_accuracy,
            last.cost_cumulative,
            if r.truncated {
                " (stopped early: pool exhausted)"
            } else {
                ""
            }
        );
    }
    Ok(())
}

fn import(a: ImportArgs) -> Result<(), Box<dyn std::error::Error>> {
    let mut ds = data::import_csv(&a.input)?;
    if let Some(t) = &a.thumbnails {
        let text = std::fs::read_to_string(t).map_err(|e| format!("{}: {e}", t.display()))?;
        let list: Vec<String> = text.lines().map(str::to_owned).collect();
        if list.len() != ds.len() {
            return Err(format!("{} lists {} thumbnails for {} rows", t.display(), list.len(), ds.len()).into());
        }
        ds.thumbnails = Some(list);
    }
    data::save_dataset(&ds, &a.out)?;
    report_dataset(&ds, &a.out);
    Ok(())
}

fn report_dataset(ds: &data::Dataset, path: &Path) {
    println!(
        "{}: {} rows, {} features, {} classes",
        path.display(),
        ds.len(),
        ds.dim(),
        ds.num_classes()
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome: Result<(), Box<dyn std::error::Error>> = match cli.command {
        Command::Run(a) => run(*a),
        Command::Serve(a) => {
            let out_dir = resolve_out_dir(a.out_dir);
            tokio::runtime::Runtime::new().map_err(Into::into).and_then(|rt| {
                rt.block_on(tieredal::service::serve(&a.bind, Some(out_dir)))
                    .map_err(Into::into)
            })
        }
        Command::GenData(a) => data::generate_blobs(a.num_classes, a.per_class, a.dim, a.spread, a.rng_seed)
            .and_then(|ds| {
                data::save_dataset(&ds, &a.out)?;
                report_dataset(&ds, &a.out);
                Ok(())
            })
            .map_err(Into::into),
        Command::ImportCsv(a) => import(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
