use clap::{Args, Parser, Subcommand};
use mvocc_cli::{config, report, runner};
use mvocc_core::data::{save_dataset, synth_generate, SynthSpec};
use mvocc_core::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mvocc",
    version,
    about = "Multi-view one-class classification: train, score, and benchmark eleven baselines"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured methods; writes report.json and summary.csv
    Run(RunArgs),
    /// Full benchmark: like run, but always over all eleven methods
    Bench(RunArgs),
    /// One run per grid value of a hyperparameter (R, m, or alpha)
    Sweep(SweepArgs),
    /// Generate a synthetic multi-view dataset directory
    Synth(SynthArgs),
    /// Hindsight reference: per-view autoencoders, best view by AUROC
    BestSingleView(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config
    #[arg(short, long)]
    config: PathBuf,
    /// Worker threads (default: available cores)
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (overrides config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Repeats per method and class (overrides config)
    #[arg(long)]
    repeats: Option<usize>,
    /// Base seed (overrides config)
    #[arg(long)]
    seed: Option<u64>,
    /// Late-fusion strategy: AVG, MIN, or MAX (overrides config)
    #[arg(long)]
    late_fusion: Option<String>,
    /// Comma-separated method names (overrides config)
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    base: RunArgs,
    /// Swept hyperparameter: R (TF rank), m (SIM margin), or alpha
    #[arg(long)]
    param: String,
    /// Comma-separated grid values
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthetic-generator spec
    #[arg(short, long)]
    config: PathBuf,
    /// Dataset directory to create
    #[arg(short, long)]
    out: PathBuf,
    /// View file format: csv or binary
    #[arg(long, default_value = "csv")]
    format: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Arity(_) => 2,
        Error::Data(_) | Error::BatchTooSmall(_) | Error::Io(_) | Error::Json(_) => 3,
        _ => 1,
    }
}

fn load_resolved(a: &RunArgs, all_methods: bool) -> Result<config::Resolved> {
    let mut cfg = config::ExperimentConfig::from_file(&a.config)?;
    if all_methods {
        cfg.methods = Vec::new();
    } else if !a.methods.is_empty() {
        cfg.methods = a.methods.clone();
    }
    if let Some(x) = a.repeats {
        cfg.repeats = x;
    }
    if let Some(x) = a.seed {
        cfg.seed = x;
    }
    if let Some(x) = &a.late_fusion {
        cfg.late_fusion = x.clone();
    }
    if let Some(x) = &a.out {
        cfg.out = Some(x.clone());
    }
    config::resolve(&cfg)
}

fn jobs_of(a: &RunArgs) -> usize {
    a.jobs.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        // bench forces the full method set; run honors config and flags
        Cmd::Run(a) => run_cmd(&a, false),
        Cmd::Bench(a) => run_cmd(&a, true),
        Cmd::Sweep(a) => {
            let r = load_resolved(&a.base, false)?;
            let rep = runner::sweep_execute(&r, &a.param, &a.grid, jobs_of(&a.base))?;
            report::write_sweep(&r.out, &rep)?;
            println!(
                "swept {} over {} values; wrote {}",
                rep.param,
                rep.grid.len(),
                r.out.join("sweep.csv").display()
            );
            Ok(())
        }
        Cmd::Synth(a) => {
            let text = std::fs::read_to_string(&a.config)
                .map_err(|e| Error::Config(format!("{}: {e}", a.config.display())))?;
            let spec: SynthSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", a.config.display())))?;
            let ds = synth_generate(&spec)?;
            save_dataset(&ds, &a.out, &a.format)?;
            println!(
                "wrote dataset '{}' ({} rows, {} views) to {}",
                ds.name,
                ds.n_rows(),
                ds.n_views(),
                a.out.display()
            );
            Ok(())
        }
        Cmd::BestSingleView(a) => {
            let r = load_resolved(&a, false)?;
            let rep = runner::bsv_execute(&r, jobs_of(&a))?;
            report::write_bsv(&r.out, &rep)?;
            println!(
                "wrote hindsight reference to {}",
                r.out.join("best_single_view.json").display()
            );
            Ok(())
        }
    }
}

fn run_cmd(a: &RunArgs, bench: bool) -> Result<()> {
    let r = load_resolved(a, bench)?;
    let rep = runner::execute(&r, jobs_of(a))?;
    report::write_report(&r.out, &rep)?;
    for d in &rep.datasets {
        if let Some(best) = d.methods.iter().find(|m| m.best) {
            println!(
                "{}: best {} AUROC {:.4} +/- {:.4}",
                d.dataset, best.method, best.metrics.auroc.mean, best.metrics.auroc.std
            );
        }
    }
    println!(
        "wrote {} and {}",
        r.out.join("report.json").display(),
        r.out.join("summary.csv").display()
    );
    Ok(())
}
