//! Command-line surface for the experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ntk_lab::exp::{
    self, dataset_to_csv, gen_synthetic, gen_transfer_tasks, ExperimentConfig, ExperimentKind,
};

#[derive(Parser)]
#[command(name = "ntk-lab", version, about = "Finite-width network / kernel regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value configuration file; omit to use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated width list override.
    #[arg(long)]
    widths: Option<String>,
    /// Comma-separated seed list override.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated beta list override.
    #[arg(long)]
    beta: Option<String>,
    /// Output directory; defaults to the config value, then $NTK_LAB_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset as CSV on stdout.
    GenData {
        /// "synthetic", "transfer1" or "transfer2".
        #[arg(long, default_value = "synthetic")]
        kind: String,
        #[arg(long, default_value_t = 160)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
    },
    /// Single training run.
    Train(RunArgs),
    /// Width-convergence sweep.
    Sweep(RunArgs),
    /// Prior-mean transfer experiment.
    Transfer(RunArgs),
    /// Ensemble-moments experiment.
    Ensemble(RunArgs),
    /// Print the gnuplot script that renders a results.csv.
    PlotScript {
        /// Unused beyond validation that the file exists.
        results: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs, kind: ExperimentKind) -> ntk_lab::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::parse(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    cfg.kind = kind;
    if let Some(w) = &args.widths {
        cfg.set("widths", w)?;
    }
    if let Some(s) = &args.seeds {
        cfg.set("seeds", s)?;
    }
    if let Some(b) = &args.beta {
        cfg.set("betas", b)?;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| {
        std::env::var_os("NTK_LAB_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn run(args: &RunArgs, kind: ExperimentKind) -> ntk_lab::Result<()> {
    let cfg = load_config(args, kind)?;
    let rows = exp::run_experiment(&cfg)?;
    let dir = output_dir(&cfg);
    exp::emit_outputs(&rows, &cfg, &dir)?;
    eprintln!(
        "{}: {} rows -> {}",
        cfg.kind.name(),
        rows.len(),
        dir.join("results.csv").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData {
            kind,
            n,
            dim,
            noise,
            seed,
        } => (|| -> ntk_lab::Result<()> {
            let data = match kind.as_str() {
                "synthetic" => gen_synthetic(*n, *dim, *noise, *seed),
                "transfer1" => gen_transfer_tasks(*n, 0, *noise, *seed).0,
                "transfer2" => gen_transfer_tasks(1, *n, *noise, *seed).1,
                other => {
                    return Err(ntk_lab::Error::InvalidConfig(format!(
                        "unknown dataset kind {other:?}"
                    )))
                }
            };
            print!("{}", dataset_to_csv(&data));
            Ok(())
        })(),
        Command::Train(args) => run(args, ExperimentKind::SingleTrain),
        Command::Sweep(args) => run(args, ExperimentKind::WidthSweep),
        Command::Transfer(args) => run(args, ExperimentKind::Transfer),
        Command::Ensemble(args) => run(args, ExperimentKind::Ensemble),
        Command::PlotScript { results } => (|| -> ntk_lab::Result<()> {
            if let Some(path) = results {
                let text = std::fs::read_to_string(path)?;
                exp::parse_results_csv(&text)?;
            }
            print!("{}", exp::plot_script());
            Ok(())
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
