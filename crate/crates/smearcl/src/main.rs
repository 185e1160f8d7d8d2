//! Command-line interface: `generate`, `run`, `report`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. The only
//! environment variable read is SMEARCL_LOG (log verbosity).

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use smearcl::harness::{self, ExperimentConfig};
use smearcl::strategies::StrategyKind;
use smearcl::synthgen;
use smearcl::Error;

#[derive(Parser)]
#[command(
    name = "smearcl",
    version,
    about = "Domain-incremental continual learning for malaria thin-smear cell detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic multi-site dataset
    Generate {
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Number of sites to generate (prefix of the default 5-site set)
        #[arg(long, default_value_t = 5)]
        sites: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Patient-count scale-down factor relative to the full-size setting
        #[arg(long, default_value_t = 4.0)]
        scale: f64,
        /// Overwrite a non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Run one strategy with patient-grouped cross validation
    Run {
        /// Dataset directory produced by `generate`
        #[arg(long)]
        data: PathBuf,
        /// Experiment output directory
        #[arg(long)]
        out: PathBuf,
        /// baseline | joint | ewc | lwf | replay-naive | replay-conf
        #[arg(long)]
        strategy: String,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        /// Early-stopping patience (epochs without improvement)
        #[arg(long, default_value_t = 12)]
        patience: usize,
        #[arg(long, default_value_t = 5e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        /// Regularization strength for ewc/lwf (ignored elsewhere)
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 125)]
        buffer_cap: usize,
        #[arg(long, default_value_t = 0.8)]
        buffer_pos_frac: f64,
        #[arg(long, default_value_t = 0.5)]
        buffer_site_frac: f64,
        /// IoU threshold for the merge and for verdict-truth matching
        #[arg(long, default_value_t = 0.5)]
        iou_tau: f64,
        #[arg(long, default_value_t = 0.25)]
        conf_threshold: f64,
        /// Reuse completed task checkpoints in the output directory
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 256)]
        fisher_samples: usize,
        #[arg(long, default_value_t = 3)]
        random_baseline_runs: usize,
    },
    /// Merge experiment records into summary tables, curves and plots
    Report {
        /// Report output directory
        #[arg(long)]
        out: PathBuf,
        /// Experiment output directories (each holding record.json)
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> smearcl::Result<()> {
    match cli.command {
        Command::Generate {
            out,
            sites,
            seed,
            scale,
            force,
        } => {
            let profiles = synthgen::default_profiles_scaled(seed, scale)?;
            if sites == 0 || sites > profiles.len() {
                return Err(Error::Config(format!(
                    "--sites must lie in 1..={}, got {sites}",
                    profiles.len()
                )));
            }
            let chosen = &profiles[..sites];
            log::info!("generating {} site(s) with seed {seed}", chosen.len());
            let (stream, report) = synthgen::generate_stream(chosen)?;
            harness::dataset_io::write_stream(&out, &stream, &report, force)?;
            println!("{}", report.to_table());
            println!("dataset written to {}", out.display());
            Ok(())
        }
        Command::Run {
            data,
            out,
            strategy,
            folds,
            seed,
            epochs,
            patience,
            learning_rate,
            batch_size,
            lambda,
            buffer_cap,
            buffer_pos_frac,
            buffer_site_frac,
            iou_tau,
            conf_threshold,
            resume,
            fisher_samples,
            random_baseline_runs,
        } => {
            let strategy = StrategyKind::parse(&strategy)?;
            if lambda.is_some() && !strategy.uses_lambda() {
                log::warn!(
                    "--lambda is ignored for strategy {} (only ewc and lwf use it)",
                    strategy.name()
                );
            }
            if out.exists() && out.join("config.toml").exists() && !resume {
                return Err(Error::Config(format!(
                    "output directory {} already holds a run (pass --resume to continue it)",
                    out.display()
                )));
            }
            let mut config = ExperimentConfig::new(data, out, strategy);
            config.folds = folds;
            config.seed = seed;
            config.train.epochs = epochs;
            config.train.patience = patience;
            config.train.learning_rate = learning_rate;
            config.train.batch_size = batch_size;
            config.train.conf_threshold = conf_threshold;
            if let Some(l) = lambda {
                match strategy {
                    StrategyKind::Ewc => config.ewc_lambda = l,
                    StrategyKind::Lwf => config.lwf_lambda = l,
                    _ => {}
                }
            }
            config.buffer.cap = buffer_cap;
            config.buffer.positive_fraction = buffer_pos_frac;
            config.buffer.site_ratio_cap = buffer_site_frac;
            config.iou_tau = iou_tau;
            config.fisher_samples = fisher_samples;
            config.random_baseline_runs = random_baseline_runs;

            let record = harness::run_experiment(&config, None)?
                .expect("run without a stop point always completes");
            for summary in &record.summaries {
                println!(
                    "summary written: {}",
                    config
                        .out_dir
                        .join(format!("summary_{}.csv", summary.level.name()))
                        .display()
                );
            }
            Ok(())
        }
        Command::Report { out, records } => {
            let files = harness::generate_report(&records, &out)?;
            print!("{}", files.text);
            println!("curves: {}", files.curves_csv.display());
            for p in &files.plots {
                println!("plot: {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SMEARCL_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(1);
        }
    };
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::UnknownStrategy(_) | Error::Config(_) => 1,
            _ => 2,
        };
        std::process::exit(code);
    }
}
