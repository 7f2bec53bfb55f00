use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tadaf::error::{Error, Result};
use tadaf::harness::{self, ExperimentConfig};
use tadaf::selftest;

#[derive(Parser)]
#[command(name = "tadaf", version, about = "T-product algebra and learnable T-product augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline and the configured augmented variants.
    Train(Box<TrainArgs>),
    /// Recompute best-accuracy and minimum-available-epoch metrics from a series CSV.
    Metrics {
        /// Per-epoch CSV written by `train`.
        csv: PathBuf,
        /// Variant used as the reference series.
        #[arg(long, default_value = "off")]
        baseline: String,
    },
    /// Run the oracle-equivalence and gradient checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the T-product routes at p = 32 and p = 64.
    Bench {
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// key=value file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// cifar10, cifar100 or synth.
    #[arg(long)]
    dataset: Option<String>,
    /// Dataset directory (the TADAF_DATA_DIR environment variable wins).
    #[arg(long)]
    data_dir: Option<String>,
    /// Stratified training subset size, or `all`.
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    test_subset: Option<String>,
    #[arg(long)]
    synth_classes: Option<String>,
    #[arg(long)]
    synth_per_class: Option<String>,
    #[arg(long)]
    synth_side: Option<String>,
    #[arg(long)]
    synth_test_per_class: Option<String>,
    #[arg(long)]
    data_seed: Option<String>,
    /// lenet5 or mlp.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    /// Comma-separated presets among 333, 433, 525; the baseline always runs.
    #[arg(long)]
    presets: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// lenet, deep or desk.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    freeze_fraction: Option<String>,
    /// identity, relu or tanh.
    #[arg(long)]
    activation: Option<String>,
    /// naive, circsum or fft.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Output directory for reports and checkpoints.
    #[arg(long)]
    output: Option<String>,
}

impl TrainArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            cfg.apply_text(&text)?;
        }
        // Dataset first: switching source resets source-specific fields.
        let flags = [
            ("dataset", &self.dataset),
            ("data_dir", &self.data_dir),
            ("subset", &self.subset),
            ("test_subset", &self.test_subset),
            ("synth_classes", &self.synth_classes),
            ("synth_per_class", &self.synth_per_class),
            ("synth_side", &self.synth_side),
            ("synth_test_per_class", &self.synth_test_per_class),
            ("data_seed", &self.data_seed),
            ("model", &self.model),
            ("hidden", &self.hidden),
            ("presets", &self.presets),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("schedule", &self.schedule),
            ("freeze_fraction", &self.freeze_fraction),
            ("activation", &self.activation),
            ("kernel", &self.kernel),
            ("seed", &self.seed),
            ("output", &self.output),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.apply(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.config()?;
            let (report, finals) = harness::train_with_states(&cfg)?;
            let dir = cfg.output.clone().unwrap_or_else(|| PathBuf::from("runs"));
            let (summary, csv) = harness::emit_report(&report, &dir)?;
            harness::write_checkpoints(&finals, &dir)?;
            println!(
                "baseline best {:.4}, floor {:.2}",
                report.lambda_max_baseline, report.lambda_min_ava
            );
            for v in &report.variants {
                println!(
                    "{:>4}: init {:.4} best {:.4} (epoch {}) t_ava {} params +{} ({}) time x{:.2}",
                    v.variant,
                    v.initial_test_acc,
                    v.lambda_max,
                    v.lambda_max_epoch,
                    v.t_ava.map_or("-".to_string(), |t| t.to_string()),
                    v.params.additional,
                    v.params_ratio_percent,
                    v.time_ratio
                );
            }
            println!("wrote {} and {}", summary.display(), csv.display());
            Ok(true)
        }
        Command::Metrics { csv, baseline } => {
            let text = fs::read_to_string(&csv).map_err(|e| Error::Io {
                path: csv.clone(),
                source: e,
            })?;
            let series = harness::parse_series_csv(&text)?;
            let base = series
                .iter()
                .find(|(name, _)| *name == baseline)
                .ok_or_else(|| Error::Format(format!("no `{baseline}` rows in {}", csv.display())))?;
            let all: Vec<Vec<f64>> = series.iter().map(|(_, s)| s.clone()).collect();
            let m = harness::min_available_epochs(&all, &base.1)?;
            let variants: Vec<_> = series
                .iter()
                .zip(&m.t_ava)
                .map(|((name, s), t)| {
                    let best = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    serde_json::json!({"variant": name, "lambda_max": best, "t_ava": t})
                })
                .collect();
            let out = serde_json::json!({
                "baseline": baseline,
                "lambda_max_baseline": m.lambda_max_baseline,
                "lambda_max_epoch": m.lambda_max_epoch,
                "lambda_min_ava": m.lambda_floor,
                "variants": variants,
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("json value"));
            Ok(true)
        }
        Command::Selftest { seed } => {
            let lines = selftest::run_all(seed)?;
            for l in &lines {
                println!("{l}");
            }
            Ok(lines.iter().all(|l| l.passed))
        }
        Command::Bench { reps, seed } => {
            let s = selftest::cost_scaling(reps.max(1), seed)?;
            let line = selftest::scaling_line(&s);
            println!("{line}");
            Ok(line.passed)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
