//! `rul`: featurize, train, predict, evaluate and ablate from one TOML run
//! configuration.
//!
//! Exit status: 0 success, 1 configuration or usage error, 2 data error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rul_core::model::Stage;
use rul_core::pipeline::{self, AblateAxis, CacheStatus, RunConfig};
use rul_core::synth::SynthConfig;
use rul_core::{Error, ErrorCategory};

#[derive(Parser)]
#[command(name = "rul", version, about = "Cross-condition bearing RUL prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any config key, e.g. `--set sft.epochs=4 --set lspr.fpt=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Sft,
    Pt,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Sft => Stage::Sft,
            StageArg::Pt => Stage::Pt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Blocks,
    Patch,
    Horizon,
    Freeze,
    Similarity,
    Pca,
    Projection,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic two-condition fixture and a matching run.toml.
    Synth {
        /// Target directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Samples per snapshot file.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        min_snapshots: Option<usize>,
        #[arg(long)]
        max_snapshots: Option<usize>,
    },
    /// Parse snapshots and cache per-bearing feature maps.
    Featurize(Common),
    /// Supervised fine-tuning on source bearings, then prompt tuning.
    Train(Common),
    /// Write RUL trajectories for the test bearings.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "pt")]
        stage: StageArg,
    },
    /// Score prediction files. MAE, RMSE and MAPE use RUL fractions; the
    /// PHM score sees `metrics.score_units` times the fraction (percent by
    /// default).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "pt")]
        stage: StageArg,
        /// Score this file instead of the run's prediction files.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Ablation sweeps and attention analyses.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        axis: AxisArg,
    },
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut overrides = Vec::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        let abs = std::env::current_dir().map(|d| d.join(out)).unwrap_or_else(|_| out.clone());
        overrides.push(("out_dir".into(), toml_string(&abs)));
    }
    RunConfig::load(&common.config, &overrides)
}

fn toml_string(p: &Path) -> String {
    format!("{:?}", p.to_string_lossy())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            samples,
            min_snapshots,
            max_snapshots,
        } => {
            let mut cfg = SynthConfig { seed, ..SynthConfig::default() };
            if let Some(s) = samples {
                cfg.samples_per_snapshot = s;
            }
            if let Some(m) = min_snapshots {
                cfg.min_snapshots = m;
            }
            if let Some(m) = max_snapshots {
                cfg.max_snapshots = m;
            }
            let path = pipeline::synth(&out, &cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Featurize(common) => {
            let cfg = load(&common)?;
            for e in pipeline::featurize(&cfg)? {
                let status = match e.status {
                    CacheStatus::Computed => "computed",
                    CacheStatus::Cached => "cached",
                };
                let fpt = e.fpt_index.map_or("none".to_string(), |i| i.to_string());
                println!("{}: {status}, life {}, fpt {fpt}, {} rows", e.bearing, e.total_life, e.rows);
            }
        }
        Command::Train(common) => {
            let cfg = load(&common)?;
            let s = pipeline::train(&cfg)?;
            for (name, r) in [("sft", &s.sft), ("pt", &s.pt)] {
                println!(
                    "{name}: {} epochs, final loss {:.6e}, {:.1} s",
                    r.epoch_losses.len(),
                    r.epoch_losses.last().copied().unwrap_or(f64::NAN),
                    r.wall_time_secs
                );
            }
            println!("checkpoints in {}", cfg.layout().root.join("checkpoints").display());
        }
        Command::Predict { common, stage } => {
            let cfg = load(&common)?;
            for p in pipeline::predict(&cfg, stage.into())? {
                println!("wrote {}", p.display());
            }
        }
        Command::Evaluate {
            common,
            stage,
            predictions,
        } => {
            let cfg = load(&common)?;
            match predictions {
                Some(path) => println!("{}", pipeline::evaluate_file(&cfg, &path)?),
                None => {
                    for (name, report) in pipeline::evaluate(&cfg, stage.into())? {
                        println!("[{name}]\n{report}");
                    }
                }
            }
        }
        Command::Ablate { common, axis } => {
            let cfg = load(&common)?;
            let axes: Vec<AblateAxis> = match axis {
                AxisArg::All => AblateAxis::ALL.to_vec(),
                AxisArg::Blocks => vec![AblateAxis::Blocks],
                AxisArg::Patch => vec![AblateAxis::Patch],
                AxisArg::Horizon => vec![AblateAxis::Horizon],
                AxisArg::Freeze => vec![AblateAxis::Freeze],
                AxisArg::Similarity => vec![AblateAxis::Similarity],
                AxisArg::Pca => vec![AblateAxis::Pca],
                AxisArg::Projection => vec![AblateAxis::Projection],
            };
            for a in axes {
                println!("wrote {}", pipeline::ablate(&cfg, a)?.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors share exit status 1 with configuration errors; clap's own
    // default (2) would collide with data errors.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::User => 1,
                ErrorCategory::Data => 2,
                ErrorCategory::Numerical => 3,
            })
        }
    }
}
