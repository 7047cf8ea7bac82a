//! Operator surface: dataset preparation, training, evaluation, and the
//! robustness experiments as subcommands of one binary.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 training
//! divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drgo::graph::{FileFormat, PositiveRule, SplitKind};
use drgo::pipeline::{
    diagnose_cmd, evaluate_cmd, prepare_cmd, sweep_cmd, synth_cmd, train_cmd, weights_fig_cmd,
    PipelineError, PrepareOpts,
};
use drgo::synth::SynthConfig;
use drgo::trainer::{Method, TrainConfig};

#[derive(Parser)]
#[command(name = "drgo", version, about = "Distributionally robust graph recommendation")]
struct Cli {
    /// Output directory; defaults to $DRGO_OUT or ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides applied after the flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_clusters: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    sinkhorn_lambda: Option<f64>,
    #[arg(long)]
    entropy_beta: Option<f64>,
    #[arg(long)]
    top_pct: Option<f64>,
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    diffusion_t_start: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training objective: drgo, erm, or kl-dro.
    #[arg(long)]
    method: Option<Method>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! over {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        over!(embed_dim);
        over!(n_layers);
        over!(n_clusters);
        over!(rho);
        over!(sinkhorn_lambda);
        over!(entropy_beta);
        over!(top_pct);
        over!(diffusion_steps);
        over!(diffusion_t_start);
        over!(learning_rate);
        over!(weight_decay);
        over!(epochs);
        over!(batch_size);
        over!(patience);
        over!(seed);
        if let Some(m) = self.method {
            cfg.method = m;
        }
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                drgo::trainer::TrainError::BadOverride(format!("--set needs KEY=VALUE, got {kv:?}"))
            })?;
            cfg.apply_override(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the filtered graph from raw interactions and write an OOD
    /// split bundle.
    Prepare {
        /// Delimited interaction file: user, item[, rating[, timestamp]].
        input: PathBuf,
        #[arg(long, value_parser = parse_split_kind)]
        split: SplitKind,
        #[arg(long, default_value_t = 0.2)]
        ood_fraction: f64,
        #[arg(long, default_value_t = 0)]
        min_user_deg: usize,
        #[arg(long, default_value_t = 0)]
        min_item_deg: usize,
        /// Keep interactions with rating >= this value.
        #[arg(long, conflicts_with = "min_watch_ratio")]
        min_rating: Option<f64>,
        /// Keep interactions with watch ratio >= this value.
        #[arg(long)]
        min_watch_ratio: Option<f64>,
        /// Use comma instead of tab as the field delimiter.
        #[arg(long)]
        csv: bool,
        /// Skip the first line of the input.
        #[arg(long)]
        header: bool,
        /// Input has no rating column.
        #[arg(long)]
        no_rating: bool,
        /// Input has no timestamp column.
        #[arg(long)]
        no_timestamp: bool,
        /// Fully observed edge list (exposure split only).
        #[arg(long)]
        observed: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the synthetic benchmark.
    Synth {
        #[arg(long, default_value_t = 2000)]
        users: usize,
        #[arg(long, default_value_t = 1500)]
        items: usize,
        #[arg(long, default_value_t = 20)]
        interactions_per_user: usize,
        #[arg(long, default_value_t = 0.0)]
        minor_fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a prepared split; writes checkpoint, history, weights.
    Train {
        /// Directory produced by `prepare`.
        split_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a checkpoint on the held-out sides of a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split_dir: PathBuf,
        /// Comma-separated ranking cutoffs.
        #[arg(long, default_value = "10,20", value_delimiter = ',')]
        ks: Vec<usize>,
    },
    /// Noise-robustness sweep: retrain each method per noise ratio.
    SweepNoise {
        split_dir: PathBuf,
        #[arg(long, default_value = "0.05,0.10,0.15,0.25", value_delimiter = ',')]
        ratios: Vec<f64>,
        #[arg(long, default_value = "drgo,erm,kl-dro", value_delimiter = ',')]
        methods: Vec<Method>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Weight-trajectory experiment on the labeled cohort benchmark.
    WeightsFig {
        #[arg(long, default_value_t = 0.1)]
        noise_fraction: f64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// KL-blowup contrast and the variance diagnostic.
    Diagnose {
        #[arg(long, default_value_t = 50)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_split_kind(s: &str) -> Result<SplitKind, String> {
    s.parse()
}

fn out_dir(cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| {
        std::env::var_os("DRGO_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("out"))
    })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let out = out_dir(&cli.out);
    match cli.command {
        Command::Prepare {
            input,
            split,
            ood_fraction,
            min_user_deg,
            min_item_deg,
            min_rating,
            min_watch_ratio,
            csv,
            header,
            no_rating,
            no_timestamp,
            observed,
            seed,
        } => {
            let rule = match (min_rating, min_watch_ratio) {
                (_, Some(w)) => PositiveRule::MinWatchRatio(w),
                (Some(r), None) => PositiveRule::MinRating(r),
                (None, None) => PositiveRule::MinRating(f64::NEG_INFINITY),
            };
            let opts = PrepareOpts {
                format: FileFormat {
                    delimiter: if csv { ',' } else { '\t' },
                    has_header: header,
                    has_rating: !no_rating,
                    has_timestamp: !no_timestamp,
                },
                min_user_deg,
                min_item_deg,
                rule,
                kind: split,
                ood_fraction,
                observed_path: observed,
                seed,
            };
            prepare_cmd(&input, &opts, &out)?;
            println!("split written to {}", out.display());
        }
        Command::Synth {
            users,
            items,
            interactions_per_user,
            minor_fraction,
            noise_fraction,
            seed,
        } => {
            let cfg = SynthConfig {
                n_users: users,
                n_items: items,
                interactions_per_user,
                minor_user_fraction: minor_fraction,
                noise_fraction,
                seed,
                ..Default::default()
            };
            synth_cmd(&cfg, &out)?;
            println!("benchmark written to {}", out.display());
        }
        Command::Train { split_dir, config } => {
            let cfg = config.resolve()?;
            train_cmd(&cfg, &split_dir, &out)?;
            println!("training artifacts written to {}", out.display());
        }
        Command::Evaluate {
            checkpoint,
            split_dir,
            ks,
        } => {
            evaluate_cmd(&checkpoint, &split_dir, &ks, &out)?;
            println!("report written to {}", out.display());
        }
        Command::SweepNoise {
            split_dir,
            ratios,
            methods,
            config,
        } => {
            let cfg = config.resolve()?;
            let report = sweep_cmd(&cfg, &split_dir, &ratios, &methods, &out)?;
            for cell in &report.cells {
                println!(
                    "{:>6} ratio {:>5.2}: recall@20 {:.4} (decline {:+.2}%)",
                    cell.method,
                    cell.ratio,
                    cell.recall20,
                    100.0 * cell.relative_decline
                );
            }
            println!("sweep written to {}", out.display());
        }
        Command::WeightsFig {
            noise_fraction,
            config,
        } => {
            let cfg = config.resolve()?;
            let outcome = weights_fig_cmd(&cfg, noise_fraction, &out)?;
            println!(
                "final noise-group weight: drgo {:.4}, kl-dro {:.4}",
                drgo::eval::experiments::TrajectoryOutcome::final_noise_weight(&outcome.drgo),
                drgo::eval::experiments::TrajectoryOutcome::final_noise_weight(&outcome.baseline),
            );
            println!("trajectories written to {}", out.display());
        }
        Command::Diagnose { pairs, seed } => {
            let value = diagnose_cmd(seed, pairs, &out)?;
            println!(
                "kl divergence infinite on {}/{} disjoint-support pairs; transport finite on {}/{}",
                value["kl_infinite"], pairs, value["sinkhorn_finite"], pairs
            );
            println!("variance diagnostic path:");
            for point in value["variance_path"].as_array().unwrap() {
                println!(
                    "  noisy mass {:.2} -> variance {:.6}",
                    point["noisy_mass"].as_f64().unwrap(),
                    point["variance"].as_f64().unwrap()
                );
            }
            println!("details written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            // machine-readable failure record on stderr
            eprintln!(
                "{{\"error\": {:?}, \"exit_code\": {}}}",
                err.to_string(),
                err.exit_code()
            );
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
