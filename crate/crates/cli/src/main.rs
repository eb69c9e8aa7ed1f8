#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{DataArgs, DistillArgs, EvalArgs, ExtractArgs, SynthArgs, TrainArgs};
use config::{Overrides, RunConfig};
use vpr_core::Error;

#[derive(Parser)]
#[command(name = "vpr", version, about = "Visual place recognition: training, distillation, extraction and evaluation")]
struct Cli {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Allow multi-threaded execution (outputs may then differ run to run).
    #[arg(long, global = true)]
    nondeterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataOpts {
    /// Dataset manifest (CSV: image_ref, place_id, coord_system, c1, c2).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Feature archive directory [default: features/ next to the manifest].
    #[arg(long)]
    features: Option<PathBuf>,
}

impl DataOpts {
    fn into_args(self) -> DataArgs {
        DataArgs {
            manifest: self.manifest,
            features: self.features,
        }
    }
}

#[derive(Args)]
struct TrainOpts {
    #[command(flatten)]
    data: DataOpts,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic place dataset with precomputed backbone features.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        places: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        per_place: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        drift: Option<f64>,
    },
    /// Train the cross-image teacher.
    TrainTeacher {
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Distill a self-enhanced student from a teacher checkpoint.
    Distill {
        /// Teacher checkpoint directory.
        #[arg(long)]
        teacher: PathBuf,
        /// Weight of the distillation term.
        #[arg(long)]
        eta: Option<f64>,
        /// Weight of the multi-similarity term.
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Write one global descriptor per manifest record.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataOpts,
        /// Descriptor store output file.
        #[arg(long)]
        out: PathBuf,
        /// Teacher batch size; teacher descriptors depend on batch composition.
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Recall@N of query descriptors against a database.
    Eval {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        database: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        n: Vec<usize>,
        /// Reduce descriptors with PCA fit on the database.
        #[arg(long)]
        pca_dim: Option<usize>,
        /// Geographic match radius in meters (inclusive).
        #[arg(long, default_value_t = vpr_core::retrieval::DEFAULT_THRESHOLD_M)]
        threshold: f64,
        /// Explicit ground truth: lines of query_id,database_id.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Report file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory to save the fitted PCA model.
        #[arg(long)]
        pca_out: Option<PathBuf>,
    },
}

fn train_overrides(o: &mut Overrides, opts: &TrainOpts, epochs_key: &str) {
    o.set_opt(epochs_key, opts.epochs.map(int));
    o.set_opt("train.seed", opts.seed.map(int));
    o.set_opt("train.lr0", opts.lr);
    o.set_opt("train.steps_per_epoch", opts.steps_per_epoch.map(int));
}

/// TOML integers are signed 64-bit; larger values saturate.
fn int(v: impl TryInto<i64>) -> i64 {
    v.try_into().unwrap_or(i64::MAX)
}

fn run(cli: Cli) -> vpr_core::Result<()> {
    let mut o = Overrides::default();
    if cli.nondeterministic {
        o.set("mode.deterministic", false);
    }
    match &cli.command {
        Command::Synth {
            out,
            places,
            per_place,
            seed,
            noise,
            drift,
        } => {
            o.set("paths.output", out.display().to_string());
            o.set_opt("synth.places", places.map(int));
            o.set_opt("synth.per_place", per_place.map(int));
            o.set_opt("synth.seed", seed.map(int));
            o.set_opt("synth.noise", *noise);
            o.set_opt("synth.drift", *drift);
        }
        Command::TrainTeacher { opts } => train_overrides(&mut o, opts, "train.epochs_teacher"),
        Command::Distill { eta, gamma, opts, .. } => {
            train_overrides(&mut o, opts, "train.epochs_student");
            o.set_opt("train.weights.eta", *eta);
            o.set_opt("train.weights.gamma", *gamma);
        }
        Command::Extract { .. } => {}
        Command::Eval { pca_dim, .. } => o.set_opt("mode.pca_dim", pca_dim.map(int)),
    }
    let seed = match &cli.command {
        Command::Synth { seed, .. } => seed.map(|s| ("synth.seed", s)),
        Command::TrainTeacher { opts } | Command::Distill { opts, .. } => opts.seed.map(|s| ("train.seed", s)),
        _ => None,
    };
    if let Some((key, _)) = seed.filter(|&(_, s)| s > i64::MAX as u64) {
        let mut err = vpr_core::ValidationError::default();
        err.push(key, "must be below 2^63");
        return Err(err.into());
    }
    let cfg = RunConfig::load(cli.config.as_deref(), o)?;
    if cfg.mode.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Synth { out, .. } => commands::synth(&cfg, &SynthArgs { out }),
        Command::TrainTeacher { opts } => {
            let epochs = opts.epochs;
            let args = TrainArgs {
                data: opts.data.into_args(),
                out: opts.out,
                resume: opts.resume,
            };
            commands::train_teacher(&cfg, &args, epochs)
        }
        Command::Distill { teacher, opts, .. } => {
            let epochs = opts.epochs;
            let args = DistillArgs {
                train: TrainArgs {
                    data: opts.data.into_args(),
                    out: opts.out,
                    resume: opts.resume,
                },
                teacher,
            };
            commands::distill(&cfg, &args, epochs)
        }
        Command::Extract {
            checkpoint,
            data,
            out,
            batch,
        } => commands::extract(
            &cfg,
            &ExtractArgs {
                checkpoint,
                data: data.into_args(),
                out,
                batch,
            },
        ),
        Command::Eval {
            query,
            database,
            n,
            threshold,
            pairs,
            out,
            pca_out,
            ..
        } => commands::eval(
            &cfg,
            &EvalArgs {
                query,
                database,
                ns: n,
                threshold_m: threshold,
                pairs,
                out,
                pca_out,
            },
        ),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
