//! `pinadapt`: adapt a source-trained segmenter to an unseen domain from a
//! single vision-language embedding.
//!
//! Exit codes: 0 ok, 1 experiment gate failed, 2 usage/validation error,
//! 3 runtime failure. Logs go to stderr; machine-readable results to files
//! under --out.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};

use pinadapt_cli::{
    configure_workers, run_adapt, run_augment, run_concept, run_eval, run_mine, run_show_config,
    run_toy_e2e_cmd, run_train_source, MineTarget,
};

#[derive(Parser)]
#[command(
    name = "pinadapt",
    about = "Zero-/one-shot domain adaptation for segmentation from a single vision-language embedding",
    version
)]
struct Cli {
    /// Size of the worker pool for data-parallel stages.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine a style bank from source features toward one target embedding.
    #[command(group(
        ArgGroup::new("target").required(true).args(["prompt", "image", "concept"])
    ))]
    Mine {
        /// Target domain described in natural language.
        #[arg(long)]
        prompt: Option<String>,
        /// Single unlabeled target image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Directory of an optimized concept artifact.
        #[arg(long)]
        concept: Option<PathBuf>,
        /// Style text appended to the concept (only with --concept).
        #[arg(long, requires = "concept", default_value = "")]
        suffix: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize the source concept in the token-embedding space.
    Concept {
        #[arg(long, default_value = "in clear weather")]
        suffix: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the classifier on the labeled source dataset.
    TrainSource {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a source checkpoint on augmented features.
    #[command(group(
        ArgGroup::new("style_source").required(true).args(["bank", "self_perturb_snr"])
    ))]
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Style bank directory produced by `mine`.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Bank-free baseline: perturb each feature's own statistics at
        /// this SNR (dB).
        #[arg(long)]
        self_perturb_snr: Option<f64>,
        /// Reuse (or build) a low-level feature cache here.
        #[arg(long)]
        feature_cache: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints; several checkpoints aggregate to mean +/- std.
    Eval {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Which configured dataset to evaluate on.
        #[arg(long, default_value = "target-val")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stylize source features with a bank and write them as a cache.
    Augment {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        style_mix: bool,
        #[arg(long)]
        gauss_snr: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-command desk acceptance run on the toy backend.
    ToyE2e {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the fully resolved configuration for a backend.
    ShowConfig {
        #[arg(long, default_value = "toy")]
        backend: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    configure_workers(cli.workers);

    let result = match cli.command {
        Command::Mine {
            prompt,
            image,
            concept,
            suffix,
            config,
            seed,
            out,
        } => {
            let target = match (prompt, image, concept) {
                (Some(p), None, None) => MineTarget::Prompt(p),
                (None, Some(i), None) => MineTarget::ImagePath(i),
                (None, None, Some(dir)) => MineTarget::Concept { dir, suffix },
                _ => unreachable!("clap group enforces exactly one target"),
            };
            run_mine(config.as_deref(), seed, target, &out)
        }
        Command::Concept {
            suffix,
            config,
            seed,
            out,
        } => run_concept(config.as_deref(), seed, &suffix, &out),
        Command::TrainSource { config, seed, out } => {
            run_train_source(config.as_deref(), seed, &out)
        }
        Command::Adapt {
            checkpoint,
            bank,
            self_perturb_snr,
            feature_cache,
            config,
            seed,
            out,
        } => run_adapt(
            config.as_deref(),
            seed,
            &checkpoint,
            bank.as_deref(),
            self_perturb_snr,
            feature_cache.as_deref(),
            &out,
        ),
        Command::Eval {
            checkpoint,
            split,
            config,
            seed,
            out,
        } => run_eval(config.as_deref(), seed, &checkpoint, &split, &out),
        Command::Augment {
            bank,
            style_mix,
            gauss_snr,
            config,
            seed,
            out,
        } => run_augment(config.as_deref(), seed, &bank, style_mix, gauss_snr, &out),
        Command::ToyE2e {
            seed,
            n_train,
            n_val,
            out,
        } => run_toy_e2e_cmd(&out, seed, n_train, n_val),
        Command::ShowConfig { backend, config } => run_show_config(&backend, config.as_deref()),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
