mod cache;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Gradient-deviation membership detection on a toy causal LM.
///
/// Stages read and write under `output_dir` (from the config), in this
/// order: pretrain, extract, then detect / ablate / baselines / dynamics.
#[derive(Parser, Debug)]
#[command(name = "gds", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat TOML run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set pretrain_epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for per-sample work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Recompute artifacts that already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Root for relative `output_dir` values.
    #[arg(long, env = "GDS_OUTPUT_ROOT", global = true)]
    output_root: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy LM on every member sample; writes the checkpoint.
    Pretrain,
    /// Probe every sample and cache its feature vector.
    Extract,
    /// Fit the detector and score GDS plus baselines on the eval split.
    Detect,
    /// Refit the detector with each feature group removed.
    Ablate,
    /// Score likelihood baselines only.
    Baselines,
    /// Track LoRA update statistics during fine-tuning on non-members.
    Dynamics,
    /// Write a synthetic member / non-member corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        pretrain_members: usize,
        #[arg(long, default_value_t = 200)]
        probe_members: usize,
        #[arg(long, default_value_t = 200)]
        nonmembers: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::SynthCorpus { out, seed, pretrain_members, probe_members, nonmembers } => {
            stages::synth_corpus(&out, seed, pretrain_members, probe_members, nonmembers)
        }
        cmd => stages::Ctx::new(&cli.common).and_then(|ctx| match cmd {
            Command::Pretrain => ctx.pretrain(),
            Command::Extract => ctx.extract(),
            Command::Detect => ctx.detect(),
            Command::Ablate => ctx.ablate(),
            Command::Baselines => ctx.baselines(),
            Command::Dynamics => ctx.dynamics(),
            Command::SynthCorpus { .. } => unreachable!("handled above"),
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<stages::UsageError>() {
                Some(_) => ExitCode::from(2),
                None => ExitCode::from(1),
            }
        }
    }
}
