use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csri::experiment::{cmd_compare, cmd_eval, cmd_prepare, cmd_train, ExperimentConfig};
use csri::synth::{generate, write_corpus, CorpusSpec};
use csri::trainer::Variant;
use csri::Error;

#[derive(Parser)]
#[command(name = "csri", version, about = "Cross-resolution face recognition experiments")]
struct Cli {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the protocol seed and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.workspace`.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Builds the identity split, degraded native images and the manifest.
    Prepare,
    /// Trains one variant and writes its checkpoints and loss log.
    Train {
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Evaluates a trained variant on the test split.
    Eval {
        #[arg(long)]
        variant: Option<Variant>,
        /// Checkpoint to evaluate instead of the variant's final one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Tabulates the evaluated variants side by side.
    Compare,
    /// Writes a procedurally generated face corpus to `paths.corpus`.
    Synth {
        #[arg(long, default_value_t = 40)]
        auxiliary_identities: usize,
        #[arg(long, default_value_t = 10)]
        auxiliary_images: usize,
        #[arg(long, default_value_t = 41)]
        native_identities: usize,
        #[arg(long, default_value_t = 6)]
        native_images_max: usize,
        #[arg(long, default_value_t = 100)]
        distractors: usize,
    },
    /// Prints the effective config as TOML.
    Config,
}

fn load(cli: &Cli) -> csri::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(w) = &cli.workspace {
        cfg.paths.workspace = w.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> csri::Result<()> {
    let cfg = load(&cli)?;
    match cli.command {
        Command::Prepare => {
            let m = cmd_prepare(&cfg)?;
            println!("wrote {} ({} records)", cfg.manifest_path().display(), m.records.len());
        }
        Command::Train { variant } => {
            let v = variant.unwrap_or(cfg.train.variant);
            let run = cmd_train(&cfg, v)?;
            println!("trained {v}: {} steps -> {}", run.log.len(), cfg.checkpoint_dir(v).display());
        }
        Command::Eval { variant, checkpoint } => {
            let v = variant.unwrap_or(cfg.train.variant);
            let r = cmd_eval(&cfg, v, checkpoint.as_deref())?;
            println!(
                "{}: rank1 {:.4} rank20 {:.4} rank50 {:.4} mAP {:.4} ({} probes, gallery {})",
                r.variant,
                r.rank1,
                r.rank(20),
                r.rank(50),
                r.map,
                r.probe_count,
                r.gallery_size
            );
        }
        Command::Compare => {
            let rows = cmd_compare(&cfg)?;
            for r in rows {
                println!("{:<36} rank1 {:>7.2} mAP {:>7.2}", r.label, r.rank1, r.map);
            }
        }
        Command::Synth {
            auxiliary_identities,
            auxiliary_images,
            native_identities,
            native_images_max,
            distractors,
        } => {
            let (height, width) = cfg.hr_size();
            let spec = CorpusSpec {
                auxiliary_identities,
                auxiliary_images,
                native_identities,
                native_images_max,
                distractors,
                height,
                width,
                seed: cfg.seed,
            };
            write_corpus(&generate(&spec)?, &cfg.paths.corpus)?;
            println!("wrote corpus to {}", cfg.paths.corpus.display());
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category().as_str());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    use csri::ErrorCategory::*;
    match e.category() {
        Config => 2,
        Input | Parse => 3,
        Protocol => 4,
        Training => 5,
        Checkpoint => 6,
        Io => 7,
    }
}
