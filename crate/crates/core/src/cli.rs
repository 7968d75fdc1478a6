//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data
//! error, 3 numerical failure.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{PipelineConfig, Profile};
use crate::corpus::make_corpus;
use crate::error::{Error, Result};
use crate::pipeline::{
    cmd_anonymize, cmd_build_pool, cmd_evaluate, cmd_features, cmd_train, SystemInputs,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "vqanon",
    version,
    about = "VQ-VAE speaker anonymization pipeline"
)]
pub struct Cli {
    /// JSON config merged over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Paper)]
    pub profile: Profile,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic two-speaker corpus, stub x-vectors and stub pool.
    MakeCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        per_speaker: usize,
    },
    /// Extract mel, F0 and energy caches from `{speaker}/{utterance}.wav`.
    Features {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average x-vectors per speaker into a pool file.
    BuildPool {
        #[arg(long)]
        xvectors: PathBuf,
        /// Feature caches supplying per-speaker mean log-F0.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train or resume a model on cached features.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        xvectors: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resynthesize utterances with pseudo-speakers.
    Anonymize {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        xvectors: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Checkpoint file or training run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        system: u8,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// EER and UAR tables from verifier and emotion-recognizer outputs.
    Evaluate {
        /// `[NAME=]PATH`, repeatable.
        #[arg(long, required = true)]
        trials: Vec<String>,
        /// `[NAME=]PATH`, matched to trials by name.
        #[arg(long)]
        emotion: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn split_named(arg: &str, index: usize) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => (format!("system{}", index + 1), PathBuf::from(arg)),
    }
}

fn system_inputs(trials: &[String], emotion: &[String]) -> Result<Vec<SystemInputs>> {
    let mut inputs: Vec<SystemInputs> = trials
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (name, trials) = split_named(t, i);
            SystemInputs {
                name,
                trials,
                emotion: None,
            }
        })
        .collect();
    for (i, e) in emotion.iter().enumerate() {
        let (name, path) = split_named(e, i);
        let slot = inputs
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("emotion file for unknown system {name}")))?;
        slot.emotion = Some(path);
    }
    Ok(inputs)
}

fn default_out(cfg: &PipelineConfig, given: Option<PathBuf>, name: &str) -> PathBuf {
    given.unwrap_or_else(|| cfg.run_root().join(name))
}

fn report_skips(what: &str, skipped: usize, total: usize) -> i32 {
    if skipped == 0 {
        EXIT_OK
    } else {
        eprintln!("{skipped} of {total} {what} skipped");
        EXIT_DATA
    }
}

/// Runs one parsed command and returns its exit code.
pub fn execute(cli: Cli) -> Result<i32> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), cli.profile, cli.seed)?;
    match cli.command {
        Command::MakeCorpus { out, per_speaker } => {
            let layout = make_corpus(&out, per_speaker, cfg.seed)?;
            println!(
                "wrote {} clips under {}",
                layout.utterances.len(),
                out.display()
            );
            Ok(EXIT_OK)
        }
        Command::Features { input, out } => {
            let out = default_out(&cfg, out, "features");
            let s = cmd_features(&input, &out, &cfg)?;
            println!("{} feature caches in {}", s.rows.len(), out.display());
            Ok(report_skips(
                "files",
                s.skipped.len(),
                s.rows.len() + s.skipped.len(),
            ))
        }
        Command::BuildPool {
            xvectors,
            features,
            out,
        } => {
            let pool = cmd_build_pool(&xvectors, features.as_deref(), &out)?;
            println!("pool of {} speakers in {}", pool.len(), out.display());
            Ok(EXIT_OK)
        }
        Command::Train {
            features,
            xvectors,
            out,
        } => {
            let out = default_out(&cfg, out, "train");
            let s = cmd_train(&features, xvectors.as_deref(), &out, &cfg, |r| {
                log::info!(
                    "step {} epoch {} lr {:.4e} mel {:.4} gen {:.4} disc {:.4}",
                    r.step,
                    r.epoch,
                    r.lr,
                    r.mel_l1,
                    r.total_gen,
                    r.total_disc
                );
            })?;
            println!(
                "{} steps; latest checkpoint {}",
                s.reports.len(),
                s.final_checkpoint.display()
            );
            Ok(EXIT_OK)
        }
        Command::Anonymize {
            features,
            xvectors,
            pool,
            checkpoint,
            system,
            out,
        } => {
            let out = default_out(&cfg, out, &format!("anonymized-system{system}"));
            let s = cmd_anonymize(&features, &xvectors, &pool, &checkpoint, system, &out, &cfg)?;
            println!(
                "{} utterances anonymized into {}",
                s.records.len(),
                out.display()
            );
            Ok(report_skips(
                "utterances",
                s.skipped.len(),
                s.records.len() + s.skipped.len(),
            ))
        }
        Command::Evaluate {
            trials,
            emotion,
            out,
        } => {
            let inputs = system_inputs(&trials, &emotion)?;
            let report = cmd_evaluate(&inputs, out.as_deref())?;
            print!("{}", report.table);
            if report.systems.iter().all(|s| s.uar.is_none()) {
                println!("UAR: absent (no emotion file)");
            }
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args`, runs the command and maps failures to exit codes.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
