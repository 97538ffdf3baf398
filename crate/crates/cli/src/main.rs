use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use veilvec::pipeline::{self, PipelineConfig};
use veilvec::Error;

#[derive(Parser)]
#[command(name = "veilvec", version, about = "Attribute protection of speaker embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value configuration file; defaults to the reference experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for every artefact.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or import) a corpus and split it by speaker.
    Gen(Common),
    /// Train the attribute classifier and its calibration map.
    TrainClf(Common),
    /// Train the adversarial autoencoder.
    TrainAe(Common),
    /// Protect the test part.
    Protect {
        #[command(flatten)]
        common: Common,
        /// Protection condition in [0, 1].
        #[arg(long)]
        w: Option<f64>,
    },
    /// Attribute-concealment metrics.
    EvalPrivacy(Common),
    /// Speaker-verification metrics.
    EvalAsv(Common),
    /// Merge all results into one report.
    Report(Common),
}

fn load(common: &Common) -> veilvec::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => pipeline::load_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn wrote(paths: Vec<PathBuf>) {
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
}

fn run(command: Command) -> veilvec::Result<()> {
    match command {
        Command::Gen(c) => wrote(pipeline::cmd_gen(&load(&c)?)?),
        Command::TrainClf(c) => wrote(pipeline::cmd_train_clf(&load(&c)?)?),
        Command::TrainAe(c) => wrote(pipeline::cmd_train_ae(&load(&c)?)?),
        Command::Protect { common, w } => wrote(pipeline::cmd_protect(&load(&common)?, w)?),
        Command::EvalPrivacy(c) => {
            let cfg = load(&c)?;
            let report = pipeline::cmd_eval_privacy(&cfg)?;
            for part in &report.partitions {
                for r in &part.rows {
                    eprintln!(
                        "{} {}: auc {:.4} cllr_min {:.4} d_ece {:.4} log10_lw {:.3} tag {} mi {:.4}",
                        part.partition, r.condition, r.auc, r.cllr_min, r.d_ece, r.log10_lw, r.tag, r.mi_avg_bits
                    );
                }
            }
            wrote(vec![cfg.resolve(&cfg.paths.privacy_report)]);
        }
        Command::EvalAsv(c) => {
            let cfg = load(&c)?;
            let report = pipeline::cmd_eval_asv(&cfg)?;
            for r in &report.rows {
                eprintln!("{}: eer {:.4} cllr_min {:.4}", r.condition, r.eer, r.cllr_min);
            }
            wrote(vec![cfg.resolve(&cfg.paths.asv_report)]);
        }
        Command::Report(c) => {
            let cfg = load(&c)?;
            pipeline::cmd_report(&cfg)?;
            wrote(vec![cfg.resolve(&cfg.paths.report)]);
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
