use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hodinet::config::RunConfig;
use hodinet::{corpus, images, run, selftest, CliError, Result};

#[derive(Parser)]
#[command(name = "hodinet", version, about = "RGB-D salient object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict a saliency map for one RGB-D pair.
    Infer {
        #[arg(long)]
        config: PathBuf,
        /// Binary PPM colour image.
        #[arg(long)]
        rgb: PathBuf,
        /// Binary PGM depth map.
        #[arg(long)]
        depth: PathBuf,
        /// Output PGM, at the size of the RGB image.
        #[arg(long)]
        out: PathBuf,
        /// Also write the coarser predictions as `<out>_p2` … `<out>_p4`.
        #[arg(long)]
        all_stages: bool,
    },
    /// Train on a small corpus and save a checkpoint.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        /// Directory with rgb/, depth/ and gt/ subdirectories.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted maps against ground truth with matching file names.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Write the scores as TOML.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the built-in invariant checks.
    Selftest,
    /// Write a synthetic corpus of square scenes.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Infer {
            config,
            rgb,
            depth,
            out,
            all_stages,
        } => {
            let cfg = RunConfig::load(&config)?;
            let mut model = run::build_model(&cfg)?;
            let maps = run::infer_files(&mut model, &cfg, &rgb, &depth)?;
            let stages = if all_stages { 4 } else { 1 };
            for (i, m) in maps.iter().take(stages).enumerate() {
                let path = run::stage_path(&out, i + 1);
                images::save_map(&path, m)?;
                println!("wrote {}", path.display());
            }
        }
        Command::TrainToy { config, corpus, out } => {
            let cfg = RunConfig::load(&config)?;
            let (model, _) = run::train_corpus(&cfg, &corpus, |log| println!("{}", log.line()))?;
            run::checkpoint_of(&cfg, &model).save(&out)?;
            println!("saved {}", out.display());
        }
        Command::Eval { pred, gt, report } => {
            let outcome = run::evaluate_dirs(&pred, &gt)?;
            print!("{}", run::eval_table(&outcome.report));
            if let Some(path) = report {
                std::fs::write(&path, run::eval_report(&outcome.report)).map_err(|e| CliError::io(&path, e))?;
            }
            for f in &outcome.failures {
                eprintln!("skipped {f}");
            }
            if !outcome.failures.is_empty() {
                return Err(CliError::Failed(format!("{} file(s) could not be scored", outcome.failures.len())));
            }
        }
        Command::Gradcheck { seed } => {
            let reports = hodinet_core::gradcheck::suite(seed)?;
            print!("{}", run::gradcheck_table(&reports));
            let failed = run::gradcheck_failures(&reports);
            if !failed.is_empty() {
                return Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{:<24} {}  {}", c.name, if c.passed { "ok  " } else { "FAIL" }, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} check(s) failed")));
            }
        }
        Command::SynthCorpus { out, count, size } => {
            let triples = corpus::write_synthetic(&out, count, size)?;
            println!("wrote {} scenes to {}", triples.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
