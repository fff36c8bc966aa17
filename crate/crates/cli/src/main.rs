//! `avsr`: generate data, train, evaluate and sweep noise levels.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use avsr::commands;
use avsr::config::RunConfig;
use avsr::data::Split;
use avsr::model::Target;
use avsr::AvsrError;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "avsr", version, about = "End-to-end audiovisual word recognition on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// key = value run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides `seed` from the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// audio, video, av or mfcc
    #[arg(long, global = true)]
    target: Option<String>,
    /// evaluation SNR in dB (omit for clean)
    #[arg(long, global = true, allow_hyphen_values = true)]
    snr: Option<f64>,
    /// train: resume from this checkpoint; eval: checkpoint to evaluate
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// gen-data: dataset directory; other commands: output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the synthetic dataset and its manifest
    GenData,
    /// Run the staged schedule for one target
    Train,
    /// Classification rate of a checkpoint, plus a predictions CSV
    Eval {
        /// train, val or test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// CR of every model at clean and each grid SNR
    SweepSnr {
        /// sweep only the checkpoints that exist
        #[arg(long)]
        partial: bool,
    },
}

fn target(cli: &Cli) -> avsr::Result<Target> {
    let t = cli.target.as_deref().ok_or_else(|| AvsrError::Config("--target is required for this command".into()))?;
    Target::parse(t)
}

fn run(cli: &Cli) -> avsr::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &cli.out {
        match cli.cmd {
            Cmd::GenData => cfg.data_dir = o.clone(),
            _ => cfg.out_dir = o.clone(),
        }
    }
    print!("# effective config\n{}", cfg.echo());
    let start = Instant::now();
    match &cli.cmd {
        Cmd::GenData => {
            let (manifest, fp) = commands::gen_data(&cfg)?;
            println!("manifest {}", manifest.display());
            println!("fingerprint {fp}");
        }
        Cmd::Train => {
            let t = target(cli)?;
            let out = commands::train(&cfg, t, cli.checkpoint.as_deref())?;
            for s in &out.stages {
                println!("stage {} ran {} epochs", s.name, s.epochs);
            }
            println!("checkpoint {}", out.checkpoint.display());
            println!("metrics {}", out.metrics.display());
        }
        Cmd::Eval { split } => {
            let t = target(cli)?;
            let split = Split::parse(split).ok_or_else(|| AvsrError::Config(format!("--split: expected train, val or test, got '{split}'")))?;
            let ck = cli.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_for(t));
            let (report, path) = commands::eval(&cfg, t, &ck, split, cli.snr)?;
            println!("cr {:.4} ({} clips)", report.cr, report.predictions.len());
            println!("predictions {}", path.display());
        }
        Cmd::SweepSnr { partial } => {
            let mut models = Vec::new();
            for t in [Target::Audio, Target::Video, Target::Av, Target::Mfcc] {
                let p = cfg.checkpoint_for(t);
                if p.is_file() {
                    models.push((t, p));
                } else if !partial {
                    return Err(AvsrError::Missing(format!("{t} checkpoint {} (pass --partial to sweep a subset)", p.display())));
                }
            }
            let (rows, path) = commands::sweep_snr(&cfg, &models)?;
            print!("{}", commands::sweep_csv(&rows));
            println!("sweep {}", path.display());
        }
    }
    eprintln!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
