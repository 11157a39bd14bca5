use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rfvae::harness::{self, ExperimentConfig, RunDir};
use rfvae::{Error, Result};

/// Train and score disentangled VAEs on procedurally generated sprites.
#[derive(Parser, Debug)]
#[command(name = "rfvae", version)]
struct Cli {
    /// JSON experiment config; defaults to `<out>/config.json` if present,
    /// otherwise the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset (desk or paper) used when no config file is given.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the dataset to an RFDS file.
    Generate,
    /// Train (or resume) to the configured iteration count.
    Train,
    /// Compute Metrics I, II and III plus latent diagnostics.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the ground-truth factors instead of the encoder.
        #[arg(long)]
        oracle: bool,
    },
    /// Write latent traversal grids.
    Traverse {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset index of the seed image.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Merge metrics.csv files (or run directories) into one table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<(ExperimentConfig, RunDir)> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(_), Some(_)) => return Err(Error::Config("give either --config or --preset".into())),
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => match cli.out.as_ref().map(|o| RunDir::new(o).config()) {
            Some(p) if p.exists() => ExperimentConfig::load(&p)?,
            _ => ExperimentConfig::desk(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
    }
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    Ok((cfg, RunDir::new(out)))
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Report { inputs } = &cli.command {
        let merged = harness::cmd_report(inputs, cli.out.as_deref())?;
        print!("{}", merged.to_text());
        return Ok(());
    }
    let (cfg, dir) = resolve_config(&cli)?;
    match cli.command {
        Command::Generate => {
            let s = harness::cmd_generate(&cfg, &dir)?;
            println!("{} images, {} bytes -> {}", s.images, s.bytes, s.path.display());
        }
        Command::Train => {
            let s = harness::cmd_train(&cfg, &dir)?;
            if let Some(step) = s.resumed_from {
                println!("resumed at step {step}");
            }
            match s.last {
                Some(b) => println!("step {}: total {:.4} recon {:.4} tc {:.4}", s.final_step, b.total, b.recon, b.tc_estimate),
                None => println!("step {}: nothing to do", s.final_step),
            }
        }
        Command::Eval { checkpoint, oracle } => {
            let o = harness::cmd_eval(&cfg, &dir, checkpoint.as_deref(), oracle)?;
            print!("{}", o.report.to_text());
            println!("-> {}", dir.metrics_csv().display());
        }
        Command::Traverse { checkpoint, index } => {
            let dims = harness::cmd_traverse(&cfg, &dir, checkpoint.as_deref(), index)?;
            for d in &dims {
                println!("{}{}", d.path.display(), if d.relevant { "  (relevant)" } else { "" });
            }
        }
        Command::Report { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("error[config]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {line}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
