use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flowdisagg_cli::checkpoint;
use flowdisagg_cli::commands::{self, Suite, CHECKPOINT_FILE};
use flowdisagg_cli::config::{Overrides, Preset, RunConfig};

#[derive(Parser)]
#[command(name = "flowdisagg", version, about = "Load disaggregation with a flow-prior VAE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; any subset of fields, merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also report the square root of NDE.
    #[arg(long, global = true)]
    nde_sqrt: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus loss curves.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out windows.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-window sample means with 95% intervals, one CSV per appliance.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Samples per window.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train and compare model variants on one split.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "conditioning")]
        suite: Suite,
    },
    /// Write the synthetic dataset as CSV files with a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn overrides(&self, sample_n: Option<usize>) -> Overrides {
        Overrides {
            seed: self.seed,
            output_dir: self.out.clone(),
            nde_sqrt: self.nde_sqrt,
            sample_n,
        }
    }

    fn resolve(&self, sample_n: Option<usize>) -> Result<RunConfig> {
        RunConfig::resolve(
            self.preset.unwrap_or(Preset::Desk),
            self.config.as_deref(),
            &self.overrides(sample_n),
        )
    }

    /// Config for commands that read a checkpoint. Without `--config` or
    /// `--preset`, the run stored in the checkpoint is reused.
    fn resolve_for(&self, checkpoint: Option<&PathBuf>, sample_n: Option<usize>) -> Result<(RunConfig, PathBuf)> {
        if self.config.is_some() || self.preset.is_some() {
            let config = self.resolve(sample_n)?;
            let ck = match checkpoint {
                Some(p) => p.clone(),
                None => config.output_dir.join(CHECKPOINT_FILE),
            };
            return Ok((config, ck));
        }
        let Some(ck) = checkpoint else {
            bail!("pass --checkpoint, or --preset/--config to locate one");
        };
        let bytes = std::fs::read(ck).with_context(|| format!("reading checkpoint {}", ck.display()))?;
        let (header, _) = checkpoint::read_header(&bytes)?;
        let mut config = header.run;
        self.overrides(sample_n).apply(&mut config);
        config.validate()?;
        Ok((config, ck.clone()))
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("FLOWDISAGG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .with_context(|| format!("FLOWDISAGG_THREADS={v} is not a count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train { common, resume } => {
            let config = common.resolve(None)?;
            let out = commands::train(&config, resume.as_deref())?;
            if let Some((epoch, l)) = out.epochs.last() {
                println!(
                    "epoch {epoch}: loss {:.6} (reconstruction {:.6})",
                    l.total, l.reconstruction
                );
            }
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Eval { common, checkpoint } => {
            let (config, ck) = common.resolve_for(checkpoint.as_ref(), None)?;
            let report = commands::eval(&config, &ck)?;
            print!("{}", report.to_text());
        }
        Command::Sample { common, checkpoint, n } => {
            let (config, ck) = common.resolve_for(checkpoint.as_ref(), n)?;
            for p in commands::sample(&config, &ck)? {
                println!("{}", p.display());
            }
        }
        Command::Ablate { common, suite } => {
            let table = commands::ablate(&common.resolve(None)?, suite)?;
            print!("{}", table.to_text());
        }
        Command::Synth { common } => {
            let mut config = common.resolve(None)?;
            if let Some(seed) = common.seed {
                config.data.synth.seed = seed;
            }
            println!("{}", commands::synth(&config)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
