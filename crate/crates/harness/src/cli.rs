//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::pipeline::{self, Outputs};

#[derive(Debug, Parser)]
#[command(name = "matchsearch", version, about = "Search, retrain and evaluate matching operators on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the dataset and write its summary and digest.
    Gen(Common),
    /// Stage 1: bilevel search over the operator space.
    Search(Common),
    /// Stage 2: retrain the retained operators from scratch.
    Retrain(Common),
    /// Evaluate the retrained model on the validation split.
    Eval(Common),
    /// Finite-difference gradient check of every operator.
    Gradcheck(Common),
    /// Train single-operator baselines and write the attribute matrix.
    Report(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace existing artifacts.
    #[arg(long)]
    pub overwrite: bool,
}

impl Common {
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        Ok(cfg)
    }

    fn outputs(&self, cfg: &RunConfig) -> Result<Outputs> {
        let dir = cfg
            .output_dir
            .clone()
            .ok_or_else(|| HarnessError::Usage("no output directory: pass --out or set output_dir".into()))?;
        Ok(Outputs {
            dir,
            overwrite: self.overwrite,
        })
    }
}

fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Gen(c) => {
            let cfg = c.config()?;
            let s = pipeline::gen(&cfg, &c.outputs(&cfg)?)?;
            println!(
                "{} train / {} validation pairs ({} clean), sha256 {}",
                s.train_pairs, s.val_pairs, s.clean_val_pairs, s.sha256
            );
        }
        Command::Search(c) => {
            let cfg = c.config()?;
            let a = pipeline::search(&cfg, &c.outputs(&cfg)?)?;
            for r in [&a.cls, &a.reg] {
                println!(
                    "{}: retained {} + {}{}",
                    r.branch.name(),
                    r.retained.first,
                    r.retained.second,
                    if r.retained.degenerate { " (degenerate)" } else { "" }
                );
            }
        }
        Command::Retrain(c) => {
            let cfg = c.config()?;
            let a = pipeline::retrain(&cfg, &c.outputs(&cfg)?)?;
            println!(
                "validation loss {:.6} -> {:.6}",
                a.report.initial_val_loss, a.report.final_val_loss
            );
        }
        Command::Eval(c) => {
            let cfg = c.config()?;
            let a = pipeline::eval(&cfg, &c.outputs(&cfg)?)?;
            print!("mean IoU {:.4}, AUC {:.4}", a.mean_iou, a.metrics.overall.auc);
            match a.clean_mean_iou {
                Some(v) => println!(", clean mean IoU {v:.4}"),
                None => println!(),
            }
        }
        Command::Gradcheck(c) => {
            let cfg = c.config()?;
            for (kind, err) in pipeline::gradcheck(&cfg)? {
                println!("{kind:<20} {err:.3e}");
            }
        }
        Command::Report(c) => {
            let cfg = c.config()?;
            let out = c.outputs(&cfg)?;
            let rows = pipeline::report(&cfg, &out)?;
            for r in &rows {
                println!("{:<40} AUC {:.4}", r.label, r.metrics.overall.auc);
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
