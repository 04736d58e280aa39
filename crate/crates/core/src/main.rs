use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cec::cli::{self, RunConfig, DATASET_FILE, MODEL_FILE, REPORT_FILE};
use cec::Result;

#[derive(Parser)]
#[command(name = "cec", version, about = "Cross-episodic curriculum pipeline")]
struct Args {
    /// Run configuration (JSON). Omitted means all defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set trainer.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Output directory for this command (default: a subdirectory of the
    /// output root).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    NoXepAttention,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sequencer {
    Single,
    Fixed,
    Auto,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an episode collection.
    Gen,
    /// Draw curricular sequence manifests from a dataset.
    Assemble {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Train a policy on a dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        sequencer: Option<Sequencer>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Compare evaluation reports given as LABEL=PATH.
    Report {
        #[arg(required = true)]
        reports: Vec<String>,
        /// Labels that must be present, comma separated.
        #[arg(long, value_delimiter = ',')]
        require: Vec<String>,
    },
}

fn out_dir(args: &Args, cfg: &RunConfig, default: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| cfg.output_root().join(default))
}

fn default_dataset(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.output_root().join("data").join(DATASET_FILE))
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn execute(args: &Args) -> Result<()> {
    let mut sets = args.sets.clone();
    match &args.cmd {
        Cmd::Train { ablate: Some(Ablation::NoXepAttention), .. } => sets.push("model.cross_episodic=false".into()),
        Cmd::Eval { sequencer, runs, episodes, .. } => {
            if let Some(s) = sequencer {
                let name = match s {
                    Sequencer::Single => "single",
                    Sequencer::Fixed => "fixed",
                    Sequencer::Auto => "auto",
                };
                sets.push(format!("eval.sequencer=\"{name}\""));
            }
            if let Some(r) = runs {
                sets.push(format!("eval.runs={r}"));
            }
            if let Some(e) = episodes {
                sets.push(format!("eval.episodes={e}"));
            }
        }
        _ => {}
    }
    if let Cmd::Report { reports, require } = &args.cmd {
        let variants: Vec<_> = reports.iter().map(|r| cli::parse_variant(r)).collect();
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from("report"));
        let cmp = cli::cmd_report(&variants, require, &out)?;
        print!("{}", cmp.table());
        println!("wrote {}", out.display());
        return Ok(());
    }

    let cfg = RunConfig::load(args.config.as_deref(), &sets)?;
    match &args.cmd {
        Cmd::Gen => print_paths(&cli::cmd_gen(&cfg, &out_dir(args, &cfg, "data"))?),
        Cmd::Assemble { dataset, count } => {
            let out = out_dir(args, &cfg, "sequences");
            print_paths(&cli::cmd_assemble(&cfg, &default_dataset(&cfg, dataset), *count, &out)?);
        }
        Cmd::Train { dataset, ablate, resume } => {
            let sub = if ablate.is_some() { "train-no-xep" } else { "train" };
            let out = out_dir(args, &cfg, sub);
            let m = cli::cmd_train(&cfg, &default_dataset(&cfg, dataset), &out, resume.as_deref())?;
            if let Some(last) = m.steps.last() {
                println!("step {} loss {:.4} ({:.0} tokens/s)", last.step, last.loss, m.tokens_per_second);
            }
            println!("wrote {}", out.join(MODEL_FILE).display());
        }
        Cmd::Eval { checkpoint, .. } => {
            let ck = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.output_root().join("train").join(MODEL_FILE));
            let out = out_dir(args, &cfg, "eval");
            let report = cli::cmd_eval(&cfg, &ck, &out)?;
            println!(
                "score {:.4} ± {:.4} over {} runs, in-context improvement {:+.4}",
                report.summary.mean, report.summary.std, report.summary.runs, report.in_context_improvement
            );
            println!("wrote {}", out.join(REPORT_FILE).display());
        }
        Cmd::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
