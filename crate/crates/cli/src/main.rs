use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use textdistill_cli::commands::{self, Command};
use textdistill_cli::{CliError, CliResult, RunConfig};

/// Gradient-matching text distillation on a tiny language model.
#[derive(Parser, Debug)]
#[command(name = "textdistill", version)]
struct Args {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (overrides `paths.out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `section.key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Write the generated toy corpus and splits as JSONL.
    ToyData,
    /// Build the vocabulary and pretrain the base model.
    Pretrain,
    /// Build gradient targets, generate and filter the synthetic pool.
    Distill,
    /// Fine-tune the base model on the synthetic (or configured) set.
    Finetune,
    /// Accuracy, FID, nearest-real distances and membership inference.
    Evaluate,
    /// Check the convergence bounds on random quadratic instances.
    Theory,
    /// Collect all artifacts into one JSON and Markdown summary.
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::ToyData => Command::ToyData,
            Cmd::Pretrain => Command::Pretrain,
            Cmd::Distill => Command::Distill,
            Cmd::Finetune => Command::Finetune,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Theory => Command::Theory,
            Cmd::Report => Command::Report,
        }
    }
}

fn resolve(args: &Args) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &args.config {
        cfg.apply_file(p)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.paths.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(args: Args) -> CliResult<()> {
    let cfg = resolve(&args)?;
    if let Some(n) = args.jobs {
        if n == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up {n} workers: {e}")))?;
    }
    if args.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let written = commands::run(args.command.into(), &cfg)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let body = serde_json::json!({ "error": e.to_string(), "exit_code": code });
            eprintln!("{body}");
            ExitCode::from(code as u8)
        }
    }
}
