use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use afan::harness::{cmd_ablate, cmd_eval, cmd_landscape, cmd_train, ExperimentConfig, KvConfig};
use afan::{Error, Result};

/// Train and evaluate split networks with adversarial feature perturbations.
///
/// Relative output paths are resolved against $AFAN_OUTPUT_ROOT when set.
#[derive(Debug, Parser)]
#[command(name = "afan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.afan and metrics.jsonl.
    Train,
    /// Standard and robust accuracy of a checkpoint; writes eval.json.
    Eval,
    /// Train every ablation cell over several seeds; writes ablation.txt.
    Ablate,
    /// Loss-surface slices around checkpoints.
    Landscape,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut kv = match &cli.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    for o in &cli.overrides {
        kv.apply_override(o)?;
    }
    ExperimentConfig::from_kv(&kv)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if cli.dry_run {
        print!("{}", cfg.resolved_text());
        return Ok(());
    }
    match cli.command {
        Command::Train => {
            let r = cmd_train(&cfg)?;
            println!("best epoch {}", r.best_epoch);
            if let Some(v) = r.val_acc {
                println!("val accuracy {v:.4}");
            }
            if let Some(t) = r.test_acc {
                println!("test accuracy {t:.4}");
            }
        }
        Command::Eval => {
            let r = cmd_eval(&cfg)?;
            println!("standard accuracy {:.4} ({} samples)", r.standard_accuracy, r.samples);
            for p in &r.robust {
                println!("robust accuracy eps={:.5} {:.4}", p.epsilon, p.accuracy);
            }
            if let Some(f) = &r.flatness {
                println!("hessian spectral norm {:.6} trace {:.6}", f.spectral.value, f.trace.mean);
            }
        }
        Command::Ablate => print!("{}", cmd_ablate(&cfg)?.to_text()),
        Command::Landscape => {
            for e in cmd_landscape(&cfg)? {
                println!("{} curvature {:.6} -> {}", e.checkpoint, e.curvature_proxy, e.matrix_path);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
            if let Error::Usage(_) = e {
                eprintln!("run `afan --help` for usage");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
