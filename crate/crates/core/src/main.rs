use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use repr::config::Config;
use repr::experiment;
use repr::{Error, Result};

#[derive(Parser)]
#[command(name = "repr", version, about = "Cyclic prune / re-initialize ConvNet training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` pairs, applied after the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model.
    Train(Common),
    /// Train every arm for every seed and summarize.
    Compare(Common),
    /// Score a checkpoint's filters with the greedy oracle.
    Oracle(Common),
    /// Activation correlations and metric agreement for a checkpoint.
    Analyze(Common),
}

fn pairs(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, got '{a}'")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn load(c: &Common) -> Result<Config> {
    let mut overrides = pairs(&c.overrides)?;
    if let Ok(dir) = std::env::var("REPR_OUTPUT_DIR") {
        overrides.push(("output_dir".into(), dir));
    }
    Config::load(c.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c)?;
            let s = experiment::cmd_train(&cfg)?;
            println!(
                "final test acc {:.4}, best {:.4}, gap {:.4}, ortho sum {:.4}",
                s.final_test_acc, s.best_test_acc, s.gap, s.ortho_sum
            );
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Compare(c) => {
            let cfg = load(&c)?;
            let data = experiment::prepare_data(&cfg)?;
            let cmp = experiment::run_comparison(&cfg, &data, |r| {
                eprintln!(
                    "{} seed {}: final test acc {:.4}, gap {:.4}, ortho sum {:.4}",
                    r.arm, r.seed, r.summary.final_test_acc, r.summary.gap, r.summary.ortho_sum
                );
            })?;
            print!("{}", cmp.summary_csv());
        }
        Command::Oracle(c) => {
            let cfg = load(&c)?;
            let scores = experiment::cmd_oracle(&cfg)?;
            println!(
                "scored {} filters, wrote {}",
                scores.len(),
                cfg.output_dir.join("oracle_scores.csv").display()
            );
        }
        Command::Analyze(c) => {
            let cfg = load(&c)?;
            let a = experiment::cmd_analyze(&cfg)?;
            println!("metric agreement with oracle (pearson, spearman):");
            for (m, ag) in &a.agreement {
                println!("  {:12} {:+.3} {:+.3}", m.name(), ag.pearson, ag.spearman);
            }
            println!("wrote {}", cfg.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
