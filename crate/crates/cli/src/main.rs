use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedfusion_cli::{ablate, evaluate, sweep_k, synth, train, CliError, ExperimentConfig};
use fedfusion_core::federation::Keep;

#[derive(Parser)]
#[command(name = "fedfusion", version, about = "Deterministic federated cross-modal fusion simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write model.mmrs, rounds.jsonl, comm.jsonl, metrics.json, map.ppm.
    Train(Common),
    /// Score a saved checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train once per k in k_list plus an uncompressed baseline.
    SweepK(Common),
    /// Train with one modality removed (or none).
    Ablate(Common),
    /// Generate a synthetic scene as dataset.mmrs.
    Synth(Common),
    /// Print the effective configuration.
    DumpConfig(Common),
}

#[derive(Args)]
struct Common {
    /// Line-oriented `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Force the canonical single-threaded schedule.
    #[arg(long)]
    single_thread: bool,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn pairs(raw: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| CliError::Config(format!("expected --key, got {flag:?}")))?;
        if key == "single-thread" || key == "single_thread" {
            out.push(("single_thread".into(), "true".into()));
            continue;
        }
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.replace('-', "_"), v.to_string()));
            continue;
        }
        let v = it
            .next()
            .ok_or_else(|| CliError::Config(format!("{key}: missing value")))?;
        out.push((key.replace('-', "_"), v.clone()));
    }
    Ok(out)
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let (files, mut ov): (Vec<_>, Vec<_>) = pairs(&c.overrides)?.into_iter().partition(|(k, _)| k == "config");
    if c.single_thread {
        ov.push(("single_thread".into(), "true".into()));
    }
    let path = files.last().map(|(_, v)| PathBuf::from(v)).or_else(|| c.config.clone());
    ExperimentConfig::load(path.as_deref(), &ov)
}

fn print_json<T: serde::Serialize>(v: &T) {
    if let Ok(s) = serde_json::to_string(v) {
        println!("{s}");
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => print_json(&train(&load(&c)?)?.metrics),
        Command::Evaluate { model, common } => print_json(&evaluate(&load(&common)?, &model)?),
        Command::SweepK(c) => {
            for r in sweep_k(&load(&c)?)? {
                println!(
                    "k={} oa={:.4} bytes={} ratio={:.4}",
                    r.k.map_or("raw".into(), |k| k.to_string()),
                    r.metrics.oa,
                    r.bytes_total,
                    r.ratio
                );
            }
        }
        Command::Ablate(c) => {
            let cfg = load(&c)?;
            let keep: Keep = cfg.keep;
            print_json(&ablate(&cfg, keep)?);
        }
        Command::Synth(c) => {
            let cfg = load(&c)?;
            let d = synth(&cfg)?;
            println!(
                "{} {}x{} classes={} train={} test={}",
                cfg.output_dir.join("dataset.mmrs").display(),
                d.height,
                d.width,
                d.class_count,
                d.train_idx.len(),
                d.test_idx.len()
            );
        }
        Command::DumpConfig(c) => print!("{}", load(&c)?.dump()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
