use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use fedtsp_cli::{exit_code, parse_config, run, EXIT_CONFIG};
use fedtsp_core::protocol::Method;

/// Run one federated experiment and write its metrics.
#[derive(Parser, Debug)]
#[command(name = "fedtsp", version)]
struct Args {
    /// JSON experiment config; defaults apply to every omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lambda=1` or `--set synthetic.noise_std=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Shorthand for `--set method=NAME`.
    #[arg(long)]
    method: Option<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for client training; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();

    let mut overrides = args.overrides.clone();
    if let Some(m) = &args.method {
        if let Err(e) = m.parse::<Method>() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
        overrides.push(format!("method={m}"));
    }
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }

    let outcome = parse_config(args.config.as_deref(), &overrides)
        .and_then(|cfg| run(&cfg, args.config.as_deref(), &args.out, args.threads));
    match outcome {
        Ok(out) => {
            let last = out.result.history.last().expect("initial evaluation");
            println!(
                "{}: final mean local top-1 {:.4}, outputs in {}",
                out.result.method,
                last.mean_local_top1,
                args.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
