use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use guidance_lab_cli::config::check_seeds;
use guidance_lab_cli::{parse_config_with_command, run, run_with_threads, CliError, Command};

/// Time-dependent classifier-free guidance experiments on analytic diffusion models.
#[derive(Debug, Parser)]
#[command(name = "guidance-lab", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output root; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

fn execute(args: &Args) -> Result<i32, CliError> {
    let text = std::fs::read(&args.config).map_err(|e| CliError::io(&args.config, e))?;
    let mut cfg = parse_config_with_command(&text, args.command)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        check_seeds(&[seed])?;
        cfg.seeds = vec![seed];
    }
    let manifest = match args.threads {
        Some(n) => run_with_threads(&cfg, n)?,
        None => run(&cfg)?,
    };
    for v in &manifest.verdicts {
        eprintln!("{} {}", if v.passed { "PASS" } else { "FAIL" }, v.check);
    }
    println!("{}", manifest.run_dir.display());
    Ok(manifest.exit_code())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
