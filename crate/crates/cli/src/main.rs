//! Batch front end: `stochvar run <scenario>…`, `stochvar list`,
//! `stochvar export <ensemble> --format csv|binary`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use stochvar::diffusion::PathEnsemble;
use stochvar::pipeline::{run_file, RunOptions};
use stochvar::scenario::Registries;

#[derive(Parser)]
#[command(name = "stochvar", version, about = "Stochastic calculus of variations on simulated diffusions")]
struct Cli {
    /// Replace the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "STOCHVAR_OUT_DIR", default_value = "stochvar-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenario files (or bundled scenario names) one after another.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Print the JSON report instead of the text summary.
        #[arg(long)]
        json: bool,
    },
    /// List potentials, density families, groups and bundled scenarios.
    List,
    /// Convert an ensemble dump between CSV and the binary format.
    Export {
        ensemble: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Binary,
}

fn read_ensemble(path: &Path) -> Result<PathEnsemble> {
    let mut bytes = Vec::new();
    File::open(path)
        .with_context(|| format!("cannot open {}", path.display()))?
        .read_to_end(&mut bytes)?;
    let ens = if bytes.starts_with(stochvar::diffusion::ENSEMBLE_MAGIC) {
        PathEnsemble::read_binary(bytes.as_slice())
    } else {
        PathEnsemble::read_csv(BufReader::new(bytes.as_slice()))
    };
    ens.with_context(|| format!("cannot read ensemble {}", path.display()))
}

fn export(path: &Path, format: Format, out_dir: &Path) -> Result<PathBuf> {
    let ens = read_ensemble(path)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ensemble".into());
    let target = out_dir.join(match format {
        Format::Csv => format!("{stem}.csv"),
        Format::Binary => format!("{stem}.bin"),
    });
    if target == path {
        bail!("export would overwrite its input {}", path.display());
    }
    let mut w = BufWriter::new(File::create(&target).with_context(|| format!("cannot create {}", target.display()))?);
    match format {
        Format::Csv => ens.write_csv(&mut w)?,
        Format::Binary => ens.write_binary(&mut w)?,
    }
    w.flush()?;
    Ok(target)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `Ok(false)` when some task errored.
fn real_main() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            print!("{}", Registries::default().list());
            Ok(true)
        }
        Command::Export { ensemble, format } => {
            let target = export(&ensemble, format, &cli.out_dir)?;
            println!("{}", target.display());
            Ok(true)
        }
        Command::Run { scenarios, json } => {
            let registries = Registries::default();
            let opts = RunOptions {
                seed: cli.seed,
                threads: cli.threads,
                out_dir: cli.out_dir,
            };
            let mut clean = true;
            for path in &scenarios {
                let report = run_file(path, &registries, &opts).with_context(|| format!("scenario {}", path.display()))?;
                if json {
                    println!("{}", serde_json::to_string_pretty(&report)?);
                } else {
                    print!("{}", report.to_text());
                }
                clean &= !report.errored();
            }
            Ok(clean)
        }
    }
}
