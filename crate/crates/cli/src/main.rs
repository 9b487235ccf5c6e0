mod cli;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bksieve::{Error, Result};
use clap::Parser;
use serde::{Deserialize, Serialize};

use cli::Cli;
use run::RunConfig;

const WORKERS_ENV: &str = "BKSIEVE_WORKERS";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tool: String,
    version: String,
    command: String,
    config: RunConfig,
    seed: Option<u64>,
    workers: usize,
    started_at: String,
    elapsed_seconds: f64,
    status: String,
    outputs: Vec<OutputRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OutputRecord {
    file: String,
    bytes: usize,
    reproducible: bool,
}

#[derive(Debug, Serialize)]
struct ErrorRecord {
    kind: &'static str,
    message: String,
    exit_code: u8,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = error_record(&e);
            let line = serde_json::to_string(&serde_json::json!({ "error": &record })).unwrap_or_default();
            eprintln!("{line}");
            if std::fs::create_dir_all(&cli.out).is_ok() {
                let _ = std::fs::write(cli.out.join("error.json"), format!("{line}\n"));
            }
            ExitCode::from(record.exit_code)
        }
    }
}

fn error_record(e: &Error) -> ErrorRecord {
    let (kind, exit_code) = match e {
        Error::InvalidParameter(_) => ("invalid_parameter", 2),
        Error::Unsupported(_) => ("unsupported", 2),
        Error::Range(_) => ("range", 2),
        Error::DimensionMismatch { .. } | Error::Domain(_) => ("data", 3),
        e if e.is_data_error() => ("data", 3),
        _ => ("numerical", 4),
    };
    ErrorRecord {
        kind,
        message: e.to_string(),
        exit_code,
    }
}

fn resolve_workers(flag: Option<usize>) -> Result<usize> {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let env = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidParameter(format!("{WORKERS_ENV}={v} is not a count")))?,
        ),
        Err(_) => None,
    };
    let n = flag.or(env).unwrap_or(available);
    if n == 0 {
        return Err(Error::InvalidParameter("worker count must be positive".into()));
    }
    Ok(n)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let workers = resolve_workers(cli.workers)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Error::Unsupported(format!("thread pool: {e}")))?;
    let config = match cli.command.resolve()? {
        Some(c) => c,
        None => {
            let cli::Command::Rerun { manifest } = &cli.command else {
                unreachable!("only rerun resolves to no config")
            };
            load_manifest(manifest)?.config
        }
    };
    execute(&config, &cli.out, workers)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn execute(config: &RunConfig, out: &PathBuf, workers: usize) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let clock = Instant::now();
    let result = config.execute();
    let mut manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: config.name().into(),
        config: config.clone(),
        seed: config.seed(),
        workers,
        started_at,
        elapsed_seconds: 0.0,
        status: "ok".into(),
        outputs: Vec::new(),
    };
    let outcome = result.and_then(|outputs| {
        for o in &outputs {
            std::fs::write(out.join(o.name), &o.bytes)?;
            manifest.outputs.push(OutputRecord {
                file: o.name.into(),
                bytes: o.bytes.len(),
                reproducible: o.reproducible,
            });
        }
        Ok(())
    });
    if let Err(e) = &outcome {
        manifest.status = format!("failed: {e}");
    }
    manifest.elapsed_seconds = clock.elapsed().as_secs_f64();
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(out.join(MANIFEST), text)?;
    outcome
}
