mod commands;
mod config;
mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use selfcon::Error;

use crate::commands::{execute, Context, Report};
use crate::config::{ExperimentConfig, SCHEMA};

#[derive(Debug, Parser)]
#[command(name = "selfcon", version, about = "Run self-consistent transfer operator experiments from a JSON config")]
struct Args {
    /// Experiment configuration (JSON).
    #[arg(long, required_unless_present = "print_schema")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.directory` (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed; overrides `output.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(long, short)]
    verbose: bool,
    /// Print the configuration JSON schema and exit.
    #[arg(long)]
    print_schema: bool,
}

#[derive(Serialize)]
struct Manifest {
    tool: String,
    tool_version: &'static str,
    library_version: &'static str,
    command: Option<String>,
    config_path: Option<String>,
    config_sha256: Option<String>,
    effective_config: Option<Value>,
    seed: u64,
    threads: usize,
    wall_seconds: f64,
    status: &'static str,
    exit_code: u8,
    error: Option<String>,
    constants: BTreeMap<String, Value>,
    flags: BTreeMap<String, bool>,
    files: Vec<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::Domain(_) => 2,
        Error::Regime { .. } | Error::SpectralGap(_) => 3,
        Error::Numerical { .. } | Error::NonContraction { .. } => 4,
        Error::Io(_) | Error::Csv(_) => 1,
    }
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

struct Loaded {
    text: String,
    config: Option<ExperimentConfig>,
}

fn load(path: &Path) -> (Loaded, Option<Error>) {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            let e = Error::Config(format!("cannot read {}: {e}", path.display()));
            return (Loaded { text: String::new(), config: None }, Some(e));
        }
    };
    match ExperimentConfig::parse(&text) {
        Ok(c) => (Loaded { text, config: Some(c) }, None),
        Err(e) => (Loaded { text, config: None }, Some(e)),
    }
}

fn run(args: &Args, config: &ExperimentConfig, out: &Path, seed: u64) -> selfcon::Result<Report> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), config.to_json() + "\n")?;
    let mut ctx = Context::new(config, out, seed);
    match args.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| execute(&mut ctx)),
        None => execute(&mut ctx),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    env_logger::Builder::from_default_env()
        .filter_level(if args.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .init();
    if args.print_schema {
        print!("{SCHEMA}");
        return ExitCode::SUCCESS;
    }
    let config_path = args.config.clone().expect("required by clap");
    let started = Instant::now();
    let (mut loaded, load_error) = load(&config_path);
    let out = args
        .out
        .clone()
        .or_else(|| loaded.config.as_ref().and_then(|c| c.output.directory.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let seed = args.seed.or(loaded.config.as_ref().map(|c| c.output.seed)).unwrap_or(0);
    // fold the overrides back in so the recorded config reproduces the run
    if let Some(c) = loaded.config.as_mut() {
        c.output.seed = seed;
        c.output.directory = Some(out.display().to_string());
    }
    let cfg = loaded.config.as_ref();
    let threads = args.threads.unwrap_or_else(rayon::current_num_threads);

    let result = match (load_error, cfg) {
        (Some(e), _) => Err(e),
        (None, Some(c)) => run(&args, c, &out, seed),
        (None, None) => unreachable!("a config without an error"),
    };
    let (report, error) = match result {
        Ok(r) => (r, None),
        Err(e) => (Report::default(), Some(e)),
    };
    let code = error.as_ref().map(exit_code).unwrap_or(0);
    if let Some(e) = &error {
        eprintln!("selfcon: {e}");
    }

    let manifest = Manifest {
        tool: "selfcon".into(),
        tool_version: env!("CARGO_PKG_VERSION"),
        library_version: selfcon::VERSION,
        command: cfg.map(|c| c.command.name().to_string()),
        config_path: Some(config_path.display().to_string()),
        config_sha256: (!loaded.text.is_empty()).then(|| sha256_hex(&loaded.text)),
        effective_config: cfg.map(|c| serde_json::to_value(c).expect("config serializes")),
        seed,
        threads,
        wall_seconds: started.elapsed().as_secs_f64(),
        status: if error.is_none() { "ok" } else { "error" },
        exit_code: code,
        error: error.as_ref().map(|e| e.to_string()),
        constants: report.constants,
        flags: report.flags,
        files: report.files,
    };
    let written = std::fs::create_dir_all(&out).and_then(|_| {
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(out.join("manifest.json"), text + "\n")
    });
    if let Err(e) = written {
        eprintln!("selfcon: could not write manifest: {e}");
        return ExitCode::from(if code == 0 { 1 } else { code });
    }
    ExitCode::from(code)
}
