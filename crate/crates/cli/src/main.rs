//! `stochrep --config run.toml [overrides]`: runs one task and writes its
//! artifacts plus `manifest.json` into the output directory.
//!
//! Exit status 0 on success, 2 when the config or the problem assumptions
//! fail validation (nothing is written), 1 on a runtime error (the manifest
//! is still written). Errors are reported as one JSON object on stderr.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde_json::json;
use stochrep::config::RunConfig;
use stochrep::run::{config_hash, execute, prepare, write_artifacts, Manifest, VERSION};
use stochrep::Error;

#[derive(Debug, Parser)]
#[command(name = "stochrep", version, about = "Monte Carlo and finite-difference solvers for mixed Robin/Dirichlet parabolic problems")]
struct Args {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding solver.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Paths per point, overriding solver.n_paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Time step, overriding solver.dt.
    #[arg(long)]
    dt: Option<f64>,
    /// Output directory, overriding output.dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Task name; must match the kind of the configured task.
    #[arg(long, value_parser = RunConfig::TASKS)]
    task: Option<String>,
    /// Worker threads (0 uses every core). Never changes the numbers.
    #[arg(long, env = "STOCHREP_WORKERS", default_value_t = 0)]
    workers: usize,
}

fn fail(code: u8, kind: &str, err: &dyn std::fmt::Display) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": err.to_string(), "exit_code": code }));
    ExitCode::from(code)
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Validation(_) | Error::NotPositiveDefinite | Error::NonInwardReflection(_) => "validation",
        Error::Domain(_) | Error::Collar { .. } => "domain",
        Error::Expr(_) => "expression",
        Error::Shape(_) => "shape",
        Error::Unsupported(_) => "unsupported",
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => "io",
        Error::Solver(_) | Error::CollarEscape { .. } => "runtime",
    }
}

fn load(args: &Args) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.solver.seed = seed;
    }
    if let Some(paths) = args.paths {
        cfg.solver.n_paths = paths;
    }
    if let Some(dt) = args.dt {
        cfg.solver.dt = dt;
    }
    if let Some(dir) = &args.out_dir {
        cfg.output.dir = dir.clone();
    }
    if let Some(task) = &args.task {
        if task != cfg.task.name() {
            return Err(Error::Config(format!("--task {task} does not match the configured task {}", cfg.task.name())));
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let start = Instant::now();
    let cfg = match load(&args) {
        Ok(cfg) => cfg,
        Err(e) => return fail(2, error_kind(&e), &e),
    };
    let prep = match prepare(&cfg) {
        Ok(p) => p,
        Err(e) => return fail(2, error_kind(&e), &e),
    };
    let hash = match config_hash(&cfg) {
        Ok(h) => h,
        Err(e) => return fail(1, error_kind(&e), &e),
    };
    let result = execute(&cfg, &prep, args.workers);
    let (artifacts, status, error) = match &result {
        Ok(a) => (a.as_slice(), "ok", None),
        Err(e) => (&[][..], "error", Some(e.to_string())),
    };
    let manifest = Manifest {
        task: cfg.task.name().into(),
        status: status.into(),
        error,
        config_hash: hash,
        seed: cfg.solver.seed,
        workers: args.workers,
        versions: vec![("stochrep".into(), VERSION.into()), ("stochrep-cli".into(), env!("CARGO_PKG_VERSION").into())],
        wall_time_s: start.elapsed().as_secs_f64(),
        artifacts: artifacts.iter().map(|a| a.name.clone()).collect(),
    };
    if let Err(e) = write_artifacts(&cfg.output.dir, artifacts, &manifest) {
        return fail(1, error_kind(&e), &e);
    }
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => fail(1, error_kind(&e), &e),
    }
}
