//! Command-line runner: `subgeo run`, `subgeo zoo`, `subgeo validate`.

pub mod config;
pub mod studies;
pub mod svg;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

pub use config::{ExperimentConfig, SpeedConfig, Study, TestHook};
pub use studies::{Row, StudyOutput};

use crate::bound_engine::{verify_drift, BoundCertificate};
use crate::chain_model::{ChainFile, FiniteChain};
use crate::model_zoo::{self, ZooEntry};
use crate::rng::{with_workers, worker_count};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

#[derive(Parser)]
#[command(name = "subgeo", version, about = "Regeneration bounds and limit theorems for subgeometric Markov chains")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one study and write results.csv, certificate.json and plot.svg.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect the model zoo.
    Zoo {
        #[command(subcommand)]
        cmd: ZooCmd,
    },
    /// Check a JSON chain file.
    Validate { chain: PathBuf },
}

#[derive(Subcommand)]
enum ZooCmd {
    List {
        #[arg(long)]
        json: bool,
    },
    /// Print a finite zoo entry in the JSON chain format.
    Export { name: String },
}

/// A run's files and exit status.
pub struct RunOutcome {
    pub exit_code: i32,
    pub output: StudyOutput,
    pub out_dir: PathBuf,
}

fn json_diag(path: &Path, e: &serde_json::Error) -> String {
    format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column())
}

fn diag(path: &Path, e: &Error) -> String {
    match e {
        Error::Json(j) => json_diag(path, j),
        other => format!("{}: {other}", path.display()),
    }
}

/// Parses a chain file, keeping line and column on syntax errors.
pub fn load_chain(path: &Path) -> std::result::Result<FiniteChain, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let file: ChainFile = serde_json::from_str(&text).map_err(|e| json_diag(path, &e))?;
    FiniteChain::from_file(&file).map_err(|e| diag(path, &e))
}

/// Zoo name, or a JSON file path (absolute, or relative to `base`).
pub fn resolve_chain(spec: &str, base: Option<&Path>) -> std::result::Result<ZooEntry, String> {
    let direct = PathBuf::from(spec);
    let candidates = [Some(direct.clone()), base.map(|b| b.join(spec))];
    if let Some(p) = candidates.iter().flatten().find(|p| p.is_file()) {
        let chain = load_chain(p)?;
        return ZooEntry::from_chain(spec, chain).map_err(|e| diag(p, &e));
    }
    if spec.ends_with(".json") {
        return Err(format!("{spec}: no such chain file"));
    }
    model_zoo::build(spec).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct CertificateDoc<'a> {
    chain: &'a str,
    study: &'static str,
    seed: u64,
    drift: &'a BoundCertificate,
    certificates: Vec<LabelledCert<'a>>,
    violations: &'a [String],
    failures: &'a [String],
}

#[derive(Serialize)]
struct LabelledCert<'a> {
    label: &'a str,
    certificate: &'a BoundCertificate,
}

fn write_outputs(out_dir: &Path, cfg: &ExperimentConfig, seed: u64, entry: &ZooEntry, out: &StudyOutput) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("results.csv")).map_err(|e| Error::Io(e.into()))?;
    for r in &out.rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    let doc = CertificateDoc {
        chain: &cfg.chain,
        study: cfg.study.name(),
        seed,
        drift: &entry.certificate,
        certificates: out.certificates.iter().map(|(l, c)| LabelledCert { label: l, certificate: c }).collect(),
        violations: &out.violations,
        failures: &out.failures,
    };
    fs::write(out_dir.join("certificate.json"), serde_json::to_string_pretty(&doc)?)?;
    fs::write(out_dir.join("plot.svg"), out.plot.render())?;
    Ok(())
}

/// Runs a validated config. `base` resolves relative chain paths.
pub fn run_config(cfg: &ExperimentConfig, base: Option<&Path>) -> std::result::Result<RunOutcome, (i32, String)> {
    cfg.validate().map_err(|e| (EXIT_INVALID, e.to_string()))?;
    let seed = cfg.seed.expect("validated");
    let entry = resolve_chain(&cfg.chain, base).map_err(|e| (EXIT_INVALID, e))?;
    let ctx = studies::Ctx { cfg, entry: &entry, seed };
    let output = with_workers(worker_count(), || studies::run_study(&ctx)).map_err(|e| (EXIT_INVALID, e.to_string()))?;
    let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("subgeo-out"));
    write_outputs(&out_dir, cfg, seed, &entry, &output).map_err(|e| (EXIT_IO, e.to_string()))?;
    let exit_code = if output.violations.is_empty() && output.failures.is_empty() { EXIT_OK } else { EXIT_VIOLATION };
    Ok(RunOutcome { exit_code, output, out_dir })
}

fn cmd_run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> i32 {
    let text = match fs::read_to_string(config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", config.display());
            return EXIT_INVALID;
        }
    };
    let mut cfg: ExperimentConfig = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}", json_diag(config, &e));
            return EXIT_INVALID;
        }
    };
    if seed.is_some() {
        cfg.seed = seed;
    }
    if out.is_some() {
        cfg.out = out;
    }
    match run_config(&cfg, config.parent()) {
        Ok(o) => {
            for v in &o.output.violations {
                eprintln!("dominance violation: {v}");
            }
            for f in &o.output.failures {
                eprintln!("check failed: {f}");
            }
            println!(
                "{}: {} rows written to {} (exit {})",
                cfg.study.name(),
                o.output.rows.len(),
                o.out_dir.display(),
                o.exit_code
            );
            o.exit_code
        }
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}

fn cmd_validate(path: &Path) -> i32 {
    match load_chain(path) {
        Ok(chain) => {
            let rep = verify_drift(&chain);
            if rep.holds {
                println!("{}: {} states, |C| = {}, eps = {}, drift margin {:e}", path.display(), chain.n(), chain.c().len(), chain.epsilon(), rep.margin);
                EXIT_OK
            } else {
                eprintln!("error: {}: drift condition fails, margin {:e}", path.display(), rep.margin);
                EXIT_INVALID
            }
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_INVALID
        }
    }
}

fn cmd_zoo(cmd: ZooCmd) -> i32 {
    match cmd {
        ZooCmd::List { json } => {
            let list = model_zoo::list();
            let stdout = std::io::stdout();
            let mut h = stdout.lock();
            if json {
                let _ = writeln!(h, "{}", serde_json::to_string_pretty(&list).expect("serializable"));
            } else {
                for e in list {
                    let regime = match e.regime {
                        model_zoo::Regime::Polynomial { alpha } => format!("polynomial alpha={alpha}"),
                        model_zoo::Regime::Subexponential { alpha } => format!("subexponential alpha={alpha}"),
                        model_zoo::Regime::GeometricTestOnly => "geometric (test only)".into(),
                    };
                    let _ = writeln!(h, "{:<34} {:<28} {:?}  {}", e.name, regime, e.grade, e.description);
                }
            }
            EXIT_OK
        }
        ZooCmd::Export { name } => match model_zoo::build(&name).and_then(|e| {
            e.finite().ok_or_else(|| Error::Validation(format!("`{name}` is not a finite chain")))?.to_file()
        }) {
            Ok(f) => {
                println!("{}", serde_json::to_string_pretty(&f).expect("serializable"));
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_INVALID
            }
        },
    }
}

/// Entry point shared by the binary and the tests.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.cmd {
        Cmd::Run { config, seed, out } => cmd_run(&config, seed, out),
        Cmd::Zoo { cmd } => cmd_zoo(cmd),
        Cmd::Validate { chain } => cmd_validate(&chain),
    }
}
