//! `fastslow`: runs the library pipelines from a TOML experiment config.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 config or manifest problem,
//! 3 numerical failure.

mod commands;
mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use commands::{compare_rows, write_compare, Command, Failure};
use config::ExperimentConfig;
use manifest::{sha256_hex, Manifest, MANIFEST_NAME};

#[derive(Parser)]
#[command(name = "fastslow", version, about = "Moderate deviations for fast/slow diffusions")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    action: Action,
}

#[derive(Subcommand)]
enum Action {
    /// Check the standing assumptions on a sample grid.
    Validate { config: PathBuf },
    /// Simulate one fast/slow path per listed epsilon.
    Simulate { config: PathBuf },
    /// Invariant density of the frozen fast process.
    Density { config: PathBuf },
    /// Centered Poisson corrector at one slow value.
    Poisson { config: PathBuf },
    /// Averaged coefficients and one averaged path.
    Average { config: PathBuf },
    /// Corrector decomposition along a path and its negligibility sweep.
    Delta { config: PathBuf },
    /// Rate-function minimizer for the configured event.
    Rate { config: PathBuf },
    /// Monte Carlo tail estimates against the rate prediction.
    MdpCheck { config: PathBuf },
    /// Exponential martingale inequalities and tail bounds.
    Inequalities { config: PathBuf },
    /// Join a rate.csv with an mc.csv from runs of the same config.
    Compare {
        rate_csv: PathBuf,
        mc_csv: PathBuf,
        /// Output file (default: compare.csv next to the Monte Carlo file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Exit {
    Io(String),
    Config(String),
    Numerical(String),
}

impl Exit {
    fn report(self) -> ExitCode {
        let (code, kind, msg) = match self {
            Exit::Io(m) => (1, "i/o error", m),
            Exit::Config(m) => (2, "config error", m),
            Exit::Numerical(m) => (3, "numerical failure", m),
        };
        eprintln!("fastslow: {kind}: {msg}");
        ExitCode::from(code)
    }
}

impl From<Failure> for Exit {
    fn from(f: Failure) -> Self {
        match f {
            Failure::Config(m) => Exit::Config(m),
            Failure::Numerical(m) => Exit::Numerical(m),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Exit::Config("--workers must be positive".into()).report();
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
        return Exit::Io(format!("thread pool: {e}")).report();
    }
    let result = match cli.action {
        Action::Validate { config } => run_config(Command::Validate, &config, workers),
        Action::Simulate { config } => run_config(Command::Simulate, &config, workers),
        Action::Density { config } => run_config(Command::Density, &config, workers),
        Action::Poisson { config } => run_config(Command::Poisson, &config, workers),
        Action::Average { config } => run_config(Command::Average, &config, workers),
        Action::Delta { config } => run_config(Command::Delta, &config, workers),
        Action::Rate { config } => run_config(Command::Rate, &config, workers),
        Action::MdpCheck { config } => run_config(Command::MdpCheck, &config, workers),
        Action::Inequalities { config } => run_config(Command::Inequalities, &config, workers),
        Action::Compare { rate_csv, mc_csv, out } => compare(&rate_csv, &mc_csv, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}

fn run_config(cmd: Command, path: &Path, workers: usize) -> Result<(), Exit> {
    let start = Instant::now();
    let text = std::fs::read_to_string(path).map_err(|e| Exit::Io(format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::parse(&text).map_err(|e| Exit::Config(format!("{}: {e}", path.display())))?;
    let outputs = commands::run(cmd, &cfg)?;

    // one subdirectory per command so each manifest covers its own files
    let dir = cfg.output_dir(path).join(cmd.name());
    std::fs::create_dir_all(&dir).map_err(|e| Exit::Io(format!("{}: {e}", dir.display())))?;
    let mut hashes = BTreeMap::new();
    for (name, bytes) in &outputs.files {
        let file = dir.join(name);
        std::fs::write(&file, bytes).map_err(|e| Exit::Io(format!("{}: {e}", file.display())))?;
        hashes.insert(name.clone(), sha256_hex(bytes));
    }
    let manifest = Manifest {
        tool: "fastslow".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd.name().into(),
        config_sha256: sha256_hex(text.as_bytes()),
        seed: cfg.run.seed,
        workers,
        wall_time_s: start.elapsed().as_secs_f64(),
        files: hashes,
    };
    write_manifest(&dir, &manifest)?;
    eprintln!("fastslow {}: wrote {} files to {}", cmd.name(), outputs.files.len(), dir.display());
    match outputs.late_failure {
        Some(msg) => Err(Exit::Numerical(msg)),
        None => Ok(()),
    }
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), Exit> {
    let json = serde_json::to_vec_pretty(manifest).map_err(|e| Exit::Io(e.to_string()))?;
    let file = dir.join(MANIFEST_NAME);
    std::fs::write(&file, json).map_err(|e| Exit::Io(format!("{}: {e}", file.display())))
}

/// Reads a verified CSV into header-keyed records.
fn read_records(path: &Path) -> Result<(Manifest, Vec<BTreeMap<String, String>>), Exit> {
    let (manifest, bytes) = Manifest::verified(path).map_err(Exit::Config)?;
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    let headers = rd.headers().map_err(|e| Exit::Io(format!("{}: {e}", path.display())))?.clone();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Exit::Io(format!("{}: {e}", path.display())))?;
        rows.push(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
    }
    Ok((manifest, rows))
}

fn field<'a>(row: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str, Exit> {
    row.get(key).map(String::as_str).ok_or_else(|| Exit::Config(format!("{}: missing column '{key}'", path.display())))
}

fn number(row: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<f64, Exit> {
    let v = field(row, key, path)?;
    v.parse().map_err(|_| Exit::Config(format!("{}: column '{key}' holds '{v}', not a number", path.display())))
}

fn compare(rate_csv: &Path, mc_csv: &Path, out: Option<&Path>) -> Result<(), Exit> {
    let (rate_manifest, rate_rows) = read_records(rate_csv)?;
    let (mc_manifest, mc_rows) = read_records(mc_csv)?;
    if rate_manifest.config_sha256 != mc_manifest.config_sha256 {
        return Err(Exit::Config("manifest mismatch: rate and Monte Carlo files come from different configs".into()));
    }
    if mc_rows.is_empty() {
        return Err(Exit::Numerical(format!("{}: no Monte Carlo rows", mc_csv.display())));
    }
    let mut predictions = BTreeMap::new();
    for row in &rate_rows {
        predictions.insert(field(row, "epsilon", rate_csv)?.to_string(), number(row, "prediction", rate_csv)?);
    }
    let mut mc = Vec::with_capacity(mc_rows.len());
    for row in &mc_rows {
        let censored = field(row, "censored", mc_csv)? == "true";
        mc.push((field(row, "epsilon", mc_csv)?.to_string(), number(row, "scaled_log", mc_csv)?, censored));
    }
    let rows = compare_rows(&mc, &|eps| predictions.get(eps).copied());
    if rows.is_empty() {
        return Err(Exit::Numerical("no epsilon is shared by the rate and Monte Carlo files".into()));
    }
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| mc_csv.with_file_name("compare.csv"));
    let mut buf = Vec::new();
    write_compare(&rows, &mut buf).map_err(|e| Exit::Io(e.to_string()))?;
    std::fs::write(&target, &buf).map_err(|e| Exit::Io(format!("{}: {e}", target.display())))?;
    // keep the manifest in the output directory consistent with the file
    let dir = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = target.file_name().and_then(|n| n.to_str()).unwrap_or("compare.csv").to_string();
    let mut manifest = Manifest::read(dir).unwrap_or_else(|_| Manifest {
        tool: "fastslow".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "compare".into(),
        config_sha256: mc_manifest.config_sha256.clone(),
        seed: mc_manifest.seed,
        workers: mc_manifest.workers,
        wall_time_s: 0.0,
        files: BTreeMap::new(),
    });
    manifest.files.insert(name, sha256_hex(&buf));
    write_manifest(dir, &manifest)
}
