//! Command-line surface: `trajectory`, `ensemble`, `crescent`, `fidelity`
//! and `husimi`.
//!
//! Exit status is 0 on success, 2 for usage or configuration errors and 3
//! for runtime failures (I/O, or a numerical failure of a single run).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;

use crate::config::{ConfigFile, EnsembleOverrides, ProtocolOverrides};
use crate::crescent::{
    calibrate_xi_from_protocol, classify_regions, default_grid, default_target, displaced_crescent, CrescentSpec,
    ProbeInteraction, DEFAULT_DELTA_PRIME, DEFAULT_GRID_POINTS,
};
use crate::ensemble::{emit_histogram, run_ensemble, EnsembleConfig};
use crate::error::{Error, Result};
use crate::fidelity::{optimize_fidelity_with, OptimizeOptions};
use crate::fock::{
    coherent_amplitudes, fock_state, husimi_grid, write_husimi_csv, DensityMatrix, FockSpace, PureState,
};
use crate::io::{load_density_matrix, save_density_matrix, save_step_log, LogFormat};
use crate::protocol::{default_dim, run_protocol, Outcome, ProtocolConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "qnd-cat",
    version,
    about = "Cat-state preparation by QND measurement and feedback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one trajectory and write its full record.
    Trajectory(TrajectoryArgs),
    /// Run K trajectories and print statistics as JSON.
    Ensemble(EnsembleArgs),
    /// Outcome distribution and region analysis of the displaced crescent (CSV).
    Crescent(CrescentArgs),
    /// Optimal two-component fidelity of a stored density matrix (JSON).
    Fidelity(FidelityArgs),
    /// Husimi Q on a square grid (CSV x,p,Q).
    Husimi(HusimiArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Flat key-value config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ConfigFile> {
        self.config
            .as_deref()
            .map_or(Ok(ConfigFile::default()), ConfigFile::load)
    }
}

#[derive(Debug, Args)]
struct TrajectoryArgs {
    #[command(flatten)]
    file: ConfigArg,
    #[command(flatten)]
    protocol: ProtocolOverrides,
    /// Step log destination.
    #[arg(long)]
    log: Option<PathBuf>,
    /// csv | binary, for the step log and the final state.
    #[arg(long, default_value = "csv")]
    log_format: LogFormat,
    /// Record JSON destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Final density matrix destination.
    #[arg(long)]
    state_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    #[command(flatten)]
    file: ConfigArg,
    #[command(flatten)]
    protocol: ProtocolOverrides,
    #[command(flatten)]
    ensemble: EnsembleOverrides,
    /// Fidelity histogram CSV destination.
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CrescentArgs {
    #[arg(long)]
    n_star: usize,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    /// Crescent parameter |ξ|; calibrated from feedback runs when omitted.
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    /// Probe position ⟨p⟩ (default 0.9 √n★).
    #[arg(long)]
    target: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_DELTA_PRIME)]
    delta_prime: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    points: usize,
    /// Feedback runs used to calibrate |ξ|.
    #[arg(long, default_value_t = 16)]
    calibration_runs: usize,
    /// Seed of the calibration runs (required without --xi).
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FidelityArgs {
    /// Density matrix, CSV or binary.
    #[arg(long)]
    rho: PathBuf,
    #[arg(long, default_value_t = 8)]
    starts: usize,
    /// Seed of the perturbed restarts.
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
}

#[derive(Debug, Args)]
struct HusimiArgs {
    /// Density matrix, CSV or binary.
    #[arg(long, conflicts_with_all = ["fock", "coherent", "cat"])]
    rho: Option<PathBuf>,
    /// Number state |n⟩.
    #[arg(long)]
    fock: Option<usize>,
    /// Coherent state, as `re,im`.
    #[arg(long, allow_hyphen_values = true)]
    coherent: Option<String>,
    /// Even cat |α⟩ + |−α⟩, as `re,im`.
    #[arg(long, allow_hyphen_values = true)]
    cat: Option<String>,
    #[arg(long, default_value_t = 40)]
    dim: usize,
    #[arg(long, default_value_t = 5.0)]
    half_width: f64,
    #[arg(long, default_value_t = 101)]
    points: usize,
    /// CSV destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

/// [`run`] with explicit output streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Trajectory(a) => trajectory(a, out, err),
        Command::Ensemble(a) => ensemble(a, out, err),
        Command::Crescent(a) => crescent(a, out, err),
        Command::Fidelity(a) => fidelity(a, out),
        Command::Husimi(a) => husimi(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) | Error::Parse(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn protocol_config(file: &ConfigFile, flags: &ProtocolOverrides) -> Result<ProtocolConfig> {
    let merged = file.protocol.clone().merged(flags);
    if merged.seed.is_none() {
        return Err(Error::Config(
            "--seed (or `seed` in the config file) is required".into(),
        ));
    }
    merged.build()
}

fn sink<'a>(path: &Option<PathBuf>, out: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(out),
    })
}

fn trajectory(a: TrajectoryArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let config = protocol_config(&a.file.load()?, &a.protocol)?;
    let record = run_protocol(&config)?;
    if let Some(path) = &a.log {
        save_step_log(&record.steps, a.log_format, path)?;
    }
    if let (Some(path), Some(rho)) = (&a.state_out, &record.final_state) {
        save_density_matrix(rho, a.log_format, path)?;
    }
    let mut w = sink(&a.out, out)?;
    writeln!(w, "{}", record.to_json()?)?;
    w.flush()?;
    if record.outcome == Outcome::NumericalFailure {
        writeln!(
            err,
            "numerical failure: {}",
            record.failure.as_deref().unwrap_or("unknown")
        )?;
        return Ok(EXIT_RUNTIME);
    }
    Ok(0)
}

fn ensemble(a: EnsembleArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let file = a.file.load()?;
    let base = protocol_config(&file, &a.protocol)?;
    let ens = file.ensemble.merged(&a.ensemble);
    let k = ens
        .k
        .ok_or_else(|| Error::Config("--k (or `k` in the config file) is required".into()))?;
    let mut config = EnsembleConfig::new(base, k);
    config.parallelism = ens.parallelism.unwrap_or(0);
    config.output_dir = ens.output_dir;
    if let Some(bins) = ens.histogram_bins {
        config.histogram_bins = bins;
    }
    let run = run_ensemble(&config)?;
    if let Some(path) = &a.histogram {
        emit_histogram(&run.stats, path)?;
    }
    writeln!(out, "{}", run.stats.to_json()?)?;
    for e in &run.write_errors {
        writeln!(err, "write failed: {e}")?;
    }
    Ok(if run.write_errors.is_empty() { 0 } else { EXIT_RUNTIME })
}

fn crescent(a: CrescentArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let beta = ProbeInteraction::new(a.beta)?.beta;
    let dim = a.dim.unwrap_or_else(|| default_dim(a.n_star));
    let xi = match a.xi {
        Some(xi) => xi,
        None => {
            let seed = a
                .seed
                .ok_or_else(|| Error::Config("--seed is required to calibrate |xi| (or pass --xi)".into()))?;
            let mut cfg = ProtocolConfig::with_rate(a.n_star, 1.0);
            cfg.dim = dim;
            cfg.seed = seed;
            let cal = calibrate_xi_from_protocol(&cfg, a.calibration_runs)?;
            writeln!(
                err,
                "calibrated |xi| = {:.4} (median overlap {:.4})",
                cal.xi_abs, cal.overlap
            )?;
            cal.xi_abs
        }
    };
    let spec = CrescentSpec::new(xi, a.n_star, dim)?;
    let state = displaced_crescent(&spec, a.target.unwrap_or_else(|| default_target(a.n_star)))?;
    let grid = default_grid(beta, dim, a.points);
    let analysis = classify_regions(&state, beta, a.delta_prime, &grid);
    match analysis.region_ii {
        Some(r) => writeln!(
            err,
            "region II: [{:.4}, {:.4}], width {:.4}",
            r.lower,
            r.upper,
            r.width()
        )?,
        None => writeln!(err, "region II: empty")?,
    }
    let mut w = sink(&a.out, out)?;
    analysis.write_csv(&mut w)?;
    w.flush()?;
    Ok(0)
}

fn fidelity(a: FidelityArgs, out: &mut dyn Write) -> Result<i32> {
    let rho = load_density_matrix(&a.rho)?;
    let opts = OptimizeOptions {
        starts: a.starts.max(1),
        seed: a.seed,
        ..Default::default()
    };
    let result = optimize_fidelity_with(&rho, &opts);
    writeln!(out, "{}", serde_json::to_string_pretty(&result)?)?;
    Ok(0)
}

fn parse_complex(s: &str) -> Result<Complex64> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("invalid complex number {s:?}")))
    };
    match parts.as_slice() {
        [re] => Ok(Complex64::new(parse(re)?, 0.0)),
        [re, im] => Ok(Complex64::new(parse(re)?, parse(im)?)),
        _ => Err(Error::Config(format!("invalid complex number {s:?} (expected re,im)"))),
    }
}

fn husimi_state(a: &HusimiArgs) -> Result<DensityMatrix> {
    if let Some(path) = &a.rho {
        return load_density_matrix(Path::new(path));
    }
    let space = FockSpace::new(a.dim)?;
    let psi = match (a.fock, &a.coherent, &a.cat) {
        (Some(n), None, None) => fock_state(n, space)?,
        (None, Some(c), None) => PureState::new(coherent_amplitudes(parse_complex(c)?, a.dim))?,
        (None, None, Some(c)) => {
            let alpha = parse_complex(c)?;
            PureState::new(coherent_amplitudes(alpha, a.dim) + coherent_amplitudes(-alpha, a.dim))?
        }
        _ => {
            return Err(Error::Config(
                "give exactly one of --rho, --fock, --coherent, --cat".into(),
            ))
        }
    };
    Ok(psi.to_density())
}

fn husimi(a: HusimiArgs, out: &mut dyn Write) -> Result<i32> {
    if a.points < 2 || !(a.half_width > 0.0) {
        return Err(Error::Config("--points >= 2 and --half-width > 0 required".into()));
    }
    let rho = husimi_state(&a)?;
    let samples = husimi_grid(&rho, a.half_width, a.points);
    let mut w = sink(&a.out, out)?;
    write_husimi_csv(&samples, &mut w)?;
    w.flush()?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(
            std::iter::once("qnd-cat").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(call(&[]).0, EXIT_USAGE);
        assert_eq!(call(&["bogus"]).0, EXIT_USAGE);
        assert_eq!(call(&["crescent"]).0, EXIT_USAGE);
        assert_eq!(call(&["trajectory", "--n-star", "4", "--frobnicate"]).0, EXIT_USAGE);
        let (code, _, err) = call(&["trajectory", "--n-star", "4"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("seed"));
        assert_eq!(call(&["ensemble", "--n-star", "4", "--seed", "1"]).0, EXIT_USAGE);
        assert_eq!(call(&["trajectory", "--n-star", "1", "--seed", "1"]).0, EXIT_USAGE);
        assert_eq!(call(&["husimi", "--coherent", "1,x"]).0, EXIT_USAGE);
        assert_eq!(call(&["--help"]).0, 0);
    }

    #[test]
    fn husimi_csv() {
        let (code, out, _) = call(&["husimi", "--coherent", "1.5,-0.5", "--dim", "20", "--points", "5"]);
        assert_eq!(code, 0);
        let mut lines = out.lines();
        assert_eq!(lines.next(), Some("x,p,Q"));
        assert_eq!(lines.count(), 25);
    }

    #[test]
    fn fidelity_of_stored_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rho.bin");
        let alpha = Complex64::new(0.0, 2.0);
        let psi = PureState::new(coherent_amplitudes(alpha, 40) + coherent_amplitudes(-alpha, 40)).unwrap();
        save_density_matrix(&psi.to_density(), LogFormat::Binary, &path).unwrap();
        let (code, out, _) = call(&["fidelity", "--rho", path.to_str().unwrap(), "--starts", "2"]);
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v["value"].as_f64().unwrap() > 0.999);
        let (code, _, _) = call(&["fidelity", "--rho", dir.path().join("missing").to_str().unwrap()]);
        assert_eq!(code, EXIT_RUNTIME);
    }

    #[test]
    fn trajectory_with_zero_budget() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("steps.csv");
        let (code, out, _) = call(&[
            "trajectory",
            "--n-star",
            "4",
            "--seed",
            "3",
            "--t-budget",
            "0",
            "--log",
            log.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let rec = crate::protocol::TrajectoryRecord::from_json(&out).unwrap();
        assert_eq!(rec.outcome, Outcome::Timeout);
        assert!(std::fs::read_to_string(&log)
            .unwrap()
            .starts_with("t,dW,dy,n,x,p,M,e_f"));
    }

    #[test]
    fn crescent_csv_with_explicit_xi() {
        let (code, out, err) = call(&[
            "crescent", "--n-star", "8", "--beta", "0.2", "--xi", "0.08", "--points", "64",
        ]);
        assert_eq!(code, 0, "{err}");
        assert!(out.starts_with("p_p,f,maxQ,region_label\n"));
        assert_eq!(out.lines().count(), 65);
        assert!(out.lines().any(|l| l.ends_with(",II")));
    }
}
