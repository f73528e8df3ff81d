//! `spdevol` command-line interface.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 for I/O errors.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use spdevol::estimate::{feasible_ci, warn_if_dense, Increments};
use spdevol::harness::{run_experiment, ExperimentConfig, SpatialLayout};
use spdevol::oracle::{
    expected_sq_increment_exact, first_order_cov, first_order_sq_increment, gamma_constant, increment_cov_matrix,
    theoretical_autocorrelation, KernelParams,
};
use spdevol::regress::{build_regression_data, fit_least_squares, CovariancePlugin, FitOptions};
use spdevol::simulate::{synthesize_field, SimulationConfig};
use spdevol::{Error, FieldSample, InitialCondition, OperatorParams, VolatilitySpec};

#[derive(Parser, Debug)]
#[command(name = "spdevol", version, about = "Simulate and estimate volatility of a parabolic SPDE")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a field and write it as CSV.
    Simulate {
        #[command(flatten)]
        setup: Setup,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Volatility, quarticity, confidence interval and curvature from a field CSV.
    Estimate {
        field: PathBuf,
        /// Operator parameters as inline JSON or a JSON file.
        #[arg(long)]
        params: Option<String>,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Least-squares fit of (IV0, curvature) from a field CSV.
    Fit {
        field: PathBuf,
        /// Operator parameters; enables the asymptotic covariance.
        #[arg(long)]
        params: Option<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Exact and first-order increment moments for constant volatility.
    Oracle {
        #[arg(long)]
        params: Option<String>,
        #[arg(long, default_value_t = 0.25)]
        sigma: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long = "K", default_value_t = 10_000)]
        cutoff: usize,
        #[arg(long, default_value_t = 0.5)]
        y: f64,
        #[arg(long, default_value_t = 3)]
        lags: usize,
        /// Also print the exact covariance matrix of the first `count` increments.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_parser = parse_initial, default_value = "zero")]
        initial: InitialCondition,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// The constant Γ and its series.
    Gamma {
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Monte Carlo experiment.
    Mc {
        #[command(flatten)]
        setup: Setup,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        level: Option<f64>,
        /// CSV tables to write, e.g. `qq.csv,profile.csv,ratios.csv`.
        #[arg(long, value_delimiter = ',')]
        emit: Vec<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

/// Model and grid settings shared by `simulate` and `mc`; flags override the config file.
#[derive(Args, Debug)]
struct Setup {
    /// Experiment configuration JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long = "K")]
    cutoff: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    refinement: Option<usize>,
    /// Explicit spatial points, comma separated (overrides --m).
    #[arg(long, value_delimiter = ',')]
    y: Option<Vec<f64>>,
    #[arg(long)]
    params: Option<String>,
    #[arg(long)]
    vol: Option<String>,
    #[arg(long, value_parser = parse_initial)]
    initial: Option<InitialCondition>,
    /// Add the modes above K as an exact independent-in-time Gaussian term.
    #[arg(long)]
    tail_correction: bool,
}

fn parse_initial(s: &str) -> Result<InitialCondition, String> {
    match s {
        "zero" => Ok(InitialCondition::Zero),
        "stationary" => Ok(InitialCondition::Stationary),
        other => Err(format!("unknown initial condition `{other}` (zero | stationary)")),
    }
}

/// Inline JSON when the argument looks like JSON, a file path otherwise.
fn load_json<T: DeserializeOwned>(arg: &str) -> Result<T, Error> {
    let trimmed = arg.trim_start();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).map_err(|e| Error::Format(format!("invalid JSON: {e}")));
    }
    load_json_file(Path::new(arg))
}

fn load_json_file<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let file = File::open(path)?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn params_or_default(arg: Option<&str>) -> Result<OperatorParams, Error> {
    arg.map(load_json).transpose().map(|p| p.unwrap_or_default())
}

impl Setup {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg: ExperimentConfig = match &self.config {
            Some(path) => load_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(m) = self.m {
            cfg.m = m;
            cfg.spatial_layout = SpatialLayout::Equispaced;
        }
        if let Some(y) = &self.y {
            cfg.spatial_layout = SpatialLayout::Explicit(y.clone());
        }
        if let Some(k) = self.cutoff {
            cfg.cutoff = k;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(r) = self.refinement {
            cfg.refinement = r;
        }
        if let Some(p) = &self.params {
            cfg.params = load_json(p)?;
        }
        if let Some(v) = &self.vol {
            cfg.vol = load_json::<VolatilitySpec>(v)?;
        }
        if let Some(init) = self.initial {
            cfg.initial = init;
        }
        if self.tail_correction {
            cfg.tail_correction = true;
        }
        Ok(cfg)
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json(path: Option<&Path>, value: &Value) -> Result<(), Error> {
    let mut out = open_output(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Io(e.into()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn read_field(path: &Path) -> Result<FieldSample, Error> {
    FieldSample::read_csv(BufReader::new(File::open(path)?))
}

fn estimate_report(field: &FieldSample, params: &OperatorParams, level: f64) -> Result<Value, Error> {
    let inc = Increments::new(field)?;
    let grid = field.grid();
    warn_if_dense(grid.n(), grid.m());
    let sigma2 = inc.sigma2_multi(params)?;
    let quarticity = inc.quarticity(params)?;
    let ci = feasible_ci(sigma2, quarticity, grid.n(), grid.m(), level)?;
    let curvature = if grid.m() >= 2 { Some(inc.curvature_logratio_default()?) } else { None };
    let per_point = (0..grid.m())
        .map(|j| {
            Ok(json!({
                "y": grid.y()[j],
                "rv": inc.realized_volatility(j)?,
                "sigma2": inc.sigma2_single(j, params)?,
            }))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(json!({
        "sigma2": sigma2,
        "quarticity": quarticity,
        "ci": {"lo": ci.lo, "hi": ci.hi, "level": level},
        "curvature_logratio": curvature,
        "per_point": per_point,
    }))
}

fn fit_report(field: &FieldSample, params: Option<&OperatorParams>) -> Result<Value, Error> {
    let data = build_regression_data(field)?;
    let covariance = match params {
        Some(p) => Some(CovariancePlugin {
            theta2: p.theta2(),
            quart_integral: Increments::new(field)?.quarticity(p)?,
            n: field.grid().n(),
            mode: None,
        }),
        None => None,
    };
    let fit = fit_least_squares(&data, &FitOptions { covariance, ..FitOptions::default() })?;
    Ok(json!({
        "iv0_hat": fit.iv0_hat,
        "kappa_hat": fit.kappa_hat,
        "stderr": fit.stderr.map(|(a, b)| vec![a, b]),
        "cov": fit.asym_cov,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "rss": fit.rss,
    }))
}

fn emit_tables(report: &spdevol::ExperimentReport, paths: &[PathBuf]) -> Result<(), Error> {
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let kind = ["qq", "profile", "ratios"].into_iter().find(|k| stem.starts_with(k)).ok_or_else(|| {
            Error::InvalidParameter(format!("cannot tell which table {} is (qq | profile | ratios)", path.display()))
        })?;
        let mut out = BufWriter::new(File::create(path)?);
        match kind {
            "qq" => report.write_qq_csv(&mut out)?,
            "profile" => report.write_profile_csv(&mut out)?,
            _ => report.write_ratios_csv(&mut out)?,
        }
        out.flush()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { setup, output } => {
            let cfg = setup.resolve()?;
            let sim = SimulationConfig {
                cutoff: cfg.cutoff,
                seed: cfg.seed,
                initial: cfg.initial,
                refinement: cfg.refinement,
                tail_correction: cfg.tail_correction,
            };
            let field = synthesize_field(&cfg.params, &cfg.vol, &cfg.grid()?, &sim)?;
            let mut out = open_output(output.as_deref())?;
            field.write_csv(&mut out)?;
            out.flush()?;
        }
        Command::Estimate { field, params, level, output } => {
            let params = params_or_default(params.as_deref())?;
            let field = read_field(&field)?;
            write_json(output.as_deref(), &estimate_report(&field, &params, level)?)?;
        }
        Command::Fit { field, params, output } => {
            let params = params.as_deref().map(load_json::<OperatorParams>).transpose()?;
            let field = read_field(&field)?;
            write_json(output.as_deref(), &fit_report(&field, params.as_ref())?)?;
        }
        Command::Oracle { params, sigma, n, cutoff, y, lags, count, initial, output } => {
            let params = params_or_default(params.as_deref())?;
            if n == 0 {
                return Err(Error::InvalidParameter("n must be at least 1".into()));
            }
            let delta = 1.0 / n as f64;
            let kp = KernelParams::new(params, sigma, delta, cutoff)?;
            let sigma2 = sigma * sigma;
            let gamma = gamma_constant(1e-12)?;
            let matrix = count.map(|c| increment_cov_matrix(&kp, c, y, initial)).transpose()?;
            let value = json!({
                "gamma": gamma.gamma,
                "series_sum": gamma.series_sum,
                "first_order_sq_increment": first_order_sq_increment(&params, sigma2, y, delta),
                "exact_sq_increment": expected_sq_increment_exact(&kp, n, y)?,
                "first_order_cov": (1..=lags).map(|h| first_order_cov(&params, sigma2, y, delta, h)).collect::<Vec<_>>(),
                "theoretical_autocorrelation": (1..=lags).map(theoretical_autocorrelation).collect::<Vec<_>>(),
                "cov_matrix": matrix,
            });
            write_json(output.as_deref(), &value)?;
        }
        Command::Gamma { tol, output } => {
            let g = gamma_constant(tol)?;
            let value = json!({
                "gamma": g.gamma,
                "series_sum": g.series_sum,
                "pi_gamma": g.pi_gamma,
                "tail_bound": g.tail_bound,
                "terms": g.terms,
                "tol": tol,
            });
            write_json(output.as_deref(), &value)?;
        }
        Command::Mc { setup, reps, level, emit, output } => {
            let mut cfg = setup.resolve()?;
            if let Some(r) = reps {
                cfg.replications = r;
            }
            if let Some(l) = level {
                cfg.level = l;
            }
            let report = run_experiment(&cfg)?;
            let value = serde_json::to_value(&report).map_err(|e| Error::Format(e.to_string()))?;
            write_json(output.as_deref(), &value)?;
            emit_tables(&report, &emit)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet {
        "error"
    } else {
        match cli.verbose {
            0 => "warn",
            1 => "info",
            _ => "debug",
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
