use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use poolsurv::benchmark::{run_benchmark, BenchmarkOptions};
use poolsurv::gcomp::GCompResult;
use poolsurv::memory::TrackingAllocator;
use poolsurv::simulation::{run_experiment, SimConfig};
use poolsurv::standard::{bootstrap, standard_gcomp, BootstrapOptions};
use poolsurv::{
    causal_contrast, discretize, fit_pooled_logistic, load_csv, wald_ci, ArmStrategy, CovariateFormula, CsvSchema, Dataset,
    EfMode, Error, FitOptions, GComputationSpec, JacobianStep, SolverOptions, TimeForm,
};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser, Debug)]
#[command(
    name = "poolsurv",
    version,
    about = "Pooled logistic survival models via stacked estimating equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one pooled logistic model and write coefficients with sandwich covariance.
    Fit(FitArgs),
    /// Risk curves and risk differences by g-computation.
    Gcomp(GcompArgs),
    /// Monte Carlo study of bias, standard errors and coverage.
    Simulate(SimulateArgs),
    /// Time the estimating-equation pipeline against the long-table bootstrap.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    id_col: Option<String>,
    #[arg(long)]
    time_col: String,
    #[arg(long)]
    event_col: String,
    #[arg(long, value_delimiter = ',')]
    covariate_cols: Vec<String>,
    #[arg(long)]
    weight_col: Option<String>,
    /// Raw time units per discrete interval.
    #[arg(long, default_value_t = 1.0)]
    time_resolution: f64,
}

#[derive(Args, Debug, Serialize)]
struct ModelArgs {
    /// intercept, linear, loglinear, spline[:k1,k2,..], disjoint or disjoint:all.
    #[arg(long, default_value = "disjoint")]
    time_model: String,
    /// Spline knots in raw time units; used with `--time-model spline`.
    #[arg(long, value_delimiter = ',')]
    knots: Vec<f64>,
    /// vectorized, loop or auto.
    #[arg(long, default_value = "auto", value_parser = ["vectorized", "loop", "auto"])]
    mode: String,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    /// Relative finite-difference step for Jacobians; automatic when absent.
    #[arg(long)]
    jac_step: Option<f64>,
    /// Budget for automatic mode selection, in bytes (K, M, G suffixes allowed).
    #[arg(long, value_parser = parse_bytes)]
    memory_budget: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct OutputArgs {
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
struct GcompArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    treatment_col: String,
    /// separate or single.
    #[arg(long, default_value = "separate", value_parser = ["separate", "single"])]
    arm_strategy: String,
    /// Raw times at which risks are reported; defaults to every interval.
    #[arg(long, value_delimiter = ',')]
    target_times: Vec<f64>,
    /// sandwich or bootstrap:B.
    #[arg(long, default_value = "sandwich", value_parser = parse_variance)]
    variance: Variance,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also write the covariance of the full parameter stack.
    #[arg(long)]
    dump_covariance: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// JSON file with simulation settings; unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_parser = ["vectorized", "loop", "auto"])]
    mode: Option<String>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
struct BenchmarkArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    treatment_col: String,
    #[arg(long, default_value = "separate", value_parser = ["separate", "single"])]
    arm_strategy: String,
    #[arg(long, value_delimiter = ',')]
    target_times: Vec<f64>,
    /// Bootstrap replicates for the long-table baseline, as bootstrap:B.
    #[arg(long, default_value = "bootstrap:1000", value_parser = parse_variance)]
    variance: Variance,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 5)]
    repeat: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "lowercase")]
enum Variance {
    Sandwich,
    Bootstrap { replicates: usize },
}

fn parse_variance(s: &str) -> Result<Variance, String> {
    match s.split_once(':') {
        None if s == "sandwich" => Ok(Variance::Sandwich),
        Some(("bootstrap", b)) => match b.parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("bootstrap needs a positive replicate count, got '{b}'")),
            Ok(b) => Ok(Variance::Bootstrap { replicates: b }),
        },
        _ => Err(format!("expected 'sandwich' or 'bootstrap:B', got '{s}'")),
    }
}

fn parse_bytes(s: &str) -> Result<usize, String> {
    let s = s.trim();
    let (num, mult) = match s.chars().last() {
        Some('K' | 'k') => (&s[..s.len() - 1], 1usize << 10),
        Some('M' | 'm') => (&s[..s.len() - 1], 1 << 20),
        Some('G' | 'g') => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<usize>()
        .ok()
        .and_then(|v| v.checked_mul(mult))
        .ok_or_else(|| format!("bad byte count '{s}'"))
}

/// Failures split by exit code: 2 for bad invocations, 1 for computations.
enum Failure {
    Usage(String),
    Compute(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Compute(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path, source: std::io::Error) -> Failure {
    Failure::Compute(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl DataArgs {
    fn load(&self) -> CliResult<Dataset> {
        let schema = CsvSchema {
            id_col: self.id_col.clone(),
            weight_col: self.weight_col.clone(),
            resolution: self.time_resolution,
            ..CsvSchema::new(
                &self.time_col,
                &self.event_col,
                &self.covariate_cols.iter().map(String::as_str).collect::<Vec<_>>(),
            )
        };
        Ok(load_csv(&self.input, &schema)?)
    }

    fn to_grid(&self, raw: &[f64], ds: &Dataset) -> CliResult<Vec<usize>> {
        if raw.is_empty() {
            return Ok((1..=ds.grid().intervals()).collect());
        }
        let (t, _) = discretize(raw, self.time_resolution, None)?;
        Ok(t)
    }
}

impl ModelArgs {
    fn time_form(&self, resolution: f64) -> CliResult<TimeForm> {
        let form: TimeForm = if self.time_model == "spline" && !self.knots.is_empty() {
            TimeForm::Spline {
                knots: self.knots.clone(),
            }
        } else {
            self.time_model.parse()?
        };
        Ok(match form {
            TimeForm::Spline { knots } => TimeForm::Spline {
                knots: knots.iter().map(|k| k / resolution).collect(),
            },
            other => other,
        })
    }

    fn fit_options(&self) -> CliResult<FitOptions> {
        if !(self.tol > 0.0) {
            return Err(Failure::Usage(format!("--tol must be positive, got {}", self.tol)));
        }
        let mut opts = FitOptions::default();
        opts.solver = SolverOptions {
            max_iterations: self.max_iter,
            tolerance: self.tol,
            jacobian_step: self.jac_step.map(JacobianStep::Relative).unwrap_or(JacobianStep::Auto),
            ..SolverOptions::default()
        };
        opts.mode = match self.mode.as_str() {
            "auto" => None,
            m => Some(m.parse::<EfMode>()?),
        };
        if let Some(b) = self.memory_budget {
            opts.memory_budget = b;
        }
        Ok(opts)
    }
}

fn prepare_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn create(path: &Path) -> CliResult<fs::File> {
    fs::File::create(path).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn write_matrix(path: &Path, names: &[String], m: &ndarray::Array2<f64>) -> CliResult<()> {
    let mut out = String::from("parameter");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (name, row) in names.iter().zip(m.rows()) {
        out.push_str(name);
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn secs(d: std::time::Duration) -> f64 {
    d.as_secs_f64()
}

fn run_fit(args: &FitArgs) -> CliResult<()> {
    let fit_opts = args.model.fit_options()?;
    let form = args.model.time_form(args.data.time_resolution)?;
    let wall = Instant::now();
    let ds = args.data.load()?;
    let t_load = wall.elapsed();
    let formula = CovariateFormula::linear(&args.data.covariate_cols);
    let t0 = Instant::now();
    let fit = fit_pooled_logistic(&ds, &formula, &form, &fit_opts)?;
    let t_fit = t0.elapsed();
    let t0 = Instant::now();
    let fit = fit.with_sandwich(&ds)?;
    let t_var = t0.elapsed();

    let dir = &args.output.output_dir;
    prepare_dir(dir)?;
    let se = fit.standard_errors();
    let mut text = String::from("term,estimate,se,lcl,ucl,fixed\n");
    for (c, name) in fit.names.iter().enumerate() {
        let est = fit.coefficients[c];
        let fixed = fit.fixed.contains(&c);
        let (lo, hi) = if fixed {
            (f64::NAN, f64::NAN)
        } else {
            wald_ci(est, se[c], args.ci_level)?
        };
        text.push_str(&format!("{name},{est},{},{lo},{hi},{fixed}\n", se[c]));
    }
    let coef_path = dir.join("coefficients.csv");
    fs::write(&coef_path, text).map_err(|e| io_err(&coef_path, e))?;
    let free_names: Vec<String> = fit.free().iter().map(|&c| fit.names[c].clone()).collect();
    if let Some(cov) = &fit.covariance {
        write_matrix(&dir.join("covariance.csv"), &free_names, cov)?;
    }
    let d = &fit.diagnostics;
    write_json(
        &dir.join("fit.json"),
        &json!({
            "version": env!("CARGO_PKG_VERSION"),
            "command": "fit",
            "config": args,
            "n": ds.n(),
            "intervals": ds.grid().intervals(),
            "events": ds.event_count(),
            "mode": format!("{:?}", fit.mode).to_lowercase(),
            "diagnostics": diagnostics_json(&fit.label, d, fit.fixed.len()),
            "timings_seconds": { "load": secs(t_load), "fit": secs(t_fit), "variance": secs(t_var), "total": secs(wall.elapsed()) },
        }),
    )?;
    println!("{}: {d}", fit.label);
    Ok(())
}

fn diagnostics_json(label: &str, d: &poolsurv::SolveDiagnostics, fixed: usize) -> Value {
    json!({
        "model": label,
        "converged": d.converged,
        "iterations": d.iterations,
        "final_norm": d.final_norm,
        "condition": finite_or_null(d.condition),
        "damped_steps": d.damped_steps,
        "fixed_coordinates": fixed,
    })
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn gcomp_spec(
    model: &ModelArgs,
    data: &DataArgs,
    treatment: &str,
    strategy: &str,
    targets: Vec<usize>,
    ci_level: f64,
) -> CliResult<GComputationSpec> {
    let covariates: Vec<&String> = data.covariate_cols.iter().filter(|c| c.as_str() != treatment).collect();
    let mut spec = GComputationSpec::new(
        treatment,
        model.time_form(data.time_resolution)?,
        CovariateFormula::linear(&covariates),
        targets,
    )
    .with_strategy(strategy.parse::<ArmStrategy>()?);
    spec.ci_level = ci_level;
    spec.fit = model.fit_options()?;
    Ok(spec)
}

/// Makes sure the treatment column is loaded even when not listed as a covariate.
fn with_treatment(data: &DataArgs, treatment: &str) -> DataArgs {
    let mut cols = data.covariate_cols.clone();
    if !cols.iter().any(|c| c == treatment) {
        cols.insert(0, treatment.to_string());
    }
    DataArgs {
        input: data.input.clone(),
        id_col: data.id_col.clone(),
        time_col: data.time_col.clone(),
        event_col: data.event_col.clone(),
        covariate_cols: cols,
        weight_col: data.weight_col.clone(),
        time_resolution: data.time_resolution,
    }
}

fn run_gcomp(args: &GcompArgs) -> CliResult<()> {
    let seed = match (args.variance, args.seed) {
        (Variance::Bootstrap { .. }, None) => {
            return Err(Failure::Usage("--seed is required with --variance bootstrap:B".into()))
        }
        (_, s) => s.unwrap_or(0),
    };
    if args.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let wall = Instant::now();
    let data = with_treatment(&args.data, &args.treatment_col);
    let ds = data.load()?;
    let t_load = wall.elapsed();
    let targets = data.to_grid(&args.target_times, &ds)?;
    let spec = gcomp_spec(
        &args.model,
        &data,
        &args.treatment_col,
        &args.arm_strategy,
        targets,
        args.ci_level,
    )?;
    let mut res: GCompResult<f64> = causal_contrast(&spec, &ds)?;

    let mut boot_json = Value::Null;
    let mut t_boot = std::time::Duration::ZERO;
    if let Variance::Bootstrap { replicates } = args.variance {
        let t0 = Instant::now();
        let bo = BootstrapOptions {
            replicates,
            seed,
            jobs: args.jobs,
            ci_level: args.ci_level,
            ..BootstrapOptions::default()
        };
        let bs = bootstrap(&ds, |d: &Dataset| standard_gcomp(&spec, d), &bo)?;
        let m = spec.target_times.len();
        for (k, row) in res.curve.rows.iter_mut().enumerate() {
            let set = |j: usize, est: f64| -> CliResult<(f64, f64, f64)> {
                let se = bs.se[j];
                let (lo, hi) = wald_ci(est, se, args.ci_level)?;
                Ok((se, lo, hi))
            };
            (row.se1, row.lcl1, row.ucl1) = set(k, row.risk1)?;
            (row.se0, row.lcl0, row.ucl0) = set(m + k, row.risk0)?;
            (row.se_rd, row.lcl_rd, row.ucl_rd) = set(2 * m + k, row.rd)?;
        }
        t_boot = t0.elapsed();
        boot_json = json!({
            "replicates": replicates,
            "failures": bs.failures,
            "first_failure": bs.first_failure,
            "percentile_rd": bs.percentile[2 * m..].iter().map(|&(a, b)| json!([a, b])).collect::<Vec<_>>(),
        });
    }

    let dir = &args.output.output_dir;
    prepare_dir(dir)?;
    let curve_path = dir.join("risk_curve.csv");
    res.curve.write_csv(create(&curve_path)?)?;
    if args.dump_covariance {
        write_matrix(&dir.join("covariance.csv"), &res.layout.names, &res.sandwich.covariance)?;
    }
    let last = *res.curve.last().expect("at least one target time");
    let t = res.timings;
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    write_json(
        &dir.join("summary.json"),
        &json!({
            "version": env!("CARGO_PKG_VERSION"),
            "command": "gcomp",
            "config": args,
            "resolved": {
                "time_model": spec.time_form.to_string(),
                "arm_strategy": spec.arm_strategy.to_string(),
                "target_times_grid": spec.target_times,
                "covariates": spec.covariates.column_names(),
            },
            "n": ds.n(),
            "intervals": ds.grid().intervals(),
            "events": ds.event_count(),
            "rd": {
                "time": last.time,
                "estimate": last.rd,
                "se": last.se_rd,
                "lcl": last.lcl_rd,
                "ucl": last.ucl_rd,
            },
            "risk1": last.risk1,
            "risk0": last.risk0,
            "bootstrap": boot_json,
            "diagnostics": {
                "fits": res.fits.iter().map(|f| diagnostics_json(&f.label, &f.diagnostics, f.fixed.len())).collect::<Vec<_>>(),
                "bread_condition": finite_or_null(res.sandwich.condition),
            },
            "warnings": res.warnings,
            "timings_seconds": {
                "load": secs(t_load),
                "fit": secs(t.fit),
                "risks": secs(t.risks),
                "variance": secs(t.variance),
                "bootstrap": secs(t_boot),
                "total": secs(wall.elapsed()),
            },
        }),
    )?;
    println!("RD at {}: {:.4} ({:.4}, {:.4})", last.time, last.rd, last.lcl_rd, last.ucl_rd);
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> CliResult<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            SimConfig::from_json(&text)?
        }
        None if args.seed.is_none() => return Err(Failure::Usage("simulate needs --seed or a --config file".into())),
        None => SimConfig::default(),
    };
    if let Some(n) = args.n {
        config.sample_sizes = vec![n];
    }
    if let Some(it) = args.iters {
        config.iterations = it;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(j) = args.jobs {
        config.jobs = j;
    }
    if let Some(m) = &args.mode {
        config.mode = m.clone();
    }
    config.validate()?;
    let wall = Instant::now();
    let report = run_experiment(&config)?;
    let dir = &args.output.output_dir;
    prepare_dir(dir)?;
    report.write_csv(create(&dir.join("metrics.csv"))?)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_json(
        &dir.join("summary.json"),
        &json!({
            "version": env!("CARGO_PKG_VERSION"),
            "command": "simulate",
            "config": config,
            "truth": report.truth,
            "warnings": report.warnings,
            "timings_seconds": { "total": secs(wall.elapsed()) },
        }),
    )?;
    Ok(())
}

fn run_bench(args: &BenchmarkArgs) -> CliResult<()> {
    let Variance::Bootstrap { replicates } = args.variance else {
        return Err(Failure::Usage("benchmark needs --variance bootstrap:B".into()));
    };
    if args.repeat == 0 || args.jobs == 0 {
        return Err(Failure::Usage("--repeat and --jobs must be at least 1".into()));
    }
    let data = with_treatment(&args.data, &args.treatment_col);
    let ds = data.load()?;
    let targets = data.to_grid(&args.target_times, &ds)?;
    let spec = gcomp_spec(
        &args.model,
        &data,
        &args.treatment_col,
        &args.arm_strategy,
        targets,
        args.ci_level,
    )?;
    let opts = BenchmarkOptions {
        repeat: args.repeat,
        replicates,
        seed: args.seed,
        jobs: args.jobs,
        include_loop: true,
    };
    let report = run_benchmark(&spec, &ds, &opts)?;
    let dir = &args.output.output_dir;
    prepare_dir(dir)?;
    report.write_csv(create(&dir.join("benchmark.csv"))?)?;
    for t in &report.timings {
        match &t.error {
            None => println!(
                "{:<22} {:>10.4} s  RD {:.4} ({:.4}, {:.4})",
                t.method, t.median_seconds, t.rd, t.lcl, t.ucl
            ),
            Some(e) => println!("{:<22} failed: {e}", t.method),
        }
    }
    if let Some(s) = report.speedup("bootstrap-sequential") {
        println!("speedup over sequential bootstrap: {s:.1}x");
    }
    write_json(
        &dir.join("benchmark.json"),
        &json!({
            "version": env!("CARGO_PKG_VERSION"),
            "command": "benchmark",
            "config": args,
            "report": report,
            "speedup_sequential": report.speedup("bootstrap-sequential"),
            "speedup_parallel": report.speedup("bootstrap-parallel"),
        }),
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Gcomp(a) => run_gcomp(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Benchmark(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("Run 'poolsurv --help' for usage.");
            ExitCode::from(2)
        }
        Err(Failure::Compute(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
