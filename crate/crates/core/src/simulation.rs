//! Monte Carlo study: data generation, truth by simulation, and the
//! bias / ESE / ASE / SER / coverage summary.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SurvivalDataset, TimeGrid};
use crate::design::{CovariateFormula, DisjointRows, TimeForm};
use crate::ee::EfMode;
use crate::error::{Error, Result};
use crate::gcomp::{causal_contrast, FitOptions, GComputationSpec};
use crate::inference::normal_quantile;

/// Draws per potential outcome used for the true effect.
pub const TRUTH_DRAWS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub sample_sizes: Vec<usize>,
    pub iterations: usize,
    pub target_times: Vec<usize>,
    /// Time forms as accepted by [`TimeForm`]'s parser.
    pub time_models: Vec<String>,
    pub confounder_knots: Vec<f64>,
    pub seed: u64,
    pub truth_seed: u64,
    pub truth_draws: usize,
    pub jobs: usize,
    pub ci_level: f64,
    /// `vectorized`, `loop`, or `auto`.
    pub mode: String,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Administrative end of follow-up in grid intervals; `None` follows
    /// units until their event or censoring time.
    pub follow_up: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            sample_sizes: vec![500],
            iterations: 1000,
            target_times: vec![10, 20, 30],
            time_models: vec![
                "intercept".into(),
                "linear".into(),
                "loglinear".into(),
                "spline:5,10,15,20,25".into(),
                "disjoint".into(),
            ],
            confounder_knots: vec![-0.8, 0.0, 0.8],
            seed: 20240101,
            truth_seed: 7,
            truth_draws: TRUTH_DRAWS,
            jobs: 1,
            ci_level: 0.95,
            mode: "loop".into(),
            tolerance: 1e-9,
            max_iterations: 5000,
            follow_up: Some(30),
        }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: SimConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("simulation config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(Error::Config("sample sizes must be positive".into()));
        }
        if self.target_times.is_empty() || self.target_times.windows(2).any(|w| w[0] >= w[1]) || self.target_times[0] == 0 {
            return Err(Error::Config("target times must be positive and strictly ascending".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if let Some(f) = self.follow_up {
            let last = *self.target_times.last().expect("checked non-empty");
            if f < last {
                return Err(Error::Config(format!("follow-up {f} ends before target time {last}")));
            }
        }
        self.forms()?;
        self.ef_mode()?;
        Ok(())
    }

    pub fn forms(&self) -> Result<Vec<TimeForm>> {
        self.time_models.iter().map(|s| s.parse()).collect()
    }

    fn ef_mode(&self) -> Result<Option<EfMode>> {
        match self.mode.as_str() {
            "auto" => Ok(None),
            m => m.parse().map(Some),
        }
    }
}

/// One simulated cohort with its potential outcomes.
#[derive(Debug, Clone)]
pub struct Cohort {
    /// Covariates `a` and `w`.
    pub dataset: SurvivalDataset<f64>,
    pub w: Vec<f64>,
    pub a: Vec<u8>,
    pub t1: Vec<usize>,
    pub t0: Vec<usize>,
    pub censor: Vec<usize>,
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `-ln U` with `U` on `(0, 1]`.
fn std_exponential(rng: &mut ChaCha8Rng) -> f64 {
    -(1.0 - rng.random::<f64>()).ln()
}

fn weibull_time(scale: f64, shape: f64, e: f64) -> usize {
    ((scale * e.powf(1.0 / shape)).ceil() as usize).max(1)
}

/// Potential event times `(T^1, T^0)` for confounder `w`.
fn potential_times(w: f64, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let t1 = weibull_time(65.0 + 5.0 * w, 0.75, std_exponential(rng));
    let t0 = weibull_time(50.0 + 5.0 * w, 1.5, std_exponential(rng));
    (t1, t0)
}

fn cohort_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a cohort of `n` units from stream `stream` of `seed`.
pub fn generate_cohort_stream(n: usize, seed: u64, stream: u64) -> Result<Cohort> {
    if n == 0 {
        return Err(Error::Config("cohort size must be positive".into()));
    }
    let mut rng = cohort_rng(seed, stream);
    let mut w = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut t1 = Vec::with_capacity(n);
    let mut t0 = Vec::with_capacity(n);
    let mut censor = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        let wi = loop {
            let v = rng.random_range(-1.0..1.0);
            if v > -1.0 {
                break v;
            }
        };
        let ai = u8::from(rng.random::<f64>() < expit(-1.5 * wi));
        let (p1, p0) = potential_times(wi, &mut rng);
        let c = ((38.0 * std_exponential(&mut rng)).ceil() as usize).max(1);
        let t = if ai == 1 { p1 } else { p0 };
        times.push(t.min(c));
        events.push(t <= c);
        w.push(wi);
        a.push(ai);
        t1.push(p1);
        t0.push(p0);
        censor.push(c);
    }
    let k = *times.iter().max().expect("n >= 1");
    let cov = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { f64::from(a[i]) } else { w[i] });
    let ids = (1..=n).map(|i| i.to_string()).collect();
    let dataset = SurvivalDataset::new(ids, vec!["a".into(), "w".into()], cov, times, events, TimeGrid::unit(k)?)?;
    Ok(Cohort {
        dataset,
        w,
        a,
        t1,
        t0,
        censor,
    })
}

/// Draws a cohort of `n` units; fixed `seed` gives an identical cohort.
pub fn generate_cohort(n: usize, seed: u64) -> Result<Cohort> {
    generate_cohort_stream(n, seed, 0)
}

/// True risk differences `Pr(T^1 <= t) - Pr(T^0 <= t)` estimated from `draws`
/// simulated potential outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub seed: u64,
    pub draws: usize,
    pub times: Vec<usize>,
    pub risk1: Vec<f64>,
    pub risk0: Vec<f64>,
    pub rd: Vec<f64>,
}

impl TruthTable {
    pub fn rd_at(&self, t: usize) -> Option<f64> {
        self.times.iter().position(|&x| x == t).map(|k| self.rd[k])
    }
}

pub fn true_effect(times: &[usize], draws: usize, seed: u64) -> Result<TruthTable> {
    if draws == 0 {
        return Err(Error::Config("truth needs at least one draw".into()));
    }
    let mut rng = cohort_rng(seed, u64::MAX);
    let mut c1 = vec![0u64; times.len()];
    let mut c0 = vec![0u64; times.len()];
    for _ in 0..draws {
        let w = rng.random_range(-1.0..1.0);
        let (p1, p0) = potential_times(w, &mut rng);
        for (k, &t) in times.iter().enumerate() {
            c1[k] += u64::from(p1 <= t);
            c0[k] += u64::from(p0 <= t);
        }
    }
    let d = draws as f64;
    let risk1: Vec<f64> = c1.iter().map(|&c| c as f64 / d).collect();
    let risk0: Vec<f64> = c0.iter().map(|&c| c as f64 / d).collect();
    let rd = risk1.iter().zip(&risk0).map(|(a, b)| a - b).collect();
    Ok(TruthTable {
        seed,
        draws,
        times: times.to_vec(),
        risk1,
        risk0,
        rd,
    })
}

/// `Pr(T^a <= t)` by averaging the Weibull CDF over `W ~ U(-1, 1)` with
/// Gauss-Legendre quadrature (independent of the draw-based truth).
pub fn quadrature_risk(a: u8, t: usize) -> f64 {
    let (base, shape) = if a == 1 { (65.0, 0.75) } else { (50.0, 1.5) };
    // 20-point rule on [-1, 1]
    let nodes = gauss_legendre_20();
    let mut s = 0.0;
    for (x, wt) in nodes {
        let scale: f64 = base + 5.0 * x;
        s += wt * (1.0 - (-(t as f64 / scale).powf(shape)).exp());
    }
    s / 2.0
}

fn gauss_legendre_20() -> Vec<(f64, f64)> {
    let half = [
        (0.07652652113349734, 0.15275338713072578),
        (0.2277858511416451, 0.14917298647260366),
        (0.37370608871541955, 0.14209610931838187),
        (0.5108670019508271, 0.13168863844917653),
        (0.636053680726515, 0.11819453196151825),
        (0.7463319064601508, 0.10193011981724026),
        (0.8391169718222188, 0.08327674157670467),
        (0.9122344282513258, 0.06267204833410944),
        (0.9639719272779138, 0.04060142980038622),
        (0.9931285991850949, 0.017614007139153273),
    ];
    half.iter().flat_map(|&(x, w)| [(x, w), (-x, w)]).collect()
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub n: usize,
    pub model: String,
    pub time: usize,
    pub truth: f64,
    pub bias: f64,
    pub ese: f64,
    pub ase: f64,
    pub ser: f64,
    pub coverage: f64,
    pub iterations: usize,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<MetricsRow>,
    pub truth: TruthTable,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn row(&self, n: usize, model: &str, time: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.n == n && r.model == model && r.time == time)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush().map_err(|e| Error::Io {
            path: "<metrics>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// Per-iteration result: `(rd, se)` at each target time, or the failure message.
type IterationResult = std::result::Result<Vec<(f64, f64)>, String>;

fn model_label(form: &TimeForm) -> String {
    match form {
        TimeForm::Spline { .. } => "spline".into(),
        TimeForm::Disjoint(DisjointRows::EventTimes) => "disjoint".into(),
        other => other.to_string(),
    }
}

/// Fits one cohort under every time model.
fn run_iteration(
    config: &SimConfig,
    forms: &[TimeForm],
    n: usize,
    iteration: usize,
    fit: &FitOptions,
) -> Result<Vec<IterationResult>> {
    let stream = ((n as u64) << 32) | iteration as u64;
    let mut cohort = generate_cohort_stream(n, config.seed, stream)?;
    if let Some(f) = config.follow_up {
        cohort.dataset = cohort.dataset.truncated(f)?;
    }
    let covariates = CovariateFormula::default().with_spline("w", &config.confounder_knots, 3);
    let k = cohort.dataset.grid().intervals();
    let targets: Vec<usize> = config.target_times.iter().copied().filter(|&t| t <= k).collect();
    Ok(forms
        .iter()
        .map(|form| {
            if targets.len() != config.target_times.len() {
                return Err(format!("follow-up ends at {k}, before the last target time"));
            }
            let mut spec = GComputationSpec::new("a", form.clone(), covariates.clone(), targets.clone());
            spec.ci_level = config.ci_level;
            spec.fit = fit.clone();
            causal_contrast(&spec, &cohort.dataset)
                .map(|r| r.curve.rows.iter().map(|row| (row.rd, row.se_rd)).collect())
                .map_err(|e| e.to_string())
        })
        .collect())
}

/// Runs the study and aggregates metrics per `(n, model, time)`. Failed fits
/// are excluded and counted.
pub fn run_experiment(config: &SimConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let forms = config.forms()?;
    let truth = true_effect(&config.target_times, config.truth_draws, config.truth_seed)?;
    let mut fit = FitOptions {
        mode: config.ef_mode()?,
        ..FitOptions::default()
    };
    fit.solver.tolerance = config.tolerance;
    fit.solver.max_iterations = config.max_iterations;
    fit.solver.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let z = normal_quantile((1.0 + config.ci_level) / 2.0);
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &n in &config.sample_sizes {
        let results: Vec<Result<Vec<IterationResult>>> = pool.install(|| {
            (0..config.iterations)
                .into_par_iter()
                .map(|it| run_iteration(config, &forms, n, it, &fit))
                .collect()
        });
        let results: Vec<Vec<IterationResult>> = results.into_iter().collect::<Result<_>>()?;
        for (m, form) in forms.iter().enumerate() {
            let label = model_label(form);
            let ok: Vec<&Vec<(f64, f64)>> = results.iter().filter_map(|r| r[m].as_ref().ok()).collect();
            let failures = results.len() - ok.len();
            let correct = matches!(form, TimeForm::LogLinear | TimeForm::Spline { .. } | TimeForm::Disjoint(_));
            if correct && failures as f64 > 0.05 * config.iterations as f64 {
                let first = results.iter().find_map(|r| r[m].as_ref().err()).cloned().unwrap_or_default();
                warnings.push(format!(
                    "n={n}, {label}: {failures} of {} iterations failed (first: {first})",
                    config.iterations
                ));
            }
            for (k, &t) in config.target_times.iter().enumerate() {
                let tr = truth.rd[k];
                let used = ok.len() as f64;
                let mean = ok.iter().map(|r| r[k].0).sum::<f64>() / used;
                let (mut ss, mut sse, mut cov) = (0.0, 0.0, 0.0);
                for r in &ok {
                    let (est, se) = r[k];
                    ss += (est - mean) * (est - mean);
                    sse += se;
                    cov += f64::from(u8::from((est - tr).abs() <= z * se));
                }
                let ese = (ss / (used - 1.0)).sqrt();
                let ase = sse / used;
                rows.push(MetricsRow {
                    n,
                    model: label.clone(),
                    time: t,
                    truth: tr,
                    bias: mean - tr,
                    ese,
                    ase,
                    ser: ase / ese,
                    coverage: cov / used,
                    iterations: ok.len(),
                    failures,
                });
            }
        }
    }
    Ok(ExperimentReport { rows, truth, warnings })
}
