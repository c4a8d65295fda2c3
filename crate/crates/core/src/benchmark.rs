//! Wall-clock and memory comparison of the estimating-equation pipeline against
//! the long-table bootstrap.

use std::time::Instant;

use serde::Serialize;

use crate::data::SurvivalDataset;
use crate::ee::{estimate_elements, EfMode, ElementModel};
use crate::error::{Error, Result};
use crate::gcomp::{causal_contrast, GComputationSpec};
use crate::memory;
use crate::scalar::Scalar;
use crate::standard::{bootstrap, standard_gcomp, BootstrapOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOptions {
    /// Runs per method; the reported time is their median.
    pub repeat: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Workers for the parallel bootstrap.
    pub jobs: usize,
    /// Also time the loop-mode estimating functions.
    pub include_loop: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            repeat: 5,
            replicates: 1000,
            seed: 0,
            jobs: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            include_loop: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodTiming {
    pub method: String,
    pub median_seconds: f64,
    pub runs: Vec<f64>,
    /// Risk difference at the last target time with its interval.
    pub rd: f64,
    pub lcl: f64,
    pub ucl: f64,
    pub peak_bytes: Option<usize>,
    /// Set when the method failed; the numeric fields are then NaN.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryPrediction {
    pub model: String,
    pub elements: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub n: usize,
    pub k: usize,
    pub k_star: usize,
    pub p: usize,
    pub q: usize,
    pub target_time: usize,
    pub replicates: usize,
    pub timings: Vec<MethodTiming>,
    pub predictions: Vec<MemoryPrediction>,
}

impl BenchmarkReport {
    pub fn timing(&self, method: &str) -> Option<&MethodTiming> {
        self.timings.iter().find(|t| t.method == method)
    }

    /// Median bootstrap time over median estimating-equation time.
    pub fn speedup(&self, bootstrap_method: &str) -> Option<f64> {
        let ee = self.timing("ee-vectorized")?.median_seconds;
        let bs = self.timing(bootstrap_method)?.median_seconds;
        (bs.is_finite() && ee > 0.0).then(|| bs / ee)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["method", "median_seconds", "runs", "rd", "lcl", "ucl", "peak_bytes", "error"])?;
        for t in &self.timings {
            wr.write_record([
                t.method.clone(),
                t.median_seconds.to_string(),
                t.runs.len().to_string(),
                t.rd.to_string(),
                t.lcl.to_string(),
                t.ucl.to_string(),
                t.peak_bytes.map(|b| b.to_string()).unwrap_or_default(),
                t.error.clone().unwrap_or_default(),
            ])?;
        }
        wr.flush().map_err(|e| Error::Io {
            path: "<benchmark>".into(),
            source: e,
        })?;
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len();
    if m == 0 {
        f64::NAN
    } else if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

fn timed<R>(repeat: usize, mut f: impl FnMut() -> Result<R>) -> Result<(R, Vec<f64>, Option<usize>)> {
    let mut runs = Vec::with_capacity(repeat);
    let mut last = None;
    let mut peak = None;
    for _ in 0..repeat {
        let start = Instant::now();
        let (out, pk) = memory::measure_peak(&mut f);
        runs.push(start.elapsed().as_secs_f64());
        peak = match (peak, pk) {
            (Some(a), Some(b)) => Some(usize::max(a, b)),
            (a, b) => a.or(b),
        };
        last = Some(out?);
    }
    Ok((last.expect("repeat >= 1"), runs, peak))
}

/// Times each method on `ds` and pairs measured peaks with element-count
/// predictions. The last entry of `spec.target_times` is the reported time.
pub fn run_benchmark<T: Scalar>(
    spec: &GComputationSpec,
    ds: &SurvivalDataset<T>,
    opts: &BenchmarkOptions,
) -> Result<BenchmarkReport> {
    if opts.repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    let target = *spec
        .target_times
        .last()
        .ok_or_else(|| Error::Config("at least one target time is required".into()))?;
    let m = spec.target_times.len();
    let mut timings = Vec::new();

    let mut modes = vec![("ee-vectorized", EfMode::Vectorized)];
    if opts.include_loop {
        modes.push(("ee-loop", EfMode::Loop));
    }
    let mut shape = None;
    for (label, mode) in modes {
        let mut s = spec.clone();
        s.fit.mode = Some(mode);
        let (res, runs, peak) = timed(opts.repeat, || causal_contrast(&s, ds))?;
        let row = res.curve.last().expect("non-empty curve");
        shape.get_or_insert_with(|| {
            let p = res.fits[0].p;
            let q = res.fits[0].design.q();
            let k_star = res.fits.iter().map(|f| f.design.rows()).max().unwrap_or(0);
            (p, q, k_star)
        });
        timings.push(MethodTiming {
            method: label.to_string(),
            median_seconds: median(&runs),
            runs,
            rd: row.rd.to_f64_lossy(),
            lcl: row.lcl_rd.to_f64_lossy(),
            ucl: row.ucl_rd.to_f64_lossy(),
            peak_bytes: peak,
            error: None,
        });
    }

    let estimator = |d: &SurvivalDataset<T>| standard_gcomp(spec, d);
    let mut bs_runs = vec![("bootstrap-sequential", 1)];
    if opts.jobs > 1 {
        bs_runs.push(("bootstrap-parallel", opts.jobs));
    }
    for (label, jobs) in bs_runs {
        let bo = BootstrapOptions {
            replicates: opts.replicates,
            seed: opts.seed,
            jobs,
            ci_level: spec.ci_level,
            ..BootstrapOptions::default()
        };
        let j = 3 * m - 1;
        let timing = match timed(opts.repeat, || bootstrap(ds, estimator, &bo)) {
            Ok((res, runs, peak)) => MethodTiming {
                method: label.to_string(),
                median_seconds: median(&runs),
                runs,
                rd: res.estimate[j],
                lcl: res.wald[j].0,
                ucl: res.wald[j].1,
                peak_bytes: peak,
                error: None,
            },
            Err(e) => MethodTiming {
                method: label.to_string(),
                median_seconds: f64::NAN,
                runs: Vec::new(),
                rd: f64::NAN,
                lcl: f64::NAN,
                ucl: f64::NAN,
                peak_bytes: None,
                error: Some(e.to_string()),
            },
        };
        timings.push(timing);
    }

    let (p, q, k_star) = shape.expect("at least one estimating-equation run");
    let n = ds.n();
    let k = ds.grid().intervals();
    let width = std::mem::size_of::<T>();
    let smooth = if spec.time_form.is_disjoint() {
        ElementModel::VectorizedDisjoint
    } else {
        ElementModel::Vectorized
    };
    let predictions = [
        ("standard", ElementModel::Standard),
        ("vectorized", smooth),
        ("loop", ElementModel::Loop),
    ]
    .into_iter()
    .map(|(name, model)| {
        let elements = estimate_elements(n, k, k_star, p, q, model);
        MemoryPrediction {
            model: name.to_string(),
            elements,
            bytes: elements * width,
        }
    })
    .collect();

    Ok(BenchmarkReport {
        n,
        k,
        k_star,
        p,
        q,
        target_time: target,
        replicates: opts.replicates,
        timings,
        predictions,
    })
}
