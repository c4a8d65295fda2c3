//! Acceptance checks, one line per criterion. Runs without the libtest harness
//! so the summary is always printed; exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{micro, random_instance};
use ndarray::{array, Array1, Array2};
use poolsurv::benchmark::{run_benchmark, BenchmarkOptions};
use poolsurv::ee::{estimate_elements, EfMode, ElementModel, PooledScore};
use poolsurv::gcomp::{fit_sandwich, FitOptions};
use poolsurv::linalg::inverse;
use poolsurv::simulation::{generate_cohort, run_experiment, SimConfig};
use poolsurv::standard::{bootstrap, expand_long, fit_standard_model, standard_gcomp, BootstrapOptions, LongTable};
use poolsurv::{
    build_design, causal_contrast, fit_pooled_logistic, load_csv, score_stack, ArmStrategy, CovariateFormula, CsvSchema, Dataset,
    GComputationSpec, SurvivalDataset, TimeForm,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn worked_example() -> Outcome {
    let ds = micro();
    let x = ds.covariates().to_owned();
    let smooth = build_design::<f64>(&TimeForm::Linear, &ds.grid(), None).unwrap();
    let got = score_stack(&ds, x.view(), &smooth, array![0.2, -1.0, 0.1].view(), EfMode::Vectorized)
        .unwrap()
        .matrix;
    let printed = array![
        [-0.750, 0.314, 0.519, 0.0, -3.309, 2.507],
        [0.750, 0.314, -0.519, -0.285, -1.655, -1.253],
        // the worked example prints -0.678 for unit 4; its own residual column
        // (-0.289, -0.310, -0.332, 0.646, 0) weighted by k = 1..5 gives +0.679
        [0.750, 0.960, -0.788, 0.678, -4.258, -3.947]
    ];
    let d1 = max_abs_diff(&got, &printed);

    let disjoint = build_design::<f64>(&TimeForm::disjoint(), &ds.grid(), Some(&ds.unique_event_times())).unwrap();
    let got = score_stack(
        &ds,
        x.view(),
        &disjoint,
        array![0.2, -1.0, 0.1, -0.1].view(),
        EfMode::Vectorized,
    )
    .unwrap()
    .matrix;
    let printed = array![
        [-0.769, 0.358, 0.481, 0.0, -2.127, 1.189],
        [0.769, -0.310, -0.231, -0.269, -0.354, -0.198],
        [0.0, 0.668, -0.250, -0.289, -0.378, -0.214],
        [0.0, 0.0, 0.0, 0.750, -0.332, -0.182]
    ];
    let d2 = max_abs_diff(&got, &printed);
    Outcome::new(
        d1 <= 5e-4 && d2 <= 5e-4,
        format!("max |diff| smooth 3x6 = {d1:.2e}, disjoint 4x6 = {d2:.2e} (tol 5e-4)"),
    )
}

fn long_score(long: &LongTable<f64>, beta: &Array1<f64>) -> Array1<f64> {
    let mut s = Array1::zeros(long.z.ncols());
    for r in 0..long.rows() {
        let z = long.z.row(r);
        let mu = 1.0 / (1.0 + (-z.dot(beta)).exp());
        s.scaled_add(long.weight[r] * (f64::from(long.y[r]) - mu), &z);
    }
    s
}

fn oracle_equivalence() -> Outcome {
    let instances = 200;
    let (mut worst_a, mut worst_b, mut worst_c) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = Vec::new();
    let mut forms = [0usize; 5];
    let mut weighted = 0;
    for seed in 0..instances as u64 {
        let inst = random_instance(seed, (seed % 5) as usize, (seed / 5) % 2 == 1);
        let ds = &inst.ds;
        forms[(seed % 5) as usize] += 1;
        weighted += usize::from(inst.weighted);
        let f = CovariateFormula::linear(ds.covariate_names());
        let x = f.build(ds).unwrap();
        let p = x.ncols();
        let design = build_design::<f64>(&inst.form, &ds.grid(), Some(&ds.unique_event_times())).unwrap();
        let dim = p + design.q();
        let beta: Array1<f64> = (0..dim)
            .map(|j| 0.3 / (1.0 + j as f64) - if j == p { 2.0 } else { 0.0 })
            .collect();

        // (a) score sums against the long-table logistic score
        let vec = PooledScore::new(ds, x.clone(), &design, EfMode::Vectorized).unwrap();
        let mut sum = vec.sum(beta.view()).unwrap();
        if design.disjoint {
            let sp = design.matrix.t().dot(&sum.slice(ndarray::s![p..]));
            sum.slice_mut(ndarray::s![p..]).assign(&sp);
        }
        let long = expand_long(ds, x.view(), &f.column_names(), &design).unwrap();
        let ls = long_score(&long, &beta);
        let da = sum
            .iter()
            .zip(ls.iter())
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max);
        worst_a = worst_a.max(da);

        // (c) loop against vectorized, entrywise on the per-unit stack
        let lp = PooledScore::new(ds, x.clone(), &design, EfMode::Loop).unwrap();
        let dc = max_abs_diff(&vec.stack(beta.view()).unwrap(), &lp.stack(beta.view()).unwrap());
        worst_c = worst_c.max(dc);

        // (b) fitted coefficients against IRLS on the long table
        let fit = fit_pooled_logistic(ds, &f, &inst.form, &FitOptions::default());
        let irls = fit_standard_model(ds, &f, &inst.form, FitOptions::default().disjoint_floor);
        match (fit, irls) {
            (Ok(fit), Ok((b, _))) => {
                let db = fit
                    .coefficients
                    .iter()
                    .zip(b.iter())
                    .map(|(u, v)| (u - v).abs())
                    .fold(0.0, f64::max);
                worst_b = worst_b.max(db);
            }
            (Err(e), _) | (_, Err(e)) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let pass = worst_a <= 1e-10 && worst_b <= 1e-6 && worst_c <= 1e-14 && failures.is_empty();
    let mut detail = format!(
        "{instances} instances (per form {forms:?}, {weighted} weighted): (a) {worst_a:.1e} <= 1e-10, (b) {worst_b:.1e} <= 1e-6, (c) {worst_c:.1e} <= 1e-14"
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; {} fit failures, first: {}", failures.len(), failures[0]));
    }
    Outcome::new(pass, detail)
}

fn sandwich_correctness() -> Outcome {
    let x1 = [
        -1.2, 0.4, 0.9, -0.3, 1.5, -0.8, 0.1, 2.0, -1.9, 0.6, -0.4, 1.1, 0.0, -1.0, 0.8, 1.7, -0.6, 0.3, -1.4, 0.5,
    ];
    let x2 = [
        0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0,
    ];
    let y = [0, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 0];
    let cov = Array2::from_shape_fn((20, 2), |(i, j)| if j == 0 { x1[i] } else { x2[i] });
    let ds = SurvivalDataset::from_columns(&["x1", "x2"], cov, vec![1; 20], y.iter().map(|&v| v == 1).collect()).unwrap();
    let f = CovariateFormula::linear(&["x1", "x2"]);
    let fit = fit_pooled_logistic(&ds, &f, &TimeForm::InterceptOnly, &FitOptions::default()).unwrap();
    let sw = fit_sandwich(&fit, &ds).unwrap();

    // analytic score and Hessian of the logistic log-likelihood
    let n = 20.0;
    let mut b = Array2::<f64>::zeros((3, 3));
    let mut m = Array2::<f64>::zeros((3, 3));
    for i in 0..20 {
        let z: Array1<f64> = array![x1[i], x2[i], 1.0];
        let mu = 1.0 / (1.0 + (-z.dot(&fit.coefficients)).exp());
        let r = f64::from(y[i]) - mu;
        for j in 0..3 {
            for k in 0..3 {
                b[[j, k]] += z[j] * z[k] * mu * (1.0 - mu) / n;
                m[[j, k]] += z[j] * z[k] * r * r / n;
            }
        }
    }
    let bi = inverse(b.view()).unwrap();
    let v = bi.dot(&m).dot(&bi.t()) / n;
    let rel = sw
        .covariance
        .iter()
        .zip(v.iter())
        .map(|(a, e)| (a - e).abs() / e.abs())
        .fold(0.0, f64::max);

    let mut delta_err = 0.0f64;
    for form in [TimeForm::LogLinear, TimeForm::disjoint()] {
        let c = generate_cohort(300, 11).unwrap();
        let spec = GComputationSpec::new("a", form, CovariateFormula::linear(&["w"]), vec![5, 10, 20, 30]);
        let res = causal_contrast(&spec, &c.dataset).unwrap();
        let r = spec.target_times.len();
        let nb = res.theta.len() - 3 * r;
        let cv = &res.sandwich.covariance;
        for k in 0..r {
            let (g1, g0, d) = (nb + k, nb + r + k, nb + 2 * r + k);
            let se = (cv[[g1, g1]] + cv[[g0, g0]] - 2.0 * cv[[g1, g0]]).sqrt();
            delta_err = delta_err.max((se - res.sandwich.se[d]).abs());
        }
    }
    Outcome::new(
        rel <= 1e-6 && delta_err <= 1e-10,
        format!("covariance rel err {rel:.1e} <= 1e-6; delta-method se err {delta_err:.1e} <= 1e-10"),
    )
}

fn simulation() -> Outcome {
    let start = Instant::now();
    let correct = SimConfig {
        sample_sizes: vec![500],
        iterations: 1000,
        time_models: vec![
            "loglinear".into(),
            "spline:5,10,15,20,25".into(),
            "disjoint".into(),
            "linear".into(),
        ],
        ..SimConfig::default()
    };
    let misspecified = SimConfig {
        sample_sizes: vec![1000],
        iterations: 1000,
        time_models: vec!["intercept".into()],
        ..SimConfig::default()
    };
    let a = match run_experiment(&correct) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("n=500 run failed: {e}")),
    };
    let b = match run_experiment(&misspecified) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("n=1000 run failed: {e}")),
    };
    let mut bad = Vec::new();
    let mut worst_bias = 0.0f64;
    let (mut ser_lo, mut ser_hi, mut cov_lo, mut cov_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for model in ["loglinear", "spline", "disjoint"] {
        for t in [10, 20, 30] {
            let r = a.row(500, model, t).expect("metrics row");
            worst_bias = worst_bias.max(r.bias.abs());
            ser_lo = ser_lo.min(r.ser);
            ser_hi = ser_hi.max(r.ser);
            cov_lo = cov_lo.min(r.coverage);
            cov_hi = cov_hi.max(r.coverage);
            if r.bias.abs() > 0.01 || !(0.93..=1.07).contains(&r.ser) || !(0.93..=0.97).contains(&r.coverage) {
                bad.push(format!(
                    "{model} t={t}: bias {:.4} ser {:.3} cover {:.3}",
                    r.bias, r.ser, r.coverage
                ));
            }
        }
    }
    let ic = b.row(1000, "intercept", 10).expect("metrics row");
    if !(ic.bias <= -0.05 && ic.coverage < 0.6) {
        bad.push(format!("intercept t=10: bias {:.4} cover {:.3}", ic.bias, ic.coverage));
    }
    let lin = a.row(500, "linear", 20).expect("metrics row");
    if !(0.01..=0.03).contains(&lin.bias) {
        bad.push(format!("linear t=20: bias {:.4}", lin.bias));
    }
    let failures: usize = a.rows.iter().chain(&b.rows).map(|r| r.failures).max().unwrap_or(0);
    let mut detail = format!(
        "correct forms: max |bias| {worst_bias:.4}, SER [{ser_lo:.3}, {ser_hi:.3}], coverage [{cov_lo:.3}, {cov_hi:.3}]; \
         intercept n=1000 t=10 bias {:.4} cover {:.3}; linear t=20 bias {:.4}; max failed iterations {failures}; {:.0} s",
        ic.bias,
        ic.coverage,
        lin.bias,
        start.elapsed().as_secs_f64()
    );
    if !bad.is_empty() {
        detail.push_str(&format!("; out of band: {}", bad.join("; ")));
    }
    Outcome::new(bad.is_empty(), detail)
}

fn bladder() -> Result<Dataset, poolsurv::Error> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/bladder.csv");
    let schema = CsvSchema {
        id_col: Some("id".into()),
        ..CsvSchema::new("stop", "event", &["rx", "number", "size"])
    };
    load_csv(path, &schema)
}

fn example_one() -> Outcome {
    let ds = match bladder() {
        Ok(d) => d,
        Err(e) => return Outcome::new(false, format!("bladder fixture unavailable: {e}")),
    };
    let cases = [
        ("disjoint", TimeForm::disjoint(), (-0.19, -0.42, 0.04)),
        (
            "spline 10,20,30,40",
            TimeForm::Spline {
                knots: vec![10.0, 20.0, 30.0, 40.0],
            },
            (-0.18, -0.42, 0.06),
        ),
    ];
    let mut pass = true;
    let mut parts = vec![format!("n={}", ds.n())];
    for (label, form, (rd, lo, hi)) in cases {
        let spec = GComputationSpec::new("rx", form, CovariateFormula::linear(&["number", "size"]), vec![59]);
        match causal_contrast(&spec, &ds) {
            Ok(res) => {
                let row = res.curve.last().unwrap();
                let ok = (row.rd - rd).abs() <= 0.01 && (row.lcl_rd - lo).abs() <= 0.02 && (row.ucl_rd - hi).abs() <= 0.02;
                pass &= ok;
                parts.push(format!(
                    "{label}: RD {:.3} ({:.3}, {:.3}) vs {rd} ({lo}, {hi})",
                    row.rd, row.lcl_rd, row.ucl_rd
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{label}: {e}"));
            }
        }
    }
    Outcome::new(pass, parts.join("; "))
}

fn bootstrap_concordance() -> Outcome {
    let cohort = generate_cohort(500, 2024).unwrap();
    let ds = cohort.dataset.truncated(30).unwrap();
    let mut spec = GComputationSpec::new(
        "a",
        TimeForm::Spline {
            knots: vec![5.0, 10.0, 15.0, 20.0, 25.0],
        },
        CovariateFormula::default().with_spline("w", &[-0.8, 0.0, 0.8], 3),
        vec![20],
    )
    .with_strategy(ArmStrategy::SeparateModelsPerArm);
    spec.fit.mode = Some(EfMode::Loop);
    let ee = match causal_contrast(&spec, &ds) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("sandwich fit failed: {e}")),
    };
    let sandwich_se = ee.curve.rows[0].se_rd;
    let run = |jobs: usize| {
        let opts = BootstrapOptions {
            replicates: 1000,
            seed: 99,
            jobs,
            ..BootstrapOptions::default()
        };
        bootstrap(&ds, |d: &Dataset| standard_gcomp(&spec, d), &opts)
    };
    let (seq, par) = match (run(1), run(4)) {
        (Ok(s), Ok(p)) => (s, p),
        (Err(e), _) | (_, Err(e)) => return Outcome::new(false, format!("bootstrap failed: {e}")),
    };
    let boot_se = seq.se[2];
    let ratio = boot_se / sandwich_se;
    let identical = seq
        .replicates
        .iter()
        .zip(par.replicates.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits())
        && seq.se.iter().zip(par.se.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    Outcome::new(
        (ratio - 1.0).abs() <= 0.15 && identical,
        format!(
            "RD(20) se: bootstrap {boot_se:.4} vs sandwich {sandwich_se:.4} (ratio {ratio:.3}, tol 15%); {} failed replicates; parallel == sequential: {identical}",
            seq.failures
        ),
    )
}

fn memory_model() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let (n, k, p, q) = (6, 5, 1, 2);
    let got = [
        estimate_elements(n, k, 3, p, q, ElementModel::Standard),
        estimate_elements(n, k, 3, p, q, ElementModel::Vectorized),
        estimate_elements(n, k, 3, p, q, ElementModel::Loop),
    ];
    pass &= got == [120, 166, 36];
    parts.push(format!("(6,5,1,2): standard/vectorized/loop = {got:?}"));
    for (n, k, ks, p, q) in [(1000, 365, 40, 4, 5), (85, 59, 25, 2, 24), (7, 3, 2, 1, 1)] {
        pass &= estimate_elements(n, k, ks, p, q, ElementModel::Standard) == (p + q + 1) * k * n;
        pass &= estimate_elements(n, k, ks, p, q, ElementModel::Vectorized) == n + 5 * k * n + k * q;
        pass &= estimate_elements(n, k, ks, p, q, ElementModel::VectorizedDisjoint) == n + 5 * ks * n + ks * q;
    }
    let std_big = estimate_elements(1000, 365, 365, 4, 5, ElementModel::Standard);
    let vec_big = estimate_elements(1000, 365, 365, 4, 5, ElementModel::Vectorized);
    pass &= vec_big < std_big;
    parts.push(format!("(1000,365,4,5): vectorized {vec_big} < standard {std_big}"));

    match bladder() {
        Ok(ds) => {
            let spec = GComputationSpec::new(
                "rx",
                TimeForm::disjoint(),
                CovariateFormula::linear(&["number", "size"]),
                vec![59],
            );
            let opts = BenchmarkOptions {
                repeat: 3,
                replicates: 1000,
                seed: 1,
                jobs: 1,
                include_loop: false,
            };
            match run_benchmark(&spec, &ds, &opts) {
                Ok(rep) => {
                    let s = rep.speedup("bootstrap-sequential").unwrap_or(f64::NAN);
                    pass &= s >= 10.0;
                    parts.push(format!(
                        "bladder disjoint: EE {:.4} s vs bootstrap(1000) {:.3} s, speedup {s:.0}x >= 10x",
                        rep.timing("ee-vectorized").map_or(f64::NAN, |t| t.median_seconds),
                        rep.timing("bootstrap-sequential").map_or(f64::NAN, |t| t.median_seconds)
                    ));
                }
                Err(e) => {
                    pass = false;
                    parts.push(format!("benchmark failed: {e}"));
                }
            }
        }
        Err(e) => {
            pass = false;
            parts.push(format!("bladder fixture unavailable: {e}"));
        }
    }
    Outcome::new(pass, parts.join("; "))
}

fn main() -> ExitCode {
    // `cargo test -- --list` and friends expect a quiet listing
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("worked example exactness", worked_example),
        ("oracle equivalence", oracle_equivalence),
        ("sandwich correctness", sandwich_correctness),
        ("simulation reproduction", simulation),
        ("example 1 reproduction", example_one),
        ("bootstrap/sandwich concordance", bootstrap_concordance),
        ("memory model and speed", memory_model),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = check();
        failed += usize::from(!out.pass);
        println!(
            "criterion {} {name}: {} [{:.1} s] {}",
            i + 1,
            if out.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            out.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
