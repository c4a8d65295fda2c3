#![allow(dead_code)]

use ndarray::{array, Array2};
use poolsurv::{DisjointRows, SurvivalDataset, TimeForm, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Six units with one covariate, as in the worked example.
pub fn micro() -> SurvivalDataset<f64> {
    SurvivalDataset::from_columns(
        &["x"],
        array![[-1.0], [1.0], [-1.0], [0.0], [2.0], [-2.0]],
        vec![1, 2, 2, 4, 4, 5],
        vec![true, true, false, true, false, false],
    )
    .unwrap()
}

pub struct Instance {
    pub ds: SurvivalDataset<f64>,
    pub form: TimeForm,
    pub weighted: bool,
}

pub fn all_forms(k: usize) -> Vec<TimeForm> {
    let kf = k as f64;
    vec![
        TimeForm::InterceptOnly,
        TimeForm::Linear,
        TimeForm::LogLinear,
        TimeForm::Spline {
            knots: vec![(kf * 0.25).round(), (kf * 0.5).round(), (kf * 0.75).round()],
        },
        TimeForm::Disjoint(DisjointRows::EventTimes),
    ]
}

/// Random survival instance with `n <= 50`, `K <= 20`, `p <= 3`.
pub fn random_instance(seed: u64, form_index: usize, weighted: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(20..=50);
    let k = rng.random_range(8..=20);
    let p = rng.random_range(0..=3);
    let mut x = Array2::<f64>::zeros((n, p));
    for v in x.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        let lp: f64 = -2.0 + (0..p).map(|j| 0.5 * x[[i, j]]).sum::<f64>();
        let h = 1.0 / (1.0 + (-lp).exp());
        let cens = rng.random_range(1..=k);
        let mut t = 1;
        let mut ev = false;
        while t <= k {
            if rng.random::<f64>() < h {
                ev = true;
                break;
            }
            t += 1;
        }
        if !ev || t > cens {
            times.push(cens.min(t.min(k)));
            events.push(false);
        } else {
            times.push(t);
            events.push(true);
        }
    }
    // unit 0 is censored at K: the grid reaches K and no interval has every
    // unit at risk failing (which would put a hazard at 1). Unit 2 fails at K
    // so the tail beyond the last spline knot has an event; without one the
    // likelihood has no maximum.
    times[0] = k;
    events[0] = false;
    events[1] = true;
    times[2] = k;
    events[2] = true;
    let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
    let grid = poolsurv::TimeGrid::unit(k).unwrap();
    let mut ds = SurvivalDataset::new(ids, names, x, times, events, grid).unwrap();
    if weighted {
        let w = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        ds = ds.with_weights(Weights::Unit(w)).unwrap();
    }
    let form = all_forms(k)[form_index % 5].clone();
    Instance { ds, form, weighted }
}
