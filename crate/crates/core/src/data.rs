//! Observed-data representation on a discrete time grid.
//!
//! A unit's follow-up is summarized by its last interval under observation
//! `T*` (an integer in `1..=K`) and an event flag. Person-period records are
//! never stored; the indicator matrices below are the only expanded view.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `K` equally spaced intervals `(s_{k-1}, s_k]` with `s_0 = 0`, `s_K = tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    intervals: usize,
    width: f64,
}

impl TimeGrid {
    pub fn new(intervals: usize, width: f64) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::Validation("time grid needs at least one interval".into()));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::Validation(format!("interval width must be positive, got {width}")));
        }
        Ok(TimeGrid { intervals, width })
    }

    /// Grid whose intervals have unit width, so grid times equal raw times.
    pub fn unit(intervals: usize) -> Result<Self> {
        Self::new(intervals, 1.0)
    }

    /// Number of intervals `K`.
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn tau(&self) -> f64 {
        self.intervals as f64 * self.width
    }

    /// `s_0, ..., s_K`.
    pub fn bounds(&self) -> Vec<f64> {
        (0..=self.intervals).map(|k| k as f64 * self.width).collect()
    }

    /// Grid times `1..=K`.
    pub fn times(&self) -> Vec<usize> {
        (1..=self.intervals).collect()
    }
}

/// Maps raw positive times onto interval indices `ceil(t / resolution)`.
///
/// Exact multiples of the resolution (up to rounding noise) map to the
/// interval they close. `horizon`, when given, fixes `K`; otherwise `K` is
/// the largest mapped time.
pub fn discretize(raw_times: &[f64], resolution: f64, horizon: Option<usize>) -> Result<(Vec<usize>, TimeGrid)> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::Validation(format!("resolution must be positive, got {resolution}")));
    }
    let mut mapped = Vec::with_capacity(raw_times.len());
    for (i, &t) in raw_times.iter().enumerate() {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Row {
                row: i,
                message: format!("time must be positive, got {t}"),
            });
        }
        let q = t / resolution;
        let r = q.round();
        let k = if (q - r).abs() <= 1e-9 * q.max(1.0) { r } else { q.ceil() };
        mapped.push(k.max(1.0) as usize);
    }
    let max = mapped.iter().copied().max().unwrap_or(0);
    let k = match horizon {
        Some(h) if h < max => return Err(Error::Validation(format!("observed interval {max} exceeds horizon {h}"))),
        Some(h) => h,
        None => max,
    };
    Ok((mapped, TimeGrid::new(k, resolution)?))
}

/// Person-period weights `w[i,k]`; absent weights mean `w == 1`.
#[derive(Debug, Clone, PartialEq)]
pub enum Weights<T> {
    /// One weight per unit, constant over time.
    Unit(Array1<T>),
    /// `K x n` table indexed by grid time then unit.
    UnitTime(Array2<T>),
}

impl<T: Scalar> Weights<T> {
    /// Weight for `unit` in grid interval `time` (1-based).
    #[inline]
    pub fn at(&self, time: usize, unit: usize) -> T {
        match self {
            Weights::Unit(w) => w[unit],
            Weights::UnitTime(w) => w[[time - 1, unit]],
        }
    }

    fn select(&self, idx: &[usize]) -> Self {
        match self {
            Weights::Unit(w) => Weights::Unit(idx.iter().map(|&i| w[i]).collect()),
            Weights::UnitTime(w) => Weights::UnitTime(w.select(Axis(1), idx)),
        }
    }
}

/// Per-unit records `(id, covariates, T*, Delta, weights)` on a time grid.
#[derive(Debug, Clone)]
pub struct SurvivalDataset<T> {
    ids: Vec<String>,
    covariate_names: Vec<String>,
    covariates: Array2<T>,
    times: Vec<usize>,
    events: Vec<bool>,
    weights: Option<Weights<T>>,
    grid: TimeGrid,
}

impl<T: Scalar> SurvivalDataset<T> {
    pub fn new(
        ids: Vec<String>,
        covariate_names: Vec<String>,
        covariates: Array2<T>,
        times: Vec<usize>,
        events: Vec<bool>,
        grid: TimeGrid,
    ) -> Result<Self> {
        let n = times.len();
        if n == 0 {
            return Err(Error::NoRecords);
        }
        if ids.len() != n || events.len() != n || covariates.nrows() != n {
            return Err(Error::Dimension(format!(
                "{} ids, {} times, {} events, {} covariate rows",
                ids.len(),
                n,
                events.len(),
                covariates.nrows()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::Dimension(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                covariates.ncols()
            )));
        }
        for (i, &t) in times.iter().enumerate() {
            if t == 0 || t > grid.intervals() {
                return Err(Error::Row {
                    row: i,
                    message: format!("observed interval {t} outside 1..={}", grid.intervals()),
                });
            }
        }
        for ((i, j), v) in covariates.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::Row {
                    row: i,
                    message: format!("covariate '{}' is not finite", covariate_names[j]),
                });
            }
        }
        Ok(SurvivalDataset {
            ids,
            covariate_names,
            covariates,
            times,
            events,
            weights: None,
            grid,
        })
    }

    /// Convenience constructor with generated ids on a unit-width grid sized to the data.
    pub fn from_columns(covariate_names: &[&str], covariates: Array2<T>, times: Vec<usize>, events: Vec<bool>) -> Result<Self> {
        let k = times.iter().copied().max().unwrap_or(0);
        let ids = (0..times.len()).map(|i| i.to_string()).collect();
        let grid = TimeGrid::unit(k.max(1))?;
        Self::new(
            ids,
            covariate_names.iter().map(|s| s.to_string()).collect(),
            covariates,
            times,
            events,
            grid,
        )
    }

    pub fn with_weights(mut self, weights: Weights<T>) -> Result<Self> {
        let n = self.n();
        let ok = match &weights {
            Weights::Unit(w) => w.len() == n,
            Weights::UnitTime(w) => w.ncols() == n && w.nrows() == self.grid.intervals(),
        };
        if !ok {
            return Err(Error::Dimension("weight table does not match dataset".into()));
        }
        let bad = match &weights {
            Weights::Unit(w) => w.iter().any(|v| !(v.is_finite() && *v >= T::zero())),
            Weights::UnitTime(w) => w.iter().any(|v| !(v.is_finite() && *v >= T::zero())),
        };
        if bad {
            return Err(Error::Validation("weights must be finite and non-negative".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    /// Re-homes the dataset on a longer grid (e.g. to predict past the last observed time).
    pub fn with_grid(mut self, grid: TimeGrid) -> Result<Self> {
        if grid.intervals() < self.max_time() {
            return Err(Error::Validation(format!(
                "grid of {} intervals shorter than observed follow-up {}",
                grid.intervals(),
                self.max_time()
            )));
        }
        if let Some(Weights::UnitTime(w)) = &self.weights {
            if w.nrows() != grid.intervals() {
                return Err(Error::Dimension("unit-time weights tied to the old grid".into()));
            }
        }
        self.grid = grid;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariates(&self) -> ArrayView2<'_, T> {
        self.covariates.view()
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn weights(&self) -> Option<&Weights<T>> {
        self.weights.as_ref()
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn max_time(&self) -> usize {
        self.times.iter().copied().max().unwrap_or(0)
    }

    pub fn event_count(&self) -> usize {
        self.events.iter().filter(|&&d| d).count()
    }

    /// `sum_i T*_i`, the number of person-period records.
    pub fn person_periods(&self) -> usize {
        self.times.iter().sum()
    }

    /// Ascending distinct times at which an event was observed.
    pub fn unique_event_times(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self
            .times
            .iter()
            .zip(&self.events)
            .filter_map(|(&t, &d)| d.then_some(t))
            .collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Result<ArrayView1<'_, T>> {
        self.column_index(name)
            .map(|j| self.covariates.column(j))
            .ok_or_else(|| Error::Schema(format!("unknown covariate '{name}'")))
    }

    /// Copy with covariate `name` set to `value` for every unit.
    pub fn with_column_value(&self, name: &str, value: T) -> Result<Self> {
        let j = self
            .column_index(name)
            .ok_or_else(|| Error::Schema(format!("unknown covariate '{name}'")))?;
        let mut out = self.clone();
        out.covariates.column_mut(j).fill(value);
        Ok(out)
    }

    /// Ends follow-up at grid time `horizon`: later times are censored there
    /// and the grid shrinks to `horizon` intervals when it was longer.
    pub fn truncated(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Validation("follow-up must end after interval 1 or later".into()));
        }
        let k = self.grid.intervals().min(horizon);
        let mut out = self.clone();
        for (t, e) in out.times.iter_mut().zip(out.events.iter_mut()) {
            if *t > k {
                *t = k;
                *e = false;
            }
        }
        out.grid = TimeGrid::new(k, self.grid.width())?;
        if let Some(Weights::UnitTime(w)) = &self.weights {
            out.weights = Some(Weights::UnitTime(w.slice(ndarray::s![..k, ..]).to_owned()));
        }
        Ok(out)
    }

    /// Rows `idx` (repeats allowed), keeping the grid. Ids are taken verbatim.
    pub fn select(&self, idx: &[usize]) -> Self {
        SurvivalDataset {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
            covariates: self.covariates.select(Axis(0), idx),
            times: idx.iter().map(|&i| self.times[i]).collect(),
            events: idx.iter().map(|&i| self.events[i]).collect(),
            weights: self.weights.as_ref().map(|w| w.select(idx)),
            grid: self.grid,
        }
    }

    /// Like [`select`](Self::select) but gives every drawn row a fresh id, so
    /// repeated units stay distinct blocks.
    pub fn resample(&self, idx: &[usize]) -> Self {
        let mut out = self.select(idx);
        for (slot, (id, &src)) in out.ids.iter_mut().zip(idx).enumerate() {
            *id = format!("{}#{}", self.ids[src], slot);
        }
        out
    }

    #[inline]
    pub fn weight(&self, time: usize, unit: usize) -> T {
        self.weights.as_ref().map_or(T::one(), |w| w.at(time, unit))
    }
}

/// Risk-set, final-time and event indicators over a set of grid rows.
///
/// Rows are usually `1..=K`; for disjoint time they are the unique event
/// times, in which case a unit censored between event times has no `1` in
/// `final_time`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorMatrices {
    pub row_times: Vec<usize>,
    /// `R[k,i] = 1` iff `T*_i >= t_k`.
    pub risk_set: Array2<u8>,
    /// `R*[k,i] = 1` iff `T*_i == t_k`.
    pub final_time: Array2<u8>,
    /// `Y = Delta (.) R*`.
    pub events: Array2<u8>,
}

impl IndicatorMatrices {
    pub fn rows(&self) -> usize {
        self.row_times.len()
    }

    /// Number of units in the risk set per row.
    pub fn at_risk(&self) -> Vec<usize> {
        self.risk_set
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v as usize).sum())
            .collect()
    }

    pub fn events_per_row(&self) -> Vec<usize> {
        self.events
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v as usize).sum())
            .collect()
    }
}

/// Indicators over the full grid `1..=K`.
pub fn indicator_matrices<T: Scalar>(dataset: &SurvivalDataset<T>) -> IndicatorMatrices {
    indicator_matrices_on(dataset, &dataset.grid().times())
}

/// Indicators over arbitrary ascending grid rows.
pub fn indicator_matrices_on<T: Scalar>(dataset: &SurvivalDataset<T>, row_times: &[usize]) -> IndicatorMatrices {
    let n = dataset.n();
    let k = row_times.len();
    let mut risk_set = Array2::zeros((k, n));
    let mut final_time = Array2::zeros((k, n));
    let mut events = Array2::zeros((k, n));
    for (r, &s) in row_times.iter().enumerate() {
        for (i, (&t, &d)) in dataset.times().iter().zip(dataset.events()).enumerate() {
            if t >= s {
                risk_set[[r, i]] = 1;
            }
            if t == s {
                final_time[[r, i]] = 1;
                events[[r, i]] = d as u8;
            }
        }
    }
    IndicatorMatrices {
        row_times: row_times.to_vec(),
        risk_set,
        final_time,
        events,
    }
}
