//! Design matrices: the time design `S` (one row per grid row) and the
//! baseline covariate design `X` (one row per unit).

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::data::{SurvivalDataset, TimeGrid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which rows a disjoint-indicator design spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisjointRows {
    /// Only the unique event times `K*`.
    EventTimes,
    /// Every grid interval; intervals without events get no finite estimate.
    AllIntervals,
}

/// Functional form for time.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeForm {
    InterceptOnly,
    Linear,
    LogLinear,
    /// Linear term plus restricted quadratic spline terms at `knots` (grid units).
    Spline {
        knots: Vec<f64>,
    },
    Disjoint(DisjointRows),
}

impl TimeForm {
    pub fn disjoint() -> Self {
        TimeForm::Disjoint(DisjointRows::EventTimes)
    }

    pub fn is_disjoint(&self) -> bool {
        matches!(self, TimeForm::Disjoint(_))
    }

    pub fn label(&self) -> &'static str {
        match self {
            TimeForm::InterceptOnly => "intercept",
            TimeForm::Linear => "linear",
            TimeForm::LogLinear => "loglinear",
            TimeForm::Spline { .. } => "spline",
            TimeForm::Disjoint(_) => "disjoint",
        }
    }
}

impl fmt::Display for TimeForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeForm::Spline { knots } => {
                let k: Vec<String> = knots.iter().map(|k| k.to_string()).collect();
                write!(f, "spline:{}", k.join(","))
            }
            TimeForm::Disjoint(DisjointRows::AllIntervals) => write!(f, "disjoint:all"),
            other => f.write_str(other.label()),
        }
    }
}

impl FromStr for TimeForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, tail) = match s.split_once(':') {
            Some((h, t)) => (h, Some(t)),
            None => (s, None),
        };
        match (head.to_ascii_lowercase().as_str(), tail) {
            ("intercept" | "intercept_only", None) => Ok(TimeForm::InterceptOnly),
            ("linear", None) => Ok(TimeForm::Linear),
            ("loglinear" | "log_linear" | "log-linear", None) => Ok(TimeForm::LogLinear),
            ("spline", Some(k)) => Ok(TimeForm::Spline { knots: parse_knots(k)? }),
            ("spline", None) => Err(Error::Config("spline time model needs knots, e.g. spline:10,20,30,40".into())),
            ("disjoint", None) => Ok(TimeForm::disjoint()),
            ("disjoint", Some("all")) => Ok(TimeForm::Disjoint(DisjointRows::AllIntervals)),
            _ => Err(Error::Config(format!("unknown time model '{s}'"))),
        }
    }
}

pub fn parse_knots(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|k| k.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad knot '{k}'"))))
        .collect()
}

/// Realized time design `S`: one row per grid row in `row_times`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeDesignMatrix<T> {
    pub matrix: Array2<T>,
    pub column_names: Vec<String>,
    /// Grid time of each row, ascending.
    pub row_times: Vec<usize>,
    /// Rows are (a subset of) unique event times and the score for `beta_S` is `P` itself.
    pub disjoint: bool,
    /// Disjoint only: the row whose hazard is carried by the intercept alone.
    pub reference_row: usize,
}

impl<T: Scalar> TimeDesignMatrix<T> {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn q(&self) -> usize {
        self.matrix.ncols()
    }

    /// For disjoint designs, the parameter column carried by each row.
    pub fn disjoint_column_of_row(&self, row: usize) -> usize {
        debug_assert!(self.disjoint);
        match row.cmp(&self.reference_row) {
            std::cmp::Ordering::Equal => 0,
            std::cmp::Ordering::Less => row + 1,
            std::cmp::Ordering::Greater => row,
        }
    }

    /// Copy with every column divided by `scale[c]`.
    pub fn scaled(&self, scale: &[T]) -> Self {
        let mut out = self.clone();
        for (mut col, &s) in out.matrix.columns_mut().into_iter().zip(scale) {
            col.mapv_inplace(|v| v / s);
        }
        out
    }
}

/// `(x)_+^power` truncated-power terms `(t - k_j)_+^p - (t - k_m)_+^p`, `j < m`.
pub fn restricted_spline_terms<T: Scalar>(t: T, knots: &[T], power: i32) -> Vec<T> {
    let m = knots.len();
    if m < 2 {
        return Vec::new();
    }
    let pos = |x: T| if x > T::zero() { x.powi(power) } else { T::zero() };
    let last = pos(t - knots[m - 1]);
    knots[..m - 1].iter().map(|&k| pos(t - k) - last).collect()
}

/// Restricted quadratic spline terms; linear beyond the last knot.
pub fn restricted_quadratic_spline<T: Scalar>(t: T, knots: &[T]) -> Vec<T> {
    restricted_spline_terms(t, knots, 2)
}

fn check_knots(knots: &[f64], lower: f64, upper: f64, what: &str) -> Result<()> {
    if knots.len() < 3 {
        return Err(Error::Config(format!(
            "{what} spline needs at least 3 knots, got {}",
            knots.len()
        )));
    }
    if knots.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!("{what} spline knots must be strictly ascending")));
    }
    if knots.iter().any(|&k| !(k > lower && k < upper)) {
        return Err(Error::Config(format!(
            "{what} spline knots must lie inside ({lower}, {upper})"
        )));
    }
    Ok(())
}

/// Builds `S` for a functional form on `grid`.
///
/// Smooth forms span grid times `1..=K`. Disjoint forms span the unique event
/// times (or every interval for [`DisjointRows::AllIntervals`]) and are an
/// identity matrix with its reference column replaced by ones.
pub fn build_design<T: Scalar>(
    form: &TimeForm,
    grid: &TimeGrid,
    unique_event_times: Option<&[usize]>,
) -> Result<TimeDesignMatrix<T>> {
    let k_max = grid.intervals();
    let grid_rows: Vec<usize> = grid.times();
    let smooth = |cols: Vec<String>, f: &dyn Fn(usize) -> Vec<T>| {
        let q = cols.len();
        let mut m = Array2::zeros((k_max, q));
        for (r, &k) in grid_rows.iter().enumerate() {
            for (c, v) in f(k).into_iter().enumerate() {
                m[[r, c]] = v;
            }
        }
        TimeDesignMatrix {
            matrix: m,
            column_names: cols,
            row_times: grid_rows.clone(),
            disjoint: false,
            reference_row: 0,
        }
    };
    let kt = |k: usize| T::lit(k as f64);
    match form {
        TimeForm::InterceptOnly => Ok(smooth(vec!["(intercept)".into()], &|_| vec![T::one()])),
        TimeForm::Linear => Ok(smooth(vec!["(intercept)".into(), "t".into()], &|k| vec![T::one(), kt(k)])),
        TimeForm::LogLinear => Ok(smooth(vec!["(intercept)".into(), "ln(t)".into()], &|k| {
            vec![T::one(), kt(k).ln()]
        })),
        TimeForm::Spline { knots } => {
            check_knots(knots, 0.0, grid.intervals() as f64, "time")?;
            let kn: Vec<T> = knots.iter().map(|&k| T::lit(k)).collect();
            let mut cols = vec!["(intercept)".to_string(), "t".to_string()];
            cols.extend(knots[..knots.len() - 1].iter().map(|k| format!("rqs(t;{k})")));
            Ok(smooth(cols, &|k| {
                let mut row = vec![T::one(), kt(k)];
                row.extend(restricted_quadratic_spline(kt(k), &kn));
                row
            }))
        }
        TimeForm::Disjoint(rows) => {
            let events = unique_event_times
                .filter(|u| !u.is_empty())
                .ok_or_else(|| Error::NoEvents(" (disjoint time needs unique event times)".into()))?;
            if events.windows(2).any(|w| w[0] >= w[1]) || events[events.len() - 1] > k_max || events[0] == 0 {
                return Err(Error::Validation("unique event times must be ascending grid times".into()));
            }
            let (row_times, reference_row) = match rows {
                DisjointRows::EventTimes => (events.to_vec(), 0),
                DisjointRows::AllIntervals => (grid_rows.clone(), events[0] - 1),
            };
            let m = row_times.len();
            let mut mat = Array2::zeros((m, m));
            let mut cols = Vec::with_capacity(m);
            cols.push("(intercept)".to_string());
            for (r, _) in row_times.iter().enumerate() {
                mat[[r, 0]] = T::one();
                if r != reference_row {
                    let c = if r < reference_row { r + 1 } else { r };
                    mat[[r, c]] = T::one();
                }
            }
            for (r, &t) in row_times.iter().enumerate() {
                if r != reference_row {
                    cols.push(format!("I(t={t})"));
                }
            }
            Ok(TimeDesignMatrix {
                matrix: mat,
                column_names: cols,
                row_times,
                disjoint: true,
                reference_row,
            })
        }
    }
}

/// One term of the baseline covariate design.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateTerm {
    Linear(String),
    /// Linear term plus restricted truncated-power terms of degree `power`.
    Spline {
        column: String,
        knots: Vec<f64>,
        power: i32,
    },
}

impl CovariateTerm {
    pub fn column(&self) -> &str {
        match self {
            CovariateTerm::Linear(c) => c,
            CovariateTerm::Spline { column, .. } => column,
        }
    }
}

/// Linear and spline terms of baseline covariates. No intercept: the time
/// design always carries it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CovariateFormula {
    pub terms: Vec<CovariateTerm>,
}

impl CovariateFormula {
    pub fn linear<S: AsRef<str>>(columns: &[S]) -> Self {
        CovariateFormula {
            terms: columns
                .iter()
                .map(|c| CovariateTerm::Linear(c.as_ref().to_string()))
                .collect(),
        }
    }

    pub fn with_spline(mut self, column: &str, knots: &[f64], power: i32) -> Self {
        self.terms.push(CovariateTerm::Spline {
            column: column.to_string(),
            knots: knots.to_vec(),
            power,
        });
        self
    }

    /// Drops every term built from `column`.
    pub fn without(&self, column: &str) -> Self {
        CovariateFormula {
            terms: self.terms.iter().filter(|t| t.column() != column).cloned().collect(),
        }
    }

    pub fn uses(&self, column: &str) -> bool {
        self.terms.iter().any(|t| t.column() == column)
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.terms {
            match t {
                CovariateTerm::Linear(c) => out.push(c.clone()),
                CovariateTerm::Spline { column, knots, power } => {
                    out.push(column.clone());
                    let tag = if *power == 3 { "rcs" } else { "rqs" };
                    out.extend(
                        knots[..knots.len().saturating_sub(1)]
                            .iter()
                            .map(|k| format!("{tag}({column};{k})")),
                    );
                }
            }
        }
        out
    }

    /// Builds the `n x p` matrix `X` from a dataset's covariate columns.
    pub fn build<T: Scalar>(&self, ds: &SurvivalDataset<T>) -> Result<Array2<T>> {
        let n = ds.n();
        let mut cols: Vec<Vec<T>> = Vec::new();
        for term in &self.terms {
            let x = ds.column(term.column())?;
            match term {
                CovariateTerm::Linear(_) => cols.push(x.to_vec()),
                CovariateTerm::Spline { knots, power, column } => {
                    if knots.len() < 3 || knots.windows(2).any(|w| !(w[0] < w[1])) {
                        return Err(Error::Config(format!(
                            "spline on '{column}' needs at least 3 strictly ascending knots"
                        )));
                    }
                    if !(1..=3).contains(power) {
                        return Err(Error::Config(format!("spline power {power} not supported")));
                    }
                    let kn: Vec<T> = knots.iter().map(|&k| T::lit(k)).collect();
                    let base = cols.len();
                    cols.push(x.to_vec());
                    cols.extend((0..kn.len() - 1).map(|_| Vec::with_capacity(n)));
                    for &v in x.iter() {
                        for (j, s) in restricted_spline_terms(v, &kn, *power).into_iter().enumerate() {
                            cols[base + 1 + j].push(s);
                        }
                    }
                }
            }
        }
        let p = cols.len();
        let mut m = Array2::zeros((n, p));
        for (j, c) in cols.into_iter().enumerate() {
            for (i, v) in c.into_iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        Ok(m)
    }
}
