//! CSV ingestion: header row, comma separated, `.` decimal separator.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;

use crate::data::{discretize, SurvivalDataset, Weights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which CSV columns feed which dataset fields.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    /// Generated from the record index when absent.
    pub id_col: Option<String>,
    pub time_col: String,
    pub event_col: String,
    pub covariate_cols: Vec<String>,
    pub weight_col: Option<String>,
    /// Raw time units per grid interval.
    pub resolution: f64,
    /// Fixes `K` instead of using the largest observed interval.
    pub horizon: Option<usize>,
}

impl CsvSchema {
    pub fn new(time_col: &str, event_col: &str, covariate_cols: &[&str]) -> Self {
        CsvSchema {
            id_col: None,
            time_col: time_col.to_string(),
            event_col: event_col.to_string(),
            covariate_cols: covariate_cols.iter().map(|s| s.to_string()).collect(),
            weight_col: None,
            resolution: 1.0,
            horizon: None,
        }
    }
}

pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SurvivalDataset<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, schema)
}

pub fn read_csv<T: Scalar, R: Read>(reader: R, schema: &CsvSchema) -> Result<SurvivalDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => return Err(e.into()),
        Err(_) => return Err(Error::NoRecords),
    };
    if headers.is_empty() {
        return Err(Error::NoRecords);
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let id_idx = schema.id_col.as_deref().map(find).transpose()?;
    let time_idx = find(&schema.time_col)?;
    let event_idx = find(&schema.event_col)?;
    let cov_idx = schema.covariate_cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let weight_idx = schema.weight_col.as_deref().map(find).transpose()?;

    let mut ids = Vec::new();
    let mut raw_times = Vec::new();
    let mut events = Vec::new();
    let mut cov = Vec::new();
    let mut weights = Vec::new();

    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |idx: usize, name: &str| -> Result<&str> {
            match rec.get(idx) {
                Some(v) if !v.is_empty() && !v.eq_ignore_ascii_case("na") => Ok(v),
                _ => Err(Error::Row {
                    row,
                    message: format!("missing value in column '{name}'"),
                }),
            }
        };
        let number = |idx: usize, name: &str| -> Result<f64> {
            let v = field(idx, name)?;
            v.parse::<f64>().map_err(|_| Error::Row {
                row,
                message: format!("column '{name}' value '{v}' is not numeric"),
            })
        };

        let t = number(time_idx, &schema.time_col)?;
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Row {
                row,
                message: format!("time must be positive, got {t}"),
            });
        }
        let d = number(event_idx, &schema.event_col)?;
        let d = if d == 0.0 {
            false
        } else if d == 1.0 {
            true
        } else {
            return Err(Error::Row {
                row,
                message: format!("event indicator must be 0 or 1, got {d}"),
            });
        };
        for (&j, name) in cov_idx.iter().zip(&schema.covariate_cols) {
            let v = number(j, name)?;
            if !v.is_finite() {
                return Err(Error::Row {
                    row,
                    message: format!("covariate '{name}' is not finite"),
                });
            }
            cov.push(T::lit(v));
        }
        if let (Some(j), Some(name)) = (weight_idx, schema.weight_col.as_deref()) {
            let w = number(j, name)?;
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Row {
                    row,
                    message: format!("weight must be non-negative, got {w}"),
                });
            }
            weights.push(T::lit(w));
        }
        ids.push(match id_idx {
            Some(j) => field(j, schema.id_col.as_deref().unwrap_or_default())?.to_string(),
            None => row.to_string(),
        });
        raw_times.push(t);
        events.push(d);
    }

    if raw_times.is_empty() {
        return Err(Error::NoRecords);
    }
    let (times, grid) = discretize(&raw_times, schema.resolution, schema.horizon)?;
    let n = times.len();
    let covariates = Array2::from_shape_vec((n, cov_idx.len()), cov).map_err(|e| Error::Dimension(e.to_string()))?;
    let ds = SurvivalDataset::new(ids, schema.covariate_cols.clone(), covariates, times, events, grid)?;
    if weight_idx.is_some() {
        ds.with_weights(Weights::Unit(weights.into()))
    } else {
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> CsvSchema {
        let mut s = CsvSchema::new("t", "d", &["x"]);
        s.id_col = Some("id".into());
        s
    }

    #[test]
    fn reads_micro_data() {
        let text = "id,t,d,x\na,1,1,-1\nb,2,1,1\nc,2,0,-1\nd,4,1,0\ne,4,0,2\nf,5,0,-2\n";
        let ds: SurvivalDataset<f64> = read_csv(text.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.n(), 6);
        assert_eq!(ds.times(), &[1, 2, 2, 4, 4, 5]);
        assert_eq!(ds.event_count(), 3);
        assert_eq!(ds.grid().intervals(), 5);
        assert_eq!(ds.ids()[3], "d");
    }

    #[test]
    fn empty_file_has_no_records() {
        let err = read_csv::<f64, _>("".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::NoRecords), "{err}");
        let err = read_csv::<f64, _>("id,t,d,x\n".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::NoRecords), "{err}");
    }

    #[test]
    fn non_binary_event_names_the_row() {
        let text = "id,t,d,x\na,1,1,0\nb,2,2,0\n";
        let err = read_csv::<f64, _>(text.as_bytes(), &schema()).unwrap_err();
        match err {
            Error::Row { row, message } => {
                assert_eq!(row, 1);
                assert!(message.contains("0 or 1"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn schema_and_value_errors() {
        let err = read_csv::<f64, _>("id,t,x\na,1,0\n".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        let err = read_csv::<f64, _>("id,t,d,x\na,0,1,0\n".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Row { row: 0, .. }));
        let err = read_csv::<f64, _>("id,t,d,x\na,3,1,\n".as_bytes(), &schema()).unwrap_err();
        assert!(err.to_string().contains("missing value"));
    }

    #[test]
    fn weights_and_resolution() {
        let mut s = schema();
        s.weight_col = Some("w".into());
        s.resolution = 30.44;
        let text = "id,t,d,x,w\na,31,1,0,2.5\nb,95,0,1,1\n";
        let ds: SurvivalDataset<f64> = read_csv(text.as_bytes(), &s).unwrap();
        assert_eq!(ds.times(), &[2, 4]);
        assert_eq!(ds.weight(1, 0), 2.5);
    }
}
