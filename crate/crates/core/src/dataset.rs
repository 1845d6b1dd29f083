//! Multi-level functional observations and their CSV representation.
//!
//! A dataset holds one [`Curve`] per subject. Each curve belongs to a level
//! `1..=I` of the one-way layout and carries its own time grid, responses and
//! functional covariates `u(t)` (an `n × p` matrix, one row per time point).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How covariates relate to observation times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateRule {
    /// Covariates were supplied explicitly and cannot be derived from `t`.
    Explicit,
    /// `u(t) = scale * t` with `p = 1`.
    Time { scale: f64 },
}

impl CovariateRule {
    /// Evaluates the rule at `t`, if the covariates are a known function of time.
    pub fn at(&self, t: f64) -> Option<Vec<f64>> {
        match *self {
            CovariateRule::Explicit => None,
            CovariateRule::Time { scale } => Some(vec![scale * t]),
        }
    }
}

/// One observed curve `y_ij(t_1..t_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub id: String,
    /// Level index, 1-based.
    pub level: usize,
    /// Replicate index within the level, 1-based.
    pub replicate: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// `n × p` covariate matrix.
    pub covariates: DMatrix<f64>,
}

impl Curve {
    pub fn new(
        id: impl Into<String>,
        level: usize,
        replicate: usize,
        times: Vec<f64>,
        values: Vec<f64>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let curve = Curve {
            id: id.into(),
            level,
            replicate,
            times,
            values,
            covariates,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates.ncols()
    }

    fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n == 0 {
            return Err(Error::Dataset(format!("curve `{}` has no observations", self.id)));
        }
        if self.values.len() != n {
            return Err(Error::Dimension {
                expected: n,
                found: self.values.len(),
            });
        }
        if self.covariates.nrows() != n {
            return Err(Error::Dimension {
                expected: n,
                found: self.covariates.nrows(),
            });
        }
        let finite = self.times.iter().chain(&self.values).chain(self.covariates.iter());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!("curve `{}` has non-finite entries", self.id)));
        }
        for w in self.times.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Dataset(format!(
                    "curve `{}` times are not strictly increasing",
                    self.id
                )));
            }
        }
        if self.level == 0 || self.replicate == 0 {
            return Err(Error::Dataset(format!(
                "curve `{}` level and replicate indices are 1-based",
                self.id
            )));
        }
        Ok(())
    }

    /// Covariate row at observation `k`.
    pub fn covariate_row(&self, k: usize) -> Vec<f64> {
        self.covariates.row(k).iter().copied().collect()
    }
}

/// The design vector `z_ij`: ones in the first and `(i+1)`-th slots.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignVector(Vec<f64>);

impl DesignVector {
    pub fn entries(&self) -> &[f64] {
        &self.0
    }

    /// `z^T beta`.
    pub fn dot(&self, beta: &[f64]) -> Result<f64> {
        if beta.len() != self.0.len() {
            return Err(Error::Dimension {
                expected: self.0.len(),
                found: beta.len(),
            });
        }
        Ok(self.0.iter().zip(beta).map(|(z, b)| z * b).sum())
    }
}

pub fn design_vector(level: usize, levels: usize) -> Result<DesignVector> {
    if level == 0 || level > levels {
        return Err(Error::Index {
            index: level,
            max: levels,
        });
    }
    let mut z = vec![0.0; levels + 1];
    z[0] = 1.0;
    z[level] = 1.0;
    Ok(DesignVector(z))
}

/// A collection of curves grouped into `I` levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalDataset {
    pub curves: Vec<Curve>,
    /// `level_labels[i - 1]` is the original label of level `i`.
    pub level_labels: Vec<String>,
    pub covariate_rule: CovariateRule,
}

impl FunctionalDataset {
    pub fn new(
        curves: Vec<Curve>,
        level_labels: Vec<String>,
        covariate_rule: CovariateRule,
    ) -> Result<Self> {
        let ds = FunctionalDataset {
            curves,
            level_labels,
            covariate_rule,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn levels(&self) -> usize {
        self.level_labels.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.curves.first().map_or(0, Curve::covariate_dim)
    }

    pub fn total_observations(&self) -> usize {
        self.curves.iter().map(Curve::len).sum()
    }

    pub fn curve(&self, id: &str) -> Option<&Curve> {
        self.curves.iter().find(|c| c.id == id)
    }

    /// Smallest and largest observation time over all curves.
    pub fn time_range(&self) -> (f64, f64) {
        self.curves.iter().flat_map(|c| c.times.iter()).fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), &t| (lo.min(t), hi.max(t)),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.curves.is_empty() {
            return Err(Error::Dataset("dataset has no curves".into()));
        }
        if self.level_labels.is_empty() {
            return Err(Error::Dataset("dataset has no levels".into()));
        }
        let p = self.covariate_dim();
        let mut seen = HashMap::new();
        for c in &self.curves {
            c.validate()?;
            if c.level > self.levels() {
                return Err(Error::Index {
                    index: c.level,
                    max: self.levels(),
                });
            }
            if c.covariate_dim() != p {
                return Err(Error::Dimension {
                    expected: p,
                    found: c.covariate_dim(),
                });
            }
            if seen.insert(c.id.as_str(), ()).is_some() {
                return Err(Error::Dataset(format!("duplicate curve id `{}`", c.id)));
            }
        }
        Ok(())
    }

    /// Reads a dataset from a CSV file.
    pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, schema)
    }

    /// Reads a dataset from any CSV source. Row numbers in errors are file
    /// line numbers (the header is line 1).
    pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let id_col = find(&schema.curve_id)?;
        let level_col = find(&schema.level)?;
        let t_col = find(&schema.t)?;
        let y_col = find(&schema.y)?;
        let cov_names: Vec<String> = match &schema.covariates {
            Some(names) => names.clone(),
            None => (1..)
                .map(|k| format!("u{k}"))
                .take_while(|name| headers.iter().any(|h| h == name))
                .collect(),
        };
        let cov_cols = cov_names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;

        struct Pending {
            level: usize,
            rows: Vec<(f64, f64, Vec<f64>)>,
        }
        let mut labels: Vec<String> = Vec::new();
        let mut order: Vec<String> = Vec::new();
        let mut pending: HashMap<String, Pending> = HashMap::new();

        for (idx, record) in rdr.records().enumerate() {
            let record = record?;
            let row = record.position().map_or(idx + 2, |p| p.line() as usize);
            let field = |col: usize, name: &str| -> Result<&str> {
                record.get(col).ok_or_else(|| Error::Parse {
                    row,
                    column: name.to_string(),
                    message: "missing field".into(),
                })
            };
            let number = |col: usize, name: &str| -> Result<f64> {
                let raw = field(col, name)?;
                let v: f64 = raw.parse().map_err(|_| Error::Parse {
                    row,
                    column: name.to_string(),
                    message: format!("`{raw}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        column: name.to_string(),
                        message: format!("`{raw}` is not finite"),
                    });
                }
                Ok(v)
            };
            let id = field(id_col, &schema.curve_id)?.to_string();
            let label = field(level_col, &schema.level)?.to_string();
            let t = number(t_col, &schema.t)?;
            let y = number(y_col, &schema.y)?;
            let u = cov_cols
                .iter()
                .zip(&cov_names)
                .map(|(&c, n)| number(c, n))
                .collect::<Result<Vec<_>>>()?;

            let level = match labels.iter().position(|l| *l == label) {
                Some(i) => i + 1,
                None => {
                    labels.push(label.clone());
                    labels.len()
                }
            };
            let entry = pending.entry(id.clone()).or_insert_with(|| {
                order.push(id.clone());
                Pending {
                    level,
                    rows: Vec::new(),
                }
            });
            if entry.level != level {
                return Err(Error::Parse {
                    row,
                    column: schema.level.clone(),
                    message: format!("curve `{id}` appears under more than one level"),
                });
            }
            entry.rows.push((t, y, u));
        }

        let p = cov_names.len();
        let rule = if p == 0 {
            CovariateRule::Time { scale: 1.0 }
        } else {
            CovariateRule::Explicit
        };
        let mut replicate_count = vec![0usize; labels.len()];
        let mut curves = Vec::with_capacity(order.len());
        for id in order {
            let mut pend = pending.remove(&id).expect("curve registered in order");
            pend.rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pend.rows.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::DuplicateTime {
                        curve: id,
                        time: w[0].0,
                    });
                }
            }
            let n = pend.rows.len();
            let times: Vec<f64> = pend.rows.iter().map(|r| r.0).collect();
            let values: Vec<f64> = pend.rows.iter().map(|r| r.1).collect();
            let covariates = if p == 0 {
                DMatrix::from_column_slice(n, 1, &times)
            } else {
                DMatrix::from_fn(n, p, |k, q| pend.rows[k].2[q])
            };
            replicate_count[pend.level - 1] += 1;
            let replicate = replicate_count[pend.level - 1];
            curves.push(Curve::new(id, pend.level, replicate, times, values, covariates)?);
        }
        FunctionalDataset::new(curves, labels, rule)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(file)
    }

    /// Writes the dataset with shortest round-trip float formatting. Covariate
    /// columns are omitted when they are exactly `u(t) = t`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let implicit = matches!(self.covariate_rule, CovariateRule::Time { scale } if scale == 1.0);
        let p = if implicit { 0 } else { self.covariate_dim() };
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["curve_id".to_string(), "level".into(), "t".into(), "y".into()];
        header.extend((1..=p).map(|k| format!("u{k}")));
        wtr.write_record(&header)?;
        for c in &self.curves {
            for k in 0..c.len() {
                let mut rec = vec![
                    c.id.clone(),
                    self.level_labels[c.level - 1].clone(),
                    c.times[k].to_string(),
                    c.values[k].to_string(),
                ];
                rec.extend((0..p).map(|q| c.covariates[(k, q)].to_string()));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Column names used when reading a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub curve_id: String,
    pub level: String,
    pub t: String,
    pub y: String,
    /// Explicit covariate columns; `None` picks up `u1, u2, ...` when present.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            curve_id: "curve_id".into(),
            level: "level".into(),
            t: "t".into(),
            y: "y".into(),
            covariates: None,
        }
    }
}
