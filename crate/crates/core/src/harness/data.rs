use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Column selection for [`ingest_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub inputs: Vec<String>,
    pub output: String,
}

/// Regression data. Inputs are public; outputs are the private values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Clip interval applied by [`clip_and_center`], in original units.
    pub clip: Option<(f64, f64)>,
    /// Added back to centred outputs to restore original units.
    pub offset: f64,
    pub label: String,
    /// Rows dropped at ingestion because a used column was empty.
    pub rejected_rows: usize,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, label: impl Into<String>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        Ok(Self {
            x,
            y,
            clip: None,
            offset: 0.0,
            label: label.into(),
            rejected_rows: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Width of the clip interval: the output sensitivity `d`.
    pub fn sensitivity(&self) -> Option<f64> {
        self.clip.map(|(lo, hi)| hi - lo)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: DMatrix::from_fn(idx.len(), self.dim(), |i, j| self.x[(idx[i], j)]),
            y: DVector::from_fn(idx.len(), |i, _| self.y[idx[i]]),
            clip: self.clip,
            offset: self.offset,
            label: self.label.clone(),
            rejected_rows: 0,
        }
    }

    /// Per-dimension `(min, max)` of the inputs.
    pub fn input_bounds(&self) -> Vec<(f64, f64)> {
        self.x
            .column_iter()
            .map(|c| (c.min(), c.max()))
            .collect()
    }
}

/// `;` when the header line has semicolons but no commas, else `,`.
fn sniff_delimiter(path: &Path) -> Result<u8> {
    use std::io::BufRead;
    let mut first = String::new();
    std::io::BufReader::new(std::fs::File::open(path)?).read_line(&mut first)?;
    Ok(if first.contains(';') && !first.contains(',') { b';' } else { b',' })
}

/// Read the schema's columns from a headed CSV file.
///
/// Rows with an empty value in a used column are skipped and counted; any
/// other unparsable value is an error naming its line.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    if schema.inputs.is_empty() {
        return Err(invalid("inputs", "schema needs at least one input column"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .delimiter(sniff_delimiter(path)?)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: "file is empty".into(),
        });
    }
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("column `{name}` not found in header {:?}", headers.iter().collect::<Vec<_>>()),
        })
    };
    let input_cols: Vec<usize> = schema.inputs.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let output_col = find(&schema.output)?;

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rejected = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse = |col: usize| -> Result<Option<f64>> {
            match record.get(col) {
                None | Some("") => Ok(None),
                Some(s) if s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") => Ok(None),
                Some(s) => s.parse::<f64>().map(Some).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("column {}: `{s}`: {e}", headers.get(col).unwrap_or("?")),
                }),
            }
        };
        let mut row = Vec::with_capacity(input_cols.len());
        let mut missing = false;
        for &c in &input_cols {
            match parse(c)? {
                Some(v) => row.push(v),
                None => missing = true,
            }
        }
        let y = parse(output_col)?;
        match (missing, y) {
            (false, Some(y)) => {
                xs.extend(row);
                ys.push(y);
            }
            _ => rejected += 1,
        }
    }
    if ys.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: "no complete data rows".into(),
        });
    }
    let n = ys.len();
    let mut ds = Dataset::new(
        DMatrix::from_row_slice(n, input_cols.len(), &xs),
        DVector::from_vec(ys),
        path.display().to_string(),
    )?;
    ds.rejected_rows = rejected;
    if rejected > 0 {
        log::warn!("{}: skipped {rejected} row(s) with missing values", path.display());
    }
    Ok(ds)
}

/// Clamp outputs into `[clip_low, clip_high]` and subtract their mean.
///
/// The mean is kept in `offset` and is not privatised.
pub fn clip_and_center(ds: &Dataset, clip_low: f64, clip_high: f64) -> Result<Dataset> {
    if !(clip_high > clip_low) {
        return Err(invalid("clip", format!("need clip_high > clip_low, got [{clip_low}, {clip_high}]")));
    }
    let clipped = ds.y.map(|v| v.clamp(clip_low, clip_high));
    let offset = if clipped.is_empty() { 0.0 } else { clipped.mean() };
    Ok(Dataset {
        x: ds.x.clone(),
        y: clipped.add_scalar(-offset),
        clip: Some((clip_low, clip_high)),
        offset,
        label: ds.label.clone(),
        rejected_rows: ds.rejected_rows,
    })
}

/// `sqrt(mean((a - b)^2))`.
pub fn rmse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predictions.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("rmse of empty vectors"));
    }
    let mse = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / truth.len() as f64;
    Ok(mse.sqrt())
}

/// Built-in synthetic datasets for desk-scale benchmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Synthetic {
    /// `sin(6 x1) cos(4 x2) + 0.5 x1` on the unit square plus Gaussian noise.
    Smooth2d { n: usize, noise_sd: f64 },
    /// `sin(2 pi x)` on `[0, 1]` plus Gaussian noise.
    Sine1d { n: usize, noise_sd: f64 },
    /// A dense cluster on `[0.3, 0.5]` plus one outlier at `x = 0.9`.
    ClusterOutlier1d { n: usize, noise_sd: f64 },
}

pub fn smooth2d(x1: f64, x2: f64) -> f64 {
    (6.0 * x1).sin() * (4.0 * x2).cos() + 0.5 * x1
}

impl Synthetic {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, noise_sd) = match *self {
            Synthetic::Smooth2d { n, noise_sd }
            | Synthetic::Sine1d { n, noise_sd }
            | Synthetic::ClusterOutlier1d { n, noise_sd } => (n, noise_sd),
        };
        if n == 0 {
            return Err(invalid("n", "synthetic dataset needs at least one point"));
        }
        let noise = Normal::new(0.0, noise_sd).map_err(|e| invalid("noise_sd", e.to_string()))?;
        let (x, f): (DMatrix<f64>, Vec<f64>) = match self {
            Synthetic::Smooth2d { .. } => {
                let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
                let f = (0..n).map(|i| smooth2d(x[(i, 0)], x[(i, 1)])).collect();
                (x, f)
            }
            Synthetic::Sine1d { .. } => {
                let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
                let f = x.iter().map(|v| (2.0 * std::f64::consts::PI * v).sin()).collect();
                (x, f)
            }
            Synthetic::ClusterOutlier1d { .. } => {
                let x = DMatrix::from_fn(n, 1, |i, _| {
                    if i + 1 == n {
                        0.9
                    } else {
                        0.3 + 0.2 * rng.random::<f64>()
                    }
                });
                let f = x.iter().map(|v| (2.0 * std::f64::consts::PI * v).sin()).collect();
                (x, f)
            }
        };
        let y = DVector::from_iterator(n, f.into_iter().map(|v| v + noise.sample(&mut rng)));
        Dataset::new(x, y, format!("synthetic:{self:?}"))
    }
}
