//! Vertically partitioned datasets and the shared-seed batch sampler.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, Batch, GlobalModel, Head, PartyModel, PartyShape};
use crate::rng::SplitMix64;

/// Aligned feature blocks `X_1 … X_K` plus the shared label vector.
///
/// Row `i` of every block belongs to sample id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct VerticalDataset {
    parts: Vec<DMatrix<f64>>,
    labels: Vec<f64>,
}

impl VerticalDataset {
    pub fn new(parts: Vec<DMatrix<f64>>, labels: Vec<f64>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::config("dataset needs at least one party"));
        }
        for p in &parts {
            if p.nrows() != labels.len() {
                return Err(Error::Dimension {
                    context: "party rows vs labels",
                    expected: labels.len(),
                    actual: p.nrows(),
                });
            }
        }
        Ok(Self { parts, labels })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_parties(&self) -> usize {
        self.parts.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.parts.iter().map(|p| p.ncols()).collect()
    }

    pub fn part(&self, k: usize) -> &DMatrix<f64> {
        &self.parts[k]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn batch_features(&self, k: usize, batch: &Batch) -> DMatrix<f64> {
        self.parts[k].select_rows(batch.ids())
    }

    pub fn all_batch_features(&self, batch: &Batch) -> Vec<DMatrix<f64>> {
        (0..self.num_parties()).map(|k| self.batch_features(k, batch)).collect()
    }

    pub fn batch_labels(&self, batch: &Batch) -> Vec<f64> {
        batch.ids().iter().map(|&i| self.labels[i]).collect()
    }

    /// Sub-dataset with the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> VerticalDataset {
        VerticalDataset {
            parts: self.parts.iter().map(|p| p.select_rows(rows)).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenation `[X_1, …, X_K]` (columns in partition order).
    pub fn concatenated(&self) -> DMatrix<f64> {
        let total: usize = self.widths().iter().sum();
        let mut out = DMatrix::zeros(self.n_samples(), total);
        let mut col = 0;
        for p in &self.parts {
            out.columns_mut(col, p.ncols()).copy_from(p);
            col += p.ncols();
        }
        out
    }

    /// Undoes the column permutation of `spec`, reproducing the source matrix.
    pub fn reassemble(&self, spec: &PartitionSpec) -> DMatrix<f64> {
        let cat = self.concatenated();
        match &spec.permutation {
            None => cat,
            Some(perm) => {
                let mut out = DMatrix::zeros(cat.nrows(), cat.ncols());
                for (pos, &src) in perm.iter().enumerate() {
                    out.set_column(src, &cat.column(pos));
                }
                out
            }
        }
    }
}

/// Column widths per party, optionally after permuting the source columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub widths: Vec<usize>,
    /// `permutation[j]` is the source column placed at position `j`.
    pub permutation: Option<Vec<usize>>,
}

impl PartitionSpec {
    pub fn contiguous(widths: Vec<usize>) -> Self {
        Self {
            widths,
            permutation: None,
        }
    }

    /// `parties` equal blocks over `d` columns; the remainder goes to the last party.
    pub fn equal(d: usize, parties: usize) -> Result<Self> {
        if parties == 0 || parties > d {
            return Err(Error::config(format!(
                "cannot split {d} columns among {parties} parties"
            )));
        }
        let base = d / parties;
        let mut widths = vec![base; parties];
        widths[parties - 1] += d - base * parties;
        Ok(Self::contiguous(widths))
    }
}

/// Splits `x` into contiguous (post-permutation) column blocks.
pub fn partition(x: &DMatrix<f64>, labels: Vec<f64>, spec: &PartitionSpec) -> Result<VerticalDataset> {
    let d = x.ncols();
    let total: usize = spec.widths.iter().sum();
    if total != d {
        return Err(Error::Dimension {
            context: "partition widths",
            expected: d,
            actual: total,
        });
    }
    if spec.widths.contains(&0) {
        return Err(Error::config("every party needs at least one feature column"));
    }
    let source = match &spec.permutation {
        None => x.clone(),
        Some(perm) => {
            let mut seen = vec![false; d];
            if perm.len() != d || perm.iter().any(|&c| c >= d || std::mem::replace(&mut seen[c], true)) {
                return Err(Error::config(
                    "column permutation is not a permutation of the source columns",
                ));
            }
            x.select_columns(perm)
        }
    };
    let mut parts = Vec::with_capacity(spec.widths.len());
    let mut col = 0;
    for &w in &spec.widths {
        parts.push(source.columns(col, w).into_owned());
        col += w;
    }
    VerticalDataset::new(parts, labels)
}

/// Synthetic linear-regression testbed with a known optimum.
#[derive(Debug, Clone)]
pub struct SyntheticRegression {
    pub dataset: VerticalDataset,
    pub true_weights: Vec<f64>,
    /// Least-squares solution over `[1, X]`: intercept first, then one weight per column.
    pub ls_solution: Vec<f64>,
    /// Minimum of `½·mean((b + wᵀx − y)²)`.
    pub f_inf: f64,
}

impl SyntheticRegression {
    /// Linear parties with unit embedding width under the sum head, set to the
    /// least-squares optimum.
    pub fn optimal_model(&self) -> GlobalModel {
        let mut offset = 1;
        let parties = self
            .dataset
            .widths()
            .into_iter()
            .map(|w| {
                let shape = PartyShape {
                    arch: Arch::Linear,
                    feature_width: w,
                    embed_width: 1,
                };
                let params = self.ls_solution[offset..offset + w].to_vec();
                offset += w;
                PartyModel::new(shape, params).expect("widths come from the dataset")
            })
            .collect();
        GlobalModel::new(vec![self.ls_solution[0]], parties, Head::Sum).expect("consistent optimum")
    }
}

/// `X ~ N(0,1)`, `y = X w* + ε`, equal-width split among `k` parties.
pub fn synth_regression(seed: u64, n: usize, d: usize, k: usize, noise_std: f64) -> Result<SyntheticRegression> {
    if n == 0 || d == 0 || k == 0 {
        return Err(Error::config("synthetic data needs n, d, k >= 1"));
    }
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(Error::config("noise_std must be finite and non-negative"));
    }
    let spec = PartitionSpec::equal(d, k)?;
    let mut xr = SplitMix64::keyed(seed, &[0xDA7A, 0]);
    let mut wr = SplitMix64::keyed(seed, &[0xDA7A, 1]);
    let mut er = SplitMix64::keyed(seed, &[0xDA7A, 2]);
    // Row-by-row so the stream order does not depend on the storage layout.
    let mut rows = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        rows.push(StandardNormal.sample(&mut xr));
    }
    let x = DMatrix::from_row_slice(n, d, &rows);
    let true_weights: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut wr)).collect();
    let labels: Vec<f64> = (0..n)
        .map(|i| {
            let clean: f64 = x.row(i).iter().zip(&true_weights).map(|(a, b)| a * b).sum();
            let eps: f64 = StandardNormal.sample(&mut er);
            clean + noise_std * eps
        })
        .collect();

    let (ls_solution, f_inf) = if noise_std == 0.0 {
        let mut sol = vec![0.0];
        sol.extend(&true_weights);
        (sol, 0.0)
    } else {
        least_squares_with_intercept(&x, &labels)?
    };
    Ok(SyntheticRegression {
        dataset: partition(&x, labels, &spec)?,
        true_weights,
        ls_solution,
        f_inf,
    })
}

/// `X ~ N(0,1)`, label `argmax_c (X W*)_c` for a random `W*`; equal-width split.
pub fn synth_classification(seed: u64, n: usize, d: usize, k: usize, classes: usize) -> Result<VerticalDataset> {
    if n == 0 || d == 0 || k == 0 || classes < 2 {
        return Err(Error::config(
            "synthetic classes need n, d, k >= 1 and at least 2 classes",
        ));
    }
    let spec = PartitionSpec::equal(d, k)?;
    let mut xr = SplitMix64::keyed(seed, &[0xC1A5, 0]);
    let mut wr = SplitMix64::keyed(seed, &[0xC1A5, 1]);
    let rows: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut xr)).collect();
    let x = DMatrix::from_row_slice(n, d, &rows);
    let w: Vec<f64> = (0..d * classes).map(|_| StandardNormal.sample(&mut wr)).collect();
    let w = DMatrix::from_row_slice(d, classes, &w);
    let scores = &x * w;
    let labels = (0..n).map(|i| scores.row(i).transpose().argmax().0 as f64).collect();
    partition(&x, labels, &spec)
}

/// Normal-equations solve over `[1, X]`; returns the solution and `½·mean(resid²)`.
pub fn least_squares_with_intercept(x: &DMatrix<f64>, y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = x.nrows();
    let z = DMatrix::from_fn(n, x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let yv = DVector::from_column_slice(y);
    let gram = z.transpose() * &z;
    let rhs = z.transpose() * &yv;
    let sol = match gram.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Numerical(format!("least-squares solve failed: {e}")))?,
    };
    let resid = &z * &sol - yv;
    let f = 0.5 * resid.norm_squared() / n as f64;
    Ok((sol.as_slice().to_vec(), f))
}

/// `B` distinct indices from `[0, N)` by partial Fisher–Yates on the stream
/// `(seed, round)`. Every caller with the same arguments gets the same batch.
pub fn sample_batch(seed: u64, round: u64, n: usize, b: usize) -> Result<Batch> {
    if b == 0 || b > n {
        return Err(Error::config(format!("batch size {b} must be in 1..={n}")));
    }
    let mut rng = SplitMix64::keyed(seed, &[0xBA7C, round]);
    let mut ids: Vec<usize> = (0..n).collect();
    for i in 0..b {
        let j = i + rng.below((n - i) as u64) as usize;
        ids.swap(i, j);
    }
    ids.truncate(b);
    Batch::new(ids, n)
}

/// Reads a numeric CSV, splitting out `label_column`.
pub fn load_csv(path: &Path, label_column: usize, has_header: bool) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut width = None;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let cols = *width.get_or_insert(record.len());
        if record.len() != cols {
            return Err(parse_err(format!("expected {cols} fields, found {}", record.len())));
        }
        if label_column >= cols {
            return Err(parse_err(format!(
                "label column {label_column} out of range for {cols} fields"
            )));
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("field {j} is not a number: {cell:?}")))?;
            if j == label_column {
                labels.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let cols = width.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "no data rows".into(),
    })?;
    Ok((DMatrix::from_row_slice(labels.len(), cols - 1, &values), labels))
}

/// Writes features followed by the label as the last column.
pub fn write_csv(path: &Path, x: &DMatrix<f64>, labels: &[f64], header: bool) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if header {
        let mut names: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        names.push("y".into());
        writer.write_record(&names).map_err(|e| csv_error(path, e))?;
    }
    for (i, y) in labels.iter().enumerate() {
        let row: Vec<String> = x
            .row(i)
            .iter()
            .chain(std::iter::once(y))
            .map(|v| v.to_string())
            .collect();
        writer.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}
