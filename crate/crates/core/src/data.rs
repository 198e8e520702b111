//! Datasets, synthetic generators, CSV ingestion, fold splitting and
//! standardization.

use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::Mlp;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("matrix storage", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("matrix row", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Paired features `x` (n × d) and responses `y` (n × k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    #[serde(default)]
    pub feature_names: Option<Vec<String>>,
    #[serde(default)]
    pub target_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        check_dim("dataset rows", x.rows(), y.rows())?;
        if x.as_slice().iter().chain(y.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("dataset contains non-finite entries".into()));
        }
        Ok(Self {
            x,
            y,
            feature_names: None,
            target_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            y: self.y.select_rows(indices),
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
        }
    }

    /// Writes features then targets as CSV with a header row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::Csv {
            path: path.to_owned(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let features = self
            .feature_names
            .clone()
            .unwrap_or_else(|| (0..self.input_dim()).map(|j| format!("x{j}")).collect());
        let targets = self
            .target_names
            .clone()
            .unwrap_or_else(|| (0..self.output_dim()).map(|j| format!("y{j}")).collect());
        w.write_record(features.iter().chain(&targets)).map_err(csv_err)?;
        for i in 0..self.len() {
            // `{:?}` on f64 prints the shortest string that parses back to the same bits.
            let cells = self.x.row(i).iter().chain(self.y.row(i)).map(|v| format!("{v:?}"));
            w.write_record(cells).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a CSV with one header row; `target_columns` name the response columns
/// and every other column becomes a feature.
pub fn load_csv(path: impl AsRef<Path>, target_columns: &[&str]) -> Result<Dataset> {
    let path = path.as_ref();
    if target_columns.is_empty() {
        return Err(Error::Empty("target column set"));
    }
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_owned(),
        message: e.to_string(),
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_owned()).collect();

    let mut target_idx = Vec::with_capacity(target_columns.len());
    for &t in target_columns {
        let idx = header.iter().position(|h| h == t).ok_or_else(|| Error::Csv {
            path: path.to_owned(),
            message: format!("target column '{t}' not found in header {header:?}"),
        })?;
        target_idx.push(idx);
    }
    let feature_idx: Vec<usize> = (0..header.len()).filter(|j| !target_idx.contains(j)).collect();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        // Data rows are numbered from 1; the header is row 0.
        let parse = |j: usize| -> Result<f64> {
            let raw = record.get(j).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::ParseCell {
                    path: path.to_owned(),
                    row: r + 1,
                    column: header[j].clone(),
                    value: raw.to_owned(),
                })
        };
        for &j in &feature_idx {
            xs.push(parse(j)?);
        }
        for &j in &target_idx {
            ys.push(parse(j)?);
        }
        rows += 1;
    }
    let mut ds = Dataset::new(
        Matrix::new(rows, feature_idx.len(), xs)?,
        Matrix::new(rows, target_idx.len(), ys)?,
    )?;
    ds.feature_names = Some(feature_idx.iter().map(|&j| header[j].clone()).collect());
    ds.target_names = Some(target_idx.iter().map(|&j| header[j].clone()).collect());
    Ok(ds)
}

const MULTIDIM_INPUT: usize = 100;
const MULTIDIM_OUTPUT: usize = 10;

/// `Y = W X + eps` with `X ~ U[0,1]^100`, `Y in R^10`, `W_ij ~ N(0, 1/100)`
/// drawn once from the seed, and standard normal noise.
pub fn gen_synthetic_multidim(seed: u64, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("synthetic sample count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (MULTIDIM_INPUT as f64).sqrt();
    let w: Vec<f64> = (0..MULTIDIM_OUTPUT * MULTIDIM_INPUT)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let mut x = Matrix::zeros(n, MULTIDIM_INPUT);
    let mut y = Matrix::zeros(n, MULTIDIM_OUTPUT);
    for i in 0..n {
        for v in x.row_mut(i) {
            *v = unit.sample(&mut rng);
        }
        for j in 0..MULTIDIM_OUTPUT {
            let wx = crate::nn::dot(&w[j * MULTIDIM_INPUT..(j + 1) * MULTIDIM_INPUT], x.row(i));
            let eps: f64 = StandardNormal.sample(&mut rng);
            y.row_mut(i)[j] = wx + eps;
        }
    }
    Dataset::new(x, y)
}

/// Mean function of [`gen_synthetic_1d_hetero`].
pub fn hetero_mean(x: f64) -> f64 {
    x * x.sin()
}

/// Noise standard deviation of [`gen_synthetic_1d_hetero`] at `x`.
pub fn hetero_std(x: f64) -> f64 {
    0.1 + 0.2 * x
}

/// `x ~ U[0, 5]`, `y = x sin(x) + (0.1 + 0.2 x) eps`.
pub fn gen_synthetic_1d_hetero(seed: u64, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("synthetic sample count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(0.0, 5.0).expect("valid range");
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = dist.sample(&mut rng);
        let eps: f64 = StandardNormal.sample(&mut rng);
        xs.push(x);
        ys.push(hetero_mean(x) + hetero_std(x) * eps);
    }
    Dataset::new(Matrix::new(n, 1, xs)?, Matrix::new(n, 1, ys)?)
}

/// `x ~ U[0,1]^d` and `y = oracle(x)` exactly with probability `p_exact`,
/// otherwise `oracle(x)` plus standard normal noise in every output.
pub fn gen_oracle_mixture(oracle: &Mlp, seed: u64, n: usize, p_exact: f64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("synthetic sample count"));
    }
    if !(0.0..=1.0).contains(&p_exact) {
        return Err(Error::InvalidConfig(format!("exact fraction {p_exact} outside [0, 1]")));
    }
    let (d, k) = (oracle.spec().input_dim(), oracle.spec().output_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let mut x = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, k);
    for i in 0..n {
        x.row_mut(i).iter_mut().for_each(|v| *v = unit.sample(&mut rng));
        let clean = unit.sample(&mut rng) < p_exact;
        let out = oracle.forward(x.row(i))?;
        for (t, o) in y.row_mut(i).iter_mut().zip(out) {
            let eps: f64 = if clean { 0.0 } else { StandardNormal.sample(&mut rng) };
            *t = o + eps;
        }
    }
    Dataset::new(x, y)
}

/// Disjoint train / calibration / test index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation of `0..n` cut by cumulative `ratios` (train, cal, test).
///
/// Boundaries are `round(n * cumsum / total)`, so every fold size is within
/// one of its exact share.
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::InvalidConfig(format!("split ratios must be positive, got {ratios:?}")));
    }
    if n < ratios.len() {
        return Err(Error::InvalidConfig(format!("cannot split {n} rows into {} folds", ratios.len())));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total: f64 = ratios.iter().sum();
    let mut bounds = [0usize; 4];
    let mut acc = 0.0;
    for (k, r) in ratios.iter().enumerate() {
        acc += r;
        bounds[k + 1] = ((n as f64) * acc / total).round() as usize;
    }
    bounds[3] = n;
    // Keep every fold nonempty; n >= 3 makes this always possible.
    for k in 1..3 {
        bounds[k] = bounds[k].max(bounds[k - 1] + 1).min(n - (3 - k));
    }
    Ok(SplitIndices {
        train: perm[bounds[0]..bounds[1]].to_vec(),
        cal: perm[bounds[1]..bounds[2]].to_vec(),
        test: perm[bounds[2]..bounds[3]].to_vec(),
    })
}

/// Per-column affine standardization fitted on a subset of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizerState {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn column_stats(m: &Matrix, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    (0..m.cols())
        .map(|j| {
            let mean = rows.iter().map(|&i| m.row(i)[j]).sum::<f64>() / n;
            let var = rows.iter().map(|&i| (m.row(i)[j] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            // Zero-variance columns pass through unscaled.
            if std > 0.0 && std.is_finite() {
                (mean, std)
            } else {
                (0.0, 1.0)
            }
        })
        .unzip()
}

fn apply_affine(m: &Matrix, mean: &[f64], std: &[f64], inverse: bool) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = if inverse { *v * std[j] + mean[j] } else { (*v - mean[j]) / std[j] };
        }
    }
    out
}

impl StandardizerState {
    pub fn transform(&self, ds: &Dataset) -> Dataset {
        Dataset {
            x: apply_affine(&ds.x, &self.x_mean, &self.x_std, false),
            y: apply_affine(&ds.y, &self.y_mean, &self.y_std, false),
            feature_names: ds.feature_names.clone(),
            target_names: ds.target_names.clone(),
        }
    }

    pub fn inverse(&self, ds: &Dataset) -> Dataset {
        Dataset {
            x: apply_affine(&ds.x, &self.x_mean, &self.x_std, true),
            y: apply_affine(&ds.y, &self.y_mean, &self.y_std, true),
            feature_names: ds.feature_names.clone(),
            target_names: ds.target_names.clone(),
        }
    }
}

/// Fits column statistics on `fit_indices` only and applies them to every row.
pub fn standardize(ds: &Dataset, fit_indices: &[usize]) -> Result<(Dataset, StandardizerState)> {
    if fit_indices.is_empty() {
        return Err(Error::Empty("standardization fit indices"));
    }
    let (x_mean, x_std) = column_stats(&ds.x, fit_indices);
    let (y_mean, y_std) = column_stats(&ds.y, fit_indices);
    let state = StandardizerState {
        x_mean,
        x_std,
        y_mean,
        y_std,
    };
    Ok((state.transform(ds), state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_synthetic_multidim(3, 3).unwrap(), gen_synthetic_multidim(3, 3).unwrap());
        assert_eq!(gen_synthetic_1d_hetero(3, 3).unwrap(), gen_synthetic_1d_hetero(3, 3).unwrap());
        assert_ne!(gen_synthetic_1d_hetero(3, 3).unwrap(), gen_synthetic_1d_hetero(4, 3).unwrap());
        assert!(gen_synthetic_multidim(0, 0).is_err());
    }

    #[test]
    fn hetero_mean_vanishes_at_zero() {
        assert_eq!(hetero_mean(0.0), 0.0);
        assert!((hetero_std(0.0) - 0.1).abs() < 1e-15);
        assert!((hetero_std(5.0) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn split_sizes() {
        let s = split(5, [2.0, 2.0, 1.0], 0).unwrap();
        assert_eq!((s.train.len(), s.cal.len(), s.test.len()), (2, 2, 1));
        let s = split(10, [2.0, 2.0, 1.0], 0).unwrap();
        assert_eq!((s.train.len(), s.cal.len(), s.test.len()), (4, 4, 2));
        assert!(split(2, [2.0, 2.0, 1.0], 0).is_err());
        assert!(split(10, [2.0, 0.0, 1.0], 0).is_err());
    }

    #[test]
    fn split_covers_and_is_disjoint() {
        for n in 3..60 {
            for seed in 0..4 {
                let s = split(n, [2.0, 2.0, 1.0], seed).unwrap();
                let all: BTreeSet<usize> = s.train.iter().chain(&s.cal).chain(&s.test).copied().collect();
                assert_eq!(all.len(), n);
                assert_eq!(all, (0..n).collect());
                assert!(!s.train.is_empty() && !s.cal.is_empty() && !s.test.is_empty());
                for (len, share) in [(s.train.len(), 0.4), (s.cal.len(), 0.4), (s.test.len(), 0.2)] {
                    assert!((len as f64 - share * n as f64).abs() < 1.0 + 1e-9, "n={n} len={len}");
                }
            }
        }
    }

    #[test]
    fn standardize_constant_column_passes_through() {
        let x = Matrix::from_rows(&[vec![1.0, 4.0], vec![1.0, 6.0], vec![1.0, 8.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let ds = Dataset::new(x, y).unwrap();
        let (t, state) = standardize(&ds, &[0, 1, 2]).unwrap();
        assert_eq!(t.x.column(0), vec![1.0, 1.0, 1.0]);
        assert_eq!(state.x_std[0], 1.0);
    }

    #[test]
    fn standardize_fits_on_given_rows_only() {
        let ds = gen_synthetic_1d_hetero(1, 50).unwrap();
        let train: Vec<usize> = (0..20).collect();
        let all: Vec<usize> = (0..50).collect();
        let (t, s_train) = standardize(&ds, &train).unwrap();
        let (_, s_all) = standardize(&ds, &all).unwrap();
        assert_ne!(s_train, s_all);
        let col = t.subset(&train).x.column(0);
        let mean = col.iter().sum::<f64>() / 20.0;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-12);
        let back = s_train.inverse(&t);
        for (a, b) in back.x.as_slice().iter().zip(ds.x.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in back.y.as_slice().iter().zip(ds.y.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(standardize(&ds, &[]).is_err());
    }

    #[test]
    fn csv_small_file_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "a,b,t\n1,2,3\n4,5,6\n7,8,9\n").unwrap();
        let ds = load_csv(&path, &["t"]).unwrap();
        assert_eq!((ds.x.rows(), ds.x.cols(), ds.y.cols()), (3, 2, 1));
        assert_eq!(ds.x.row(1), &[4.0, 5.0]);
        assert_eq!(ds.y.column(0), vec![3.0, 6.0, 9.0]);

        std::fs::write(&path, "a,b,t\n1,2,3\n4,NaN,6\n").unwrap();
        match load_csv(&path, &["t"]) {
            Err(Error::ParseCell { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(load_csv(&path, &[]), Err(Error::Empty(_))));
        assert!(load_csv(&path, &["missing"]).is_err());
        assert!(load_csv(dir.path().join("nope.csv"), &["t"]).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let ds = gen_synthetic_multidim(9, 17).unwrap();
        ds.write_csv(&path).unwrap();
        let targets: Vec<String> = (0..10).map(|j| format!("y{j}")).collect();
        let refs: Vec<&str> = targets.iter().map(String::as_str).collect();
        let back = load_csv(&path, &refs).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }
}
