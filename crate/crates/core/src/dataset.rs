//! Data ingestion and quantile normalization.
//!
//! Every covariate and exposure column is replaced by its empirical
//! quantile (mid-rank divided by `n`), and the outcome is standardized.
//! The column means of the normalized matrices are the anchors used by
//! the identification step of the model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean, sample_sd, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub x: Matrix,
    pub w: Matrix,
    pub covariate_names: Vec<String>,
    pub exposure_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        x: Matrix,
        w: Matrix,
        covariate_names: Vec<String>,
        exposure_names: Vec<String>,
    ) -> Result<Self> {
        let ds = Self {
            y,
            x,
            w,
            covariate_names,
            exposure_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.w.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        let bad = |m: String| Err(Error::InvalidDataset(m));
        if n < 2 {
            return bad(format!("need at least 2 observations, found {n}"));
        }
        if self.x.nrows() != n || self.w.nrows() != n {
            return bad("row counts of y, X and W differ".into());
        }
        if self.p() == 0 || self.q() == 0 {
            return bad("need at least one covariate and one exposure".into());
        }
        if self.covariate_names.len() != self.p() || self.exposure_names.len() != self.q() {
            return bad("column names do not match matrix widths".into());
        }
        let finite = self.y.iter().all(|v| v.is_finite())
            && self.x.as_slice().iter().all(|v| v.is_finite())
            && self.w.as_slice().iter().all(|v| v.is_finite());
        if !finite {
            return bad("non-finite entries".into());
        }
        Ok(())
    }

    /// Write as CSV with columns `y, covariates..., exposures...`.
    /// Values are printed in shortest round-trip form.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec!["y".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        header.extend(self.exposure_names.iter().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.y[i].to_string()];
            rec.extend(self.x.row(i).iter().map(f64::to_string));
            rec.extend(self.w.row(i).iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Parse a CSV with a header row, selecting columns by name.
pub fn load_csv(
    path: &Path,
    outcome_col: &str,
    covariate_cols: &[String],
    exposure_cols: &[String],
) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_idx = find(outcome_col)?;
    let x_idx = covariate_cols
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let w_idx = exposure_cols
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut y = Vec::new();
    let mut xr = Vec::new();
    let mut wr = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |idx: usize| -> Result<f64> {
            let raw = rec.get(idx).unwrap_or("");
            let column = headers.get(idx).unwrap_or("").to_string();
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan")
            {
                return Err(Error::MissingValue { row: row + 1, column });
            }
            raw.parse::<f64>().map_err(|_| Error::NonNumeric {
                row: row + 1,
                column,
                value: raw.to_string(),
            })
        };
        y.push(cell(y_idx)?);
        xr.push(x_idx.iter().map(|&i| cell(i)).collect::<Result<Vec<_>>>()?);
        wr.push(w_idx.iter().map(|&i| cell(i)).collect::<Result<Vec<_>>>()?);
    }
    let x = if xr.is_empty() {
        Matrix::zeros(0, x_idx.len())
    } else {
        Matrix::from_rows(&xr)
    };
    let w = if wr.is_empty() {
        Matrix::zeros(0, w_idx.len())
    } else {
        Matrix::from_rows(&wr)
    };
    Dataset::new(y, x, w, covariate_cols.to_vec(), exposure_cols.to_vec())
}

/// Monotone piecewise-linear map from raw values to empirical quantiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileMap {
    /// Sorted distinct raw values.
    knots: Vec<f64>,
    /// Quantile of each knot (mid-rank / n).
    levels: Vec<f64>,
}

impl QuantileMap {
    /// Errors when the column has a single distinct value.
    pub fn fit(values: &[f64], name: &str) -> Result<Self> {
        let n = values.len();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut knots = Vec::new();
        let mut levels = Vec::new();
        let mut start = 0;
        while start < n {
            let mut end = start;
            while end + 1 < n && sorted[end + 1] == sorted[start] {
                end += 1;
            }
            // 1-based ranks start+1..=end+1, averaged
            let mid_rank = (start + end + 2) as f64 / 2.0;
            knots.push(sorted[start]);
            levels.push(mid_rank / n as f64);
            start = end + 1;
        }
        if knots.len() < 2 {
            return Err(Error::ConstantColumn(name.to_string()));
        }
        Ok(Self { knots, levels })
    }

    pub fn forward(&self, v: f64) -> f64 {
        interpolate(&self.knots, &self.levels, v)
    }

    pub fn inverse(&self, u: f64) -> f64 {
        interpolate(&self.levels, &self.knots, u)
    }
}

/// Piecewise-linear interpolation through strictly increasing `xs`,
/// clamped to the end values outside the range.
fn interpolate(xs: &[f64], ys: &[f64], v: f64) -> f64 {
    let last = xs.len() - 1;
    if v <= xs[0] {
        return ys[0];
    }
    if v >= xs[last] {
        return ys[last];
    }
    let hi = xs.partition_point(|&k| k <= v);
    let lo = hi - 1;
    if xs[lo] == v {
        return ys[lo];
    }
    let t = (v - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + t * (ys[hi] - ys[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationInfo {
    pub x_maps: Vec<QuantileMap>,
    pub w_maps: Vec<QuantileMap>,
    pub y_center: f64,
    pub y_scale: f64,
    /// Column means of the normalized covariates.
    pub x_anchor: Vec<f64>,
    /// Column means of the normalized exposures.
    pub w_anchor: Vec<f64>,
}

impl NormalizationInfo {
    pub fn normalize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.x_maps).map(|(v, m)| m.forward(*v)).collect()
    }

    pub fn normalize_w(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.w_maps).map(|(v, m)| m.forward(*v)).collect()
    }

    pub fn standardize_y(&self, y: f64) -> f64 {
        (y - self.y_center) / self.y_scale
    }

    pub fn destandardize_y(&self, z: f64) -> f64 {
        z * self.y_scale + self.y_center
    }
}

pub fn normalize(ds: &Dataset) -> Result<(Dataset, NormalizationInfo)> {
    ds.validate()?;
    let fit_maps = |m: &Matrix, names: &[String]| -> Result<Vec<QuantileMap>> {
        (0..m.ncols())
            .map(|j| QuantileMap::fit(&m.column(j), &names[j]))
            .collect()
    };
    let x_maps = fit_maps(&ds.x, &ds.covariate_names)?;
    let w_maps = fit_maps(&ds.w, &ds.exposure_names)?;
    let apply = |m: &Matrix, maps: &[QuantileMap]| -> Matrix {
        let cols: Vec<Vec<f64>> = (0..m.ncols())
            .map(|j| m.column(j).iter().map(|v| maps[j].forward(*v)).collect())
            .collect();
        Matrix::from_columns(&cols)
    };
    let x = apply(&ds.x, &x_maps);
    let w = apply(&ds.w, &w_maps);

    let y_center = mean(&ds.y);
    let y_scale = sample_sd(&ds.y);
    if !(y_scale > 0.0) {
        return Err(Error::ConstantColumn("outcome".into()));
    }
    let y: Vec<f64> = ds.y.iter().map(|v| (v - y_center) / y_scale).collect();

    let x_anchor = (0..x.ncols()).map(|j| mean(&x.column(j))).collect();
    let w_anchor = (0..w.ncols()).map(|j| mean(&w.column(j))).collect();
    let info = NormalizationInfo {
        x_maps,
        w_maps,
        y_center,
        y_scale,
        x_anchor,
        w_anchor,
    };
    let out = Dataset {
        y,
        x,
        w,
        covariate_names: ds.covariate_names.clone(),
        exposure_names: ds.exposure_names.clone(),
    };
    Ok((out, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_col(v: &[f64]) -> Dataset {
        let n = v.len();
        Dataset::new(
            (0..n).map(|i| i as f64).collect(),
            Matrix::from_columns(&[v.to_vec()]),
            Matrix::from_columns(&[v.iter().map(|x| -x).collect()]),
            vec!["x1".into()],
            vec!["w1".into()],
        )
        .unwrap()
    }

    #[test]
    fn quantiles_rank_over_n() {
        let (nd, _) = normalize(&one_col(&[3.0, 1.0, 2.0])).unwrap();
        let c = nd.x.column(0);
        assert_eq!(c, vec![1.0, 1.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn ties_share_a_quantile() {
        let (nd, _) = normalize(&one_col(&[1.0, 1.0, 2.0])).unwrap();
        let c = nd.x.column(0);
        assert_eq!(c[0], c[1]);
        assert_eq!(c, vec![0.5, 0.5, 1.0]);
    }

    #[test]
    fn outcome_is_centered_and_scaled() {
        let ds = Dataset::new(
            vec![0.0, 2.0],
            Matrix::from_columns(&[vec![1.0, 2.0]]),
            Matrix::from_columns(&[vec![1.0, 2.0]]),
            vec!["x".into()],
            vec!["w".into()],
        )
        .unwrap();
        let (nd, info) = normalize(&ds).unwrap();
        let a = 1.0 / 2f64.sqrt();
        assert!((nd.y[0] + a).abs() < 1e-15 && (nd.y[1] - a).abs() < 1e-15);
        assert_eq!(nd.y[0] + nd.y[1], 0.0);
        assert!((info.destandardize_y(nd.y[1]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_is_named() {
        let err = normalize(&one_col(&[1.0, 1.0, 1.0])).unwrap_err();
        assert!(err.to_string().contains("x1"), "{err}");
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "y,x1,w1\n1,2,3\n2,3,4\n3,1,1\n").unwrap();
        let ds = load_csv(&p, "y", &["x1".into()], &["w1".into()]).unwrap();
        assert_eq!((ds.n(), ds.p(), ds.q()), (3, 1, 1));
        assert_eq!(ds.w.column(0), vec![3.0, 4.0, 1.0]);

        let err = load_csv(&p, "y", &["x1".into()], &["w2".into()]).unwrap_err();
        assert!(matches!(&err, Error::MissingColumn(c) if c == "w2"));

        std::fs::write(&p, "y,x1,w1\n1,2,3\n2,abc,4\n").unwrap();
        let err = load_csv(&p, "y", &["x1".into()], &["w1".into()]).unwrap_err();
        assert!(matches!(err, Error::NonNumeric { row: 2, .. }), "{err}");

        std::fs::write(&p, "y,x1,w1\n1,2,3\n2,,4\n").unwrap();
        let err = load_csv(&p, "y", &["x1".into()], &["w1".into()]).unwrap_err();
        assert!(matches!(err, Error::MissingValue { row: 2, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_invertible(
            vals in proptest::collection::vec(-50i32..50, 3..40)
        ) {
            let v: Vec<f64> = vals.iter().map(|&k| k as f64 * 0.37).collect();
            prop_assume!(v.iter().any(|x| *x != v[0]));
            let ds = one_col(&v);
            let (once, info) = normalize(&ds).unwrap();
            let (twice, _) = normalize(&once).unwrap();
            prop_assert_eq!(&once.x, &twice.x);
            for (raw, u) in v.iter().zip(once.x.column(0)) {
                prop_assert!((0.0..=1.0).contains(&u));
                prop_assert!((info.x_maps[0].inverse(u) - raw).abs() < 1e-12);
            }
            let m = mean(&once.x.column(0));
            prop_assert!((m - info.x_anchor[0]).abs() <= 1e-15);
            for (z, y) in once.y.iter().zip(&ds.y) {
                prop_assert!((info.destandardize_y(*z) - y).abs() < 1e-12);
            }
            // monotone
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            let f: Vec<f64> = sorted.iter().map(|x| info.x_maps[0].forward(*x)).collect();
            prop_assert!(f.windows(2).all(|p| p[0] <= p[1]));
        }
    }
}
