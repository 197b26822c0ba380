//! Offline datasets and per-dimension standardization.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Smallest standard deviation used when dividing; constant columns map to 0.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-dimension affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation of each column.
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Empty("standardization sample"));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
        Ok(Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        ensure_dim(self.dim(), x.len())?;
        Ok(Array1::from_shape_fn(x.len(), |j| (x[j] - self.mean[j]) / self.std[j]))
    }

    pub fn destandardize(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        ensure_dim(self.dim(), z.len())?;
        Ok(Array1::from_shape_fn(z.len(), |j| z[j] * self.std[j] + self.mean[j]))
    }

    pub fn standardize_rows(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure_dim(self.dim(), x.ncols())?;
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }

    pub fn destandardize_rows(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure_dim(self.dim(), z.ncols())?;
        let mut out = z.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        Ok(out)
    }
}

/// Mean and standard deviation of the scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub std: f64,
}

/// Frozen `(design, score)` pairs: the only ground truth optimizers see.
///
/// `raw` holds designs in design space (for sequences, symbol indices stored
/// as floats); `designs` holds the same designs in the standardized
/// optimization space.
#[derive(Debug, Clone)]
pub struct OfflineDataset {
    raw: Array2<f64>,
    designs: Array2<f64>,
    scores: Array1<f64>,
    design_stats: Standardizer,
    score_stats: ScoreStats,
}

impl OfflineDataset {
    /// Builds a dataset from raw designs, their pre-standardization features
    /// and scores. Statistics are computed on the given rows.
    pub fn new(raw: Array2<f64>, features: Array2<f64>, scores: Array1<f64>) -> Result<Self> {
        let n = scores.len();
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        ensure_dim(n, raw.nrows())?;
        ensure_dim(n, features.nrows())?;
        if !scores.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset scores"));
        }
        let design_stats = Standardizer::fit(features.view())?;
        let designs = design_stats.standardize_rows(features.view())?;
        let score_stats = ScoreStats {
            mean: scores.mean().unwrap(),
            std: scores.std(0.0).max(STD_FLOOR),
        };
        Ok(Self {
            raw,
            designs,
            scores,
            design_stats,
            score_stats,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.designs.ncols()
    }

    /// Designs in optimization space.
    pub fn designs(&self) -> ArrayView2<'_, f64> {
        self.designs.view()
    }

    /// Designs in design space.
    pub fn raw_designs(&self) -> ArrayView2<'_, f64> {
        self.raw.view()
    }

    pub fn scores(&self) -> ArrayView1<'_, f64> {
        self.scores.view()
    }

    pub fn standardized_scores(&self) -> Array1<f64> {
        self.scores
            .mapv(|y| (y - self.score_stats.mean) / self.score_stats.std)
    }

    pub fn design_stats(&self) -> &Standardizer {
        &self.design_stats
    }

    pub fn score_stats(&self) -> ScoreStats {
        self.score_stats
    }

    pub fn best_score(&self) -> f64 {
        self.scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// Indices of the `k` highest-scoring rows, best first; ties keep row order.
    pub fn top_k_indices(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    /// Writes `<stem>.csv` (raw design columns then `score`) and `<stem>.stats.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        let mut header: Vec<String> = (0..self.raw.ncols()).map(|j| format!("x{j}")).collect();
        header.push("score".into());
        w.write_record(&header)?;
        for (row, y) in self.raw.rows().into_iter().zip(&self.scores) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        #[derive(Serialize)]
        struct Sidecar<'a> {
            n: usize,
            design_stats: &'a Standardizer,
            score_stats: ScoreStats,
        }
        let sidecar = Sidecar {
            n: self.len(),
            design_stats: &self.design_stats,
            score_stats: self.score_stats,
        };
        std::fs::write(
            dir.join(format!("{stem}.stats.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn standardizing_the_mean_gives_zero() {
        let x = array![[1.0, 10.0], [3.0, 30.0], [5.0, 20.0]];
        let s = Standardizer::fit(x.view()).unwrap();
        let z = s.standardize(Array1::from(s.mean.clone()).view()).unwrap();
        assert_eq!(z.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn standardized_columns_have_unit_moments() {
        let x = array![[1.0, 10.0], [3.0, 30.0], [5.0, 20.0], [-2.0, 0.5]];
        let s = Standardizer::fit(x.view()).unwrap();
        let z = s.standardize_rows(x.view()).unwrap();
        for col in z.columns() {
            assert!(col.mean().unwrap().abs() < 1e-9);
            assert!((col.std(0.0) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_column_uses_floor() {
        let x = array![[2.0], [2.0]];
        let s = Standardizer::fit(x.view()).unwrap();
        assert_eq!(s.std, vec![STD_FLOOR]);
        assert_eq!(s.standardize(array![2.0].view()).unwrap()[0], 0.0);
    }

    #[test]
    fn top_k_orders_by_score_then_row() {
        let raw = array![[0.0], [1.0], [2.0], [3.0]];
        let ds = OfflineDataset::new(raw.clone(), raw, array![1.0, 5.0, 5.0, 2.0]).unwrap();
        assert_eq!(ds.top_k_indices(3), vec![1, 2, 3]);
        assert_eq!(ds.best_score(), 5.0);
    }

    #[test]
    fn empty_and_non_finite_datasets_are_rejected() {
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(OfflineDataset::new(empty.clone(), empty, Array1::zeros(0)).is_err());
        let raw = array![[0.0], [1.0]];
        assert!(OfflineDataset::new(raw.clone(), raw, array![0.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact_to_1e12(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..20),
            probe in prop::collection::vec(-1e3f64..1e3, 3),
        ) {
            let n = rows.len();
            let x = Array2::from_shape_vec((n, 3), rows.concat()).unwrap();
            let s = Standardizer::fit(x.view()).unwrap();
            let p = Array1::from(probe);
            let back = s.destandardize(s.standardize(p.view()).unwrap().view()).unwrap();
            for (a, b) in back.iter().zip(p.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
