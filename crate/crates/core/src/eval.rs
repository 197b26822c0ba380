//! Post-run scoring. The only place the oracle is queried.
//!
//! Records are ranked by their stored objective value, highest first, ties
//! going to the earlier record. Percentile picks read the same order
//! reversed, so the 100th percentile is the top-1 pick.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizers::{Record, Trajectory};
use crate::tasks::Task;

/// Record order by stored value, best first.
fn ranked(traj: &Trajectory) -> Vec<&Record> {
    let mut recs: Vec<&Record> = traj.records.iter().collect();
    // Stable sort keeps record order among ties.
    recs.sort_by(|a, b| b.y_penalized.total_cmp(&a.y_penalized));
    recs
}

/// The `k` records with the highest stored values.
pub fn select_top_k(traj: &Trajectory, k: usize) -> Result<Vec<&Record>> {
    if k == 0 || k > traj.len() {
        return Err(Error::InvalidParameter(format!(
            "k = {k} outside 1..={}",
            traj.len()
        )));
    }
    let mut recs = ranked(traj);
    recs.truncate(k);
    Ok(recs)
}

/// Decodes each optimization-space design and returns the best oracle value.
pub fn oracle_eval<'a, I>(task: &Task, designs: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut best = f64::NEG_INFINITY;
    let mut any = false;
    for z in designs {
        let raw = task.decode(ArrayView1::from(z))?;
        best = best.max(task.oracle(raw.view())?);
        any = true;
    }
    if any {
        Ok(best)
    } else {
        Err(Error::Empty("designs"))
    }
}

/// Oracle values of every record, in record order.
pub fn oracle_values(task: &Task, traj: &Trajectory) -> Result<Vec<f64>> {
    traj.records
        .iter()
        .map(|r| task.oracle(task.decode(ArrayView1::from(&r.z[..]))?.view()))
        .collect()
}

/// Oracle value of the `k` best records.
pub fn top_k_oracle(task: &Task, traj: &Trajectory, k: usize) -> Result<f64> {
    oracle_eval(task, select_top_k(traj, k)?.into_iter().map(|r| &r.z[..]))
}

/// Oracle value of the record at ascending rank `floor(pct / 100 * (N - 1))`.
pub fn percentile_design_eval(traj: &Trajectory, task: &Task, pct: f64) -> Result<f64> {
    if traj.is_empty() || !(0.0..=100.0).contains(&pct) {
        return Err(Error::InvalidParameter(format!("percentile {pct} of {} records", traj.len())));
    }
    let mut asc = ranked(traj);
    asc.reverse();
    let idx = (pct / 100.0 * (asc.len() - 1) as f64).floor() as usize;
    oracle_eval(task, [&asc[idx].z[..]])
}

fn centered_distances(x: &[f64]) -> Array2<f64> {
    let n = x.len();
    let mut d = Array2::from_shape_fn((n, n), |(i, j)| (x[i] - x[j]).abs());
    let rows = d.sum_axis(ndarray::Axis(1)) / n as f64;
    let grand = rows.sum() / n as f64;
    for i in 0..n {
        for j in 0..n {
            d[[i, j]] += grand - rows[i] - rows[j];
        }
    }
    d
}

/// Empirical distance covariance of two paired samples.
pub fn distance_covariance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.len() < 2 {
        return Err(Error::InvalidParameter("distance covariance needs n >= 2".into()));
    }
    let n = a.len() as f64;
    let (ca, cb) = (centered_distances(a), centered_distances(b));
    let sq = (&ca * &cb).sum() / (n * n);
    Ok(sq.max(0.0).sqrt())
}

/// Top-k oracle value for each `k` in `ks` (ascending, each at most the
/// number of records).
pub fn budget_curve(traj: &Trajectory, task: &Task, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if ks.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter("budget ks must be ascending".into()));
    }
    ks.iter().map(|&k| Ok((k, top_k_oracle(task, traj, k)?))).collect()
}

/// `1, 2, 4, ...` up to and including `n`.
pub fn doubling_ks(n: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = std::iter::successors(Some(1usize), |k| k.checked_mul(2))
        .take_while(|&k| k < n)
        .collect();
    ks.push(n);
    ks
}

/// Headline numbers for one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub top1: f64,
    pub top128: f64,
    pub p90: f64,
}

pub fn score_trajectory(task: &Task, traj: &Trajectory) -> Result<Scores> {
    let k = 128.min(traj.len());
    Ok(Scores {
        top1: top_k_oracle(task, traj, 1)?,
        top128: top_k_oracle(task, traj, k)?,
        p90: percentile_design_eval(traj, task, 90.0)?,
    })
}

/// Distance covariance between stored values and oracle values over every
/// record.
pub fn trajectory_dcov(task: &Task, traj: &Trajectory) -> Result<f64> {
    let y: Vec<f64> = traj.records.iter().map(|r| r.y_penalized).collect();
    distance_covariance(&y, &oracle_values(task, traj)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// One row of `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub top1: f64,
    pub top128: f64,
    pub p90: f64,
}

/// Aggregate over seeds for one (method, task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub task: String,
    pub seeds: usize,
    pub top1: MeanStd,
    pub top128: MeanStd,
    pub p90: MeanStd,
}

/// Groups rows by (method, task) in first-appearance order.
pub fn aggregate(rows: &[ScoreRow]) -> Vec<EvalReport> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.task.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, task)| {
            let group: Vec<&ScoreRow> = rows.iter().filter(|r| r.method == method && r.task == task).collect();
            let col = |f: fn(&ScoreRow) -> f64| MeanStd::of(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            EvalReport {
                seeds: group.len(),
                top1: col(|r| r.top1),
                top128: col(|r| r.top128),
                p90: col(|r| r.p90),
                method,
                task,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub tasks: Vec<String>,
    /// `ranks[m][t]`, `NaN` when the method did not run on the task.
    pub ranks: Vec<Vec<f64>>,
    /// Mean over the tasks each method ran on.
    pub average: Vec<f64>,
}

/// Ranks methods per task by mean top-1 score (1 = best, ties share the mean
/// of their ranks) and averages across tasks.
pub fn rank_table(reports: &[EvalReport]) -> Result<RankTable> {
    let methods: Vec<String> = reports
        .iter()
        .map(|r| r.method.clone())
        .fold(Vec::new(), |mut v, m| {
            if !v.contains(&m) {
                v.push(m);
            }
            v
        });
    if methods.len() < 2 {
        return Err(Error::InvalidParameter("ranking needs at least two methods".into()));
    }
    let tasks: Vec<String> = reports.iter().map(|r| r.task.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut ranks = vec![vec![f64::NAN; tasks.len()]; methods.len()];
    for (t, task) in tasks.iter().enumerate() {
        let entries: Vec<(usize, f64)> = reports
            .iter()
            .filter(|r| &r.task == task)
            .map(|r| (methods.iter().position(|m| m == &r.method).unwrap(), r.top1.mean))
            .collect();
        for &(m, score) in &entries {
            let better = entries.iter().filter(|e| e.1 > score).count() as f64;
            let tied = entries.iter().filter(|e| e.1 == score).count() as f64;
            ranks[m][t] = better + (tied + 1.0) / 2.0;
        }
    }
    let average = ranks
        .iter()
        .map(|row| {
            let seen: Vec<f64> = row.iter().copied().filter(|v| !v.is_nan()).collect();
            seen.iter().sum::<f64>() / seen.len() as f64
        })
        .collect();
    Ok(RankTable { methods, tasks, ranks, average })
}

impl RankTable {
    /// Columns: `method`, one per task, `average_rank`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["method".to_string()];
        header.extend(self.tasks.iter().cloned());
        header.push("average_rank".into());
        w.write_record(&header)?;
        for (m, method) in self.methods.iter().enumerate() {
            let mut row = vec![method.clone()];
            row.extend(self.ranks[m].iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
            row.push(self.average[m].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Columns: `k`, `score`.
pub fn write_curve_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "score"])?;
    for (k, s) in curve {
        w.write_record([k.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcovRow {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub dcov: f64,
}

pub fn write_dcov_csv(path: &Path, rows: &[DcovRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizers::{AlphaMode, OptimizerKind};
    use crate::tasks::{BRANIN_OPTIMUM, TaskName};
    use proptest::prelude::*;

    fn trajectory(ys: &[f64], zs: Vec<Vec<f64>>) -> Trajectory {
        Trajectory {
            optimizer: OptimizerKind::Gabo,
            alpha_mode: AlphaMode::Adaptive,
            iterations: 1,
            batch_size: ys.len(),
            records: ys
                .iter()
                .zip(zs)
                .enumerate()
                .map(|(i, (&y, z))| Record { iteration: 1, index: i, z, y_penalized: y, alpha_at_eval: 0.5 })
                .collect(),
            critic_events: vec![],
            alpha_history: vec![],
            surrogate_queries: ys.len(),
            gradient_evaluations: 0,
            probe_evaluations: 0,
        }
    }

    fn tagged(ys: &[f64]) -> Trajectory {
        trajectory(ys, (0..ys.len()).map(|i| vec![i as f64]).collect())
    }

    fn branin_task() -> Task {
        Task::branin(200, 0).unwrap()
    }

    fn encode(task: &Task, x: [f64; 2]) -> Vec<f64> {
        task.encode(ndarray::aview1(&x)).unwrap().to_vec()
    }

    #[test]
    fn top_k_follows_stored_values() {
        let t = tagged(&[3.0, 1.0, 2.0]);
        let picked: Vec<f64> = select_top_k(&t, 2).unwrap().iter().map(|r| r.y_penalized).collect();
        assert_eq!(picked, vec![3.0, 2.0]);
        assert_eq!(select_top_k(&t, 3).unwrap().len(), 3);
        assert_eq!(select_top_k(&t, 1).unwrap()[0].z, vec![0.0]);
        assert!(select_top_k(&t, 0).is_err());
        assert!(select_top_k(&t, 4).is_err());
    }

    #[test]
    fn ties_go_to_earlier_records() {
        let t = tagged(&[1.0, 5.0, 5.0, 5.0]);
        let picked: Vec<f64> = select_top_k(&t, 2).unwrap().iter().map(|r| r.z[0]).collect();
        assert_eq!(picked, vec![1.0, 2.0]);
    }

    #[test]
    fn oracle_eval_at_both_optima() {
        let task = branin_task();
        let a = encode(&task, [-std::f64::consts::PI, 12.275]);
        let b = encode(&task, [std::f64::consts::PI, 2.275]);
        let v = oracle_eval(&task, [&a[..], &b[..]]).unwrap();
        assert!((v - BRANIN_OPTIMUM).abs() < 1e-5);
        let dup = oracle_eval(&task, [&a[..], &a[..]]).unwrap();
        assert_eq!(dup, oracle_eval(&task, [&a[..]]).unwrap());
    }

    #[test]
    fn percentile_index_arithmetic() {
        let task = branin_task();
        // Scores 0..10 with designs whose oracle values are distinguishable.
        let zs: Vec<Vec<f64>> = (0..11).map(|i| encode(&task, [-5.0 + i as f64, 5.0])).collect();
        let ys: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let t = trajectory(&ys, zs.clone());
        let p90 = percentile_design_eval(&t, &task, 90.0).unwrap();
        assert_eq!(p90, oracle_eval(&task, [&zs[9][..]]).unwrap());
        let p100 = percentile_design_eval(&t, &task, 100.0).unwrap();
        assert_eq!(p100, top_k_oracle(&task, &t, 1).unwrap());

        let flat = trajectory(&[0.0; 11], zs.clone());
        assert_eq!(
            percentile_design_eval(&flat, &task, 100.0).unwrap(),
            oracle_eval(&task, [&zs[0][..]]).unwrap()
        );
    }

    /// Direct double centering with explicit loops.
    fn dcov_reference(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let center = |x: &[f64]| {
            let d: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (x[i] - x[j]).abs()).collect()).collect();
            let row: Vec<f64> = d.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
            let col: Vec<f64> = (0..n).map(|j| d.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
            let all = row.iter().sum::<f64>() / n as f64;
            (0..n)
                .map(|i| (0..n).map(|j| d[i][j] - row[i] - col[j] + all).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        let (ca, cb) = (center(a), center(b));
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += ca[i][j] * cb[i][j];
            }
        }
        (s / (n * n) as f64).max(0.0).sqrt()
    }

    #[test]
    fn dcov_hand_example() {
        let a = [0.0, 1.0, 2.0];
        let b = [0.0, 2.0, 4.0];
        let self_cov = dcov_reference(&a, &a);
        assert!(self_cov > 0.0);
        // The squared statistic is bilinear in the distance matrices, so
        // doubling one argument scales the reported root by sqrt(2).
        assert!((distance_covariance(&a, &b).unwrap() - 2f64.sqrt() * self_cov).abs() < 1e-12);
        assert!((distance_covariance(&b, &b).unwrap() - 2.0 * self_cov).abs() < 1e-12);
        assert!((distance_covariance(&a, &a).unwrap() - self_cov).abs() < 1e-12);
        assert_eq!(distance_covariance(&a, &[3.0; 3]).unwrap(), 0.0);
        assert!(distance_covariance(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn dcov_properties(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..20),
            shift in -5.0f64..5.0,
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let ab = distance_covariance(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - distance_covariance(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!((ab - dcov_reference(&a, &b)).abs() < 1e-9);
            let shifted: Vec<f64> = a.iter().map(|v| v + shift).collect();
            prop_assert!((ab - distance_covariance(&shifted, &b).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn curve_is_monotone(ys in prop::collection::vec(-5.0f64..5.0, 2..40)) {
            let task = branin_task();
            let zs: Vec<Vec<f64>> = ys.iter().map(|&y| vec![y * 0.3, -y * 0.2]).collect();
            let t = trajectory(&ys, zs);
            let ks = doubling_ks(ys.len());
            let curve = budget_curve(&t, &task, &ks).unwrap();
            prop_assert!(curve.windows(2).all(|w| w[1].1 >= w[0].1));
            let all = oracle_values(&task, &t).unwrap().into_iter().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(curve.last().unwrap().1, all);
            // Containment: the top-1 pick is among any larger selection.
            prop_assert!(curve.iter().all(|c| c.1 >= curve[0].1));
        }
    }

    #[test]
    fn curve_reproduces_headline_metrics() {
        let task = branin_task();
        let ys: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64).collect();
        let zs: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 * 0.7).sin() * 2.0, (i as f64 * 1.3).cos()]).collect();
        let t = trajectory(&ys, zs);
        let curve = budget_curve(&t, &task, &[1, 128]).unwrap();
        let s = score_trajectory(&task, &t).unwrap();
        assert_eq!((curve[0].1, curve[1].1), (s.top1, s.top128));
        assert!(budget_curve(&t, &task, &[4, 2]).is_err());
    }

    fn report(method: &str, task: &str, mean: f64) -> EvalReport {
        let ms = MeanStd { mean, std: 0.0 };
        EvalReport { method: method.into(), task: task.into(), seeds: 1, top1: ms, top128: ms, p90: ms }
    }

    #[test]
    fn ranks_dominating_and_tied() {
        let t = rank_table(&[report("a", "x", 2.0), report("b", "x", 1.0), report("a", "y", 5.0), report("b", "y", 3.0)])
            .unwrap();
        assert_eq!(t.average, vec![1.0, 2.0]);
        let tie = rank_table(&[report("a", "x", 1.0), report("b", "x", 1.0)]).unwrap();
        assert_eq!(tie.ranks, vec![vec![1.5], vec![1.5]]);
        assert!(rank_table(&[report("a", "x", 1.0)]).is_err());
    }

    #[test]
    fn ranks_three_methods_by_hand() {
        // x: a=3 b=2 c=1 -> 1,2,3; y: a=0 b=4 c=4 -> 3,1.5,1.5; z: a=1 b=1 c=1 -> 2,2,2.
        let reports = [
            report("a", "x", 3.0), report("b", "x", 2.0), report("c", "x", 1.0),
            report("a", "y", 0.0), report("b", "y", 4.0), report("c", "y", 4.0),
            report("a", "z", 1.0), report("b", "z", 1.0), report("c", "z", 1.0),
        ];
        let t = rank_table(&reports).unwrap();
        let expected = [6.0 / 3.0, 5.5 / 3.0, 6.5 / 3.0];
        for (got, want) in t.average.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn score_rows_round_trip_through_csv() {
        let rows = vec![
            ScoreRow { method: "gabo".into(), task: "branin".into(), seed: 0, top1: -1.5, top128: -0.4, p90: -20.0 },
            ScoreRow { method: "gaga".into(), task: "branin".into(), seed: 1, top1: -3.0, top128: -0.9, p90: -9.0 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        write_scores_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,task,seed,top1,top128,p90\n"));
        assert_eq!(read_scores_csv(&path).unwrap(), rows);
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].top1, MeanStd { mean: -1.5, std: 0.0 });
    }

    #[test]
    fn scoring_a_real_task_name() {
        let task = Task::build(TaskName::Branin, 1).unwrap();
        let z = [0.0, 0.0];
        assert!(oracle_eval(&task, [&z[..]]).unwrap().is_finite());
    }
}
