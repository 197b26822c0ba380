//! Benchmark tasks: hidden oracles, offline dataset construction, and the
//! embedders between design space and the standardized optimization space.
//!
//! Three tasks are available:
//!
//! * `branin`: the negated Branin function on `[-5, 10] x [0, 15]`. The
//!   offline set is 1000 uniform points with the best 20% removed.
//! * `motif`: length-8 sequences over a 4-letter alphabet scored by a seeded
//!   position-weight matrix plus an adjacent-pair term, normalized to `[0, 1]`
//!   over all 65536 sequences. Designs are one-hot encoded (32 dims).
//! * `dosing`: a conditional task. Each patient has 8 covariates and an
//!   unknown ideal dose `w.x + b`; only the dose coordinate may be optimized.
//!
//! The oracle is not part of the public surface. Optimizers work from the
//! offline dataset and a surrogate; scoring goes through [`crate::eval`].
//!
//! ```compile_fail
//! let task = gambo::tasks::Task::build(gambo::tasks::TaskName::Branin, 0).unwrap();
//! let _ = task.oracle(ndarray::array![0.0, 0.0].view());
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::seq::index;
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Branin,
    Motif,
    Dosing,
}

impl TaskName {
    pub const ALL: [TaskName; 3] = [TaskName::Branin, TaskName::Motif, TaskName::Dosing];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Branin => "branin",
            TaskName::Motif => "motif",
            TaskName::Dosing => "dosing",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "task",
                name: s.to_string(),
            })
    }
}

// ---------------------------------------------------------------------------
// Branin
// ---------------------------------------------------------------------------

pub const BRANIN_LOWER: [f64; 2] = [-5.0, 0.0];
pub const BRANIN_UPPER: [f64; 2] = [10.0, 15.0];
/// Oracle value at each of the three global maximizers.
pub const BRANIN_OPTIMUM: f64 = -0.397_887_357_729_738;

pub(crate) fn branin(x: ArrayView1<f64>) -> Result<f64> {
    ensure_dim(2, x.len())?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("branin input"));
    }
    let x1 = x[0].clamp(BRANIN_LOWER[0], BRANIN_UPPER[0]);
    let x2 = x[1].clamp(BRANIN_LOWER[1], BRANIN_UPPER[1]);
    if x1 != x[0] || x2 != x[1] {
        log::trace!("branin input ({}, {}) clamped to the domain", x[0], x[1]);
    }
    let (a, r, s) = (1.0, 6.0, 10.0);
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    let value = a * (x2 - b * x1 * x1 + c * x1 - r).powi(2) + s * (1.0 - t) * x1.cos() + s;
    Ok(-value)
}

// ---------------------------------------------------------------------------
// Motif
// ---------------------------------------------------------------------------

pub const MOTIF_LENGTH: usize = 8;
pub const MOTIF_VOCAB: usize = 4;
const MOTIF_SPACE: usize = 65_536;

/// Sequence landscape: per-position symbol weights plus adjacent-pair
/// interactions, rescaled so the global minimum is 0 and the maximum is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MotifLandscape {
    pwm: [[f64; MOTIF_VOCAB]; MOTIF_LENGTH],
    pair: [[[f64; MOTIF_VOCAB]; MOTIF_VOCAB]; MOTIF_LENGTH - 1],
    min: f64,
    max: f64,
}

impl MotifLandscape {
    pub fn random(seed: u64) -> Self {
        let mut rng = stream(seed, "landscape");
        let mut pwm = [[0.0; MOTIF_VOCAB]; MOTIF_LENGTH];
        for row in &mut pwm {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        let mut pair = [[[0.0; MOTIF_VOCAB]; MOTIF_VOCAB]; MOTIF_LENGTH - 1];
        for block in &mut pair {
            for row in block.iter_mut() {
                for v in row.iter_mut() {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *v = 0.5 * g;
                }
            }
        }
        Self::from_terms(pwm, pair)
    }

    pub fn from_terms(
        pwm: [[f64; MOTIF_VOCAB]; MOTIF_LENGTH],
        pair: [[[f64; MOTIF_VOCAB]; MOTIF_VOCAB]; MOTIF_LENGTH - 1],
    ) -> Self {
        let mut land = Self {
            pwm,
            pair,
            min: 0.0,
            max: 1.0,
        };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for code in 0..MOTIF_SPACE {
            let v = land.raw_score(&decode_index(code));
            lo = lo.min(v);
            hi = hi.max(v);
        }
        land.min = lo;
        land.max = if hi > lo { hi } else { lo + 1.0 };
        land
    }

    fn raw_score(&self, seq: &[usize; MOTIF_LENGTH]) -> f64 {
        let unary: f64 = seq.iter().enumerate().map(|(p, &a)| self.pwm[p][a]).sum();
        let binary: f64 = seq
            .windows(2)
            .enumerate()
            .map(|(p, w)| self.pair[p][w[0]][w[1]])
            .sum();
        unary + binary
    }

    /// Normalized score in `[0, 1]`.
    pub fn score(&self, seq: &[usize]) -> Result<f64> {
        ensure_dim(MOTIF_LENGTH, seq.len())?;
        if let Some(&bad) = seq.iter().find(|&&a| a >= MOTIF_VOCAB) {
            return Err(Error::InvalidParameter(format!("symbol {bad} outside vocabulary")));
        }
        let arr: [usize; MOTIF_LENGTH] = seq.try_into().unwrap();
        Ok((self.raw_score(&arr) - self.min) / (self.max - self.min))
    }

    /// Brute-force maximizer over all sequences; ties go to the lowest index.
    pub fn argmax(&self) -> ([usize; MOTIF_LENGTH], f64) {
        let mut best = (decode_index(0), f64::NEG_INFINITY);
        for code in 0..MOTIF_SPACE {
            let seq = decode_index(code);
            let v = self.score(&seq).unwrap();
            if v > best.1 {
                best = (seq, v);
            }
        }
        best
    }

    /// Renames symbols at every position: new symbol `perm[a]` carries the
    /// weights old symbol `a` had.
    pub fn relabeled(&self, perm: [usize; MOTIF_VOCAB]) -> Self {
        let mut pwm = [[0.0; MOTIF_VOCAB]; MOTIF_LENGTH];
        for p in 0..MOTIF_LENGTH {
            for a in 0..MOTIF_VOCAB {
                pwm[p][perm[a]] = self.pwm[p][a];
            }
        }
        let mut pair = [[[0.0; MOTIF_VOCAB]; MOTIF_VOCAB]; MOTIF_LENGTH - 1];
        for p in 0..MOTIF_LENGTH - 1 {
            for a in 0..MOTIF_VOCAB {
                for b in 0..MOTIF_VOCAB {
                    pair[p][perm[a]][perm[b]] = self.pair[p][a][b];
                }
            }
        }
        Self::from_terms(pwm, pair)
    }
}

/// Sequence with base-4 digits of `code`, most significant first.
fn decode_index(code: usize) -> [usize; MOTIF_LENGTH] {
    let mut seq = [0; MOTIF_LENGTH];
    for (p, slot) in seq.iter_mut().enumerate() {
        *slot = (code >> (2 * (MOTIF_LENGTH - 1 - p))) & 3;
    }
    seq
}

fn one_hot(seq: ArrayView1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(MOTIF_LENGTH * MOTIF_VOCAB);
    for (p, &a) in seq.iter().enumerate() {
        out[p * MOTIF_VOCAB + a as usize] = 1.0;
    }
    out
}

// ---------------------------------------------------------------------------
// Dosing
// ---------------------------------------------------------------------------

pub const DOSING_COVARIATES: usize = 8;
const DOSE_BASE: f64 = 5.0;
const DOSE_WEIGHT_NORM: f64 = 1.5;
const HISTORICAL_NOISE: f64 = 1.5;
/// Patients whose ideal dose lies closer than this to the mean dose are redrawn.
const MIN_DOSE_GAP: f64 = 1.5;

/// Linear ideal-dose model and the population mean dose.
#[derive(Debug, Clone, PartialEq)]
pub struct DosingModel {
    weights: [f64; DOSING_COVARIATES],
    bias: f64,
    mean_dose: f64,
}

impl DosingModel {
    pub fn new(weights: [f64; DOSING_COVARIATES], bias: f64, mean_dose: f64) -> Self {
        Self {
            weights,
            bias,
            mean_dose,
        }
    }

    pub fn ideal_dose(&self, covariates: ArrayView1<f64>) -> f64 {
        covariates
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| x * w)
            .sum::<f64>()
            + self.bias
    }

    pub fn mean_dose(&self) -> f64 {
        self.mean_dose
    }

    /// `c(z|x) = (z - d(x))^2`.
    pub fn cost(&self, covariates: ArrayView1<f64>, dose: f64) -> f64 {
        (dose - self.ideal_dose(covariates)).powi(2)
    }

    /// Normalized improvement over the mean dose: `[c(mean) - c(dose)] / c(mean)`.
    pub fn score(&self, covariates: ArrayView1<f64>, dose: f64) -> Result<f64> {
        ensure_dim(DOSING_COVARIATES, covariates.len())?;
        if !dose.is_finite() {
            return Err(Error::NonFinite("dose"));
        }
        let base = self.cost(covariates, self.mean_dose);
        if base <= 0.0 {
            return Err(Error::InvalidParameter(
                "patient's ideal dose equals the mean dose".into(),
            ));
        }
        Ok((base - self.cost(covariates, dose)) / base)
    }
}

struct DosingBuild {
    model: DosingModel,
    raw: Array2<f64>,
    scores: Array1<f64>,
    eval_patients: Vec<Array1<f64>>,
}

fn draw_covariates<R: rand::Rng>(rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(DOSING_COVARIATES, || StandardNormal.sample(rng))
}

fn build_dosing(n_train: usize, n_eval: usize, seed: u64) -> DosingBuild {
    let mut rng = stream(seed, "landscape");
    let mut weights = [0.0; DOSING_COVARIATES];
    for w in &mut weights {
        *w = StandardNormal.sample(&mut rng);
    }
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    weights.iter_mut().for_each(|w| *w *= DOSE_WEIGHT_NORM / norm);
    let mut model = DosingModel::new(weights, DOSE_BASE, DOSE_BASE);

    // Patients too close to the mean dose are redrawn until the mean of the
    // historical doses stops moving them back into the excluded band.
    let mut rng = stream(seed, "dataset");
    let mut patients: Vec<(Array1<f64>, f64)> = (0..n_train)
        .map(|_| {
            let x = draw_covariates(&mut rng);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let dose = model.ideal_dose(x.view()) + HISTORICAL_NOISE * noise;
            (x, dose)
        })
        .collect();
    for _ in 0..1000 {
        model.mean_dose = patients.iter().map(|p| p.1).sum::<f64>() / n_train as f64;
        let mut redrawn = false;
        for p in &mut patients {
            while (model.ideal_dose(p.0.view()) - model.mean_dose).abs() < MIN_DOSE_GAP {
                let x = draw_covariates(&mut rng);
                let noise: f64 = StandardNormal.sample(&mut rng);
                p.1 = model.ideal_dose(x.view()) + HISTORICAL_NOISE * noise;
                p.0 = x;
                redrawn = true;
            }
        }
        if !redrawn {
            break;
        }
    }

    let mut raw = Array2::zeros((n_train, DOSING_COVARIATES + 1));
    let mut scores = Array1::zeros(n_train);
    for (i, (x, dose)) in patients.iter().enumerate() {
        raw.slice_mut(s![i, ..DOSING_COVARIATES]).assign(x);
        raw[[i, DOSING_COVARIATES]] = *dose;
        scores[i] = model.score(x.view(), *dose).expect("gap enforced");
    }

    let mut rng = stream(seed, "eval-patients");
    let eval_patients = (0..n_eval)
        .map(|_| loop {
            let x = draw_covariates(&mut rng);
            if (model.ideal_dose(x.view()) - model.mean_dose).abs() >= MIN_DOSE_GAP {
                break x;
            }
        })
        .collect();
    DosingBuild {
        model,
        raw,
        scores,
        eval_patients,
    }
}

// ---------------------------------------------------------------------------
// Task
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Oracle {
    Branin,
    Motif(MotifLandscape),
    Dosing(DosingModel),
}

/// A task bundles its hidden oracle, offline dataset and embedder.
#[derive(Debug, Clone)]
pub struct Task {
    name: TaskName,
    oracle: Oracle,
    dataset: OfflineDataset,
    condition_mask: Vec<bool>,
    eval_conditions: Vec<Array1<f64>>,
}

pub const BRANIN_RAW_POINTS: usize = 1000;
pub const MOTIF_RAW_SEQUENCES: usize = 8192;
pub const DOSING_TRAIN_PATIENTS: usize = 512;
pub const DOSING_EVAL_PATIENTS: usize = 50;

impl Task {
    pub fn build(name: TaskName, seed: u64) -> Result<Self> {
        match name {
            TaskName::Branin => Self::branin(BRANIN_RAW_POINTS, seed),
            TaskName::Motif => Self::motif(MOTIF_RAW_SEQUENCES, seed),
            TaskName::Dosing => Self::dosing(DOSING_TRAIN_PATIENTS, DOSING_EVAL_PATIENTS, seed),
        }
    }

    /// Uniform sample of `n_raw` points with the best 20% removed.
    pub fn branin(n_raw: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "dataset");
        let mut pts: Vec<([f64; 2], f64)> = (0..n_raw)
            .map(|_| {
                let x = [
                    rng.random_range(BRANIN_LOWER[0]..BRANIN_UPPER[0]),
                    rng.random_range(BRANIN_LOWER[1]..BRANIN_UPPER[1]),
                ];
                let y = branin(ndarray::aview1(&x)).expect("in-domain sample");
                (x, y)
            })
            .collect();
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        let keep = n_raw - n_raw / 5;
        pts.truncate(keep);
        let raw = Array2::from_shape_fn((keep, 2), |(i, j)| pts[i].0[j]);
        let scores = pts.iter().map(|p| p.1).collect();
        Ok(Self {
            name: TaskName::Branin,
            oracle: Oracle::Branin,
            dataset: OfflineDataset::new(raw.clone(), raw, scores)?,
            condition_mask: Vec::new(),
            eval_conditions: Vec::new(),
        })
    }

    /// `n` distinct uniform sequences with the top half removed.
    pub fn motif(n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > MOTIF_SPACE {
            return Err(Error::InvalidParameter(format!("motif sample size {n}")));
        }
        let landscape = MotifLandscape::random(seed);
        let mut rng = stream(seed, "dataset");
        let mut seqs: Vec<([usize; MOTIF_LENGTH], f64)> = index::sample(&mut rng, MOTIF_SPACE, n)
            .into_iter()
            .map(|code| {
                let seq = decode_index(code);
                let y = landscape.score(&seq).unwrap();
                (seq, y)
            })
            .collect();
        seqs.sort_by(|a, b| a.1.total_cmp(&b.1));
        seqs.truncate(n / 2);
        let raw = Array2::from_shape_fn((seqs.len(), MOTIF_LENGTH), |(i, p)| seqs[i].0[p] as f64);
        let mut features = Array2::zeros((seqs.len(), MOTIF_LENGTH * MOTIF_VOCAB));
        for (i, row) in raw.rows().into_iter().enumerate() {
            features.row_mut(i).assign(&one_hot(row));
        }
        let scores = seqs.iter().map(|p| p.1).collect();
        Ok(Self {
            name: TaskName::Motif,
            oracle: Oracle::Motif(landscape),
            dataset: OfflineDataset::new(raw, features, scores)?,
            condition_mask: Vec::new(),
            eval_conditions: Vec::new(),
        })
    }

    /// Historical `(covariates, dose, score)` records and fresh evaluation patients.
    pub fn dosing(n_train: usize, n_eval: usize, seed: u64) -> Result<Self> {
        if n_train < 2 {
            return Err(Error::InvalidParameter("dosing needs at least two patients".into()));
        }
        let built = build_dosing(n_train, n_eval, seed);
        let mut mask = vec![true; DOSING_COVARIATES + 1];
        mask[DOSING_COVARIATES] = false;
        Ok(Self {
            name: TaskName::Dosing,
            oracle: Oracle::Dosing(built.model),
            dataset: OfflineDataset::new(built.raw.clone(), built.raw, built.scores)?,
            condition_mask: mask,
            eval_conditions: built.eval_patients,
        })
    }

    pub fn name(&self) -> TaskName {
        self.name
    }

    pub fn dataset(&self) -> &OfflineDataset {
        &self.dataset
    }

    pub fn optimization_dim(&self) -> usize {
        self.dataset.dim()
    }

    pub fn design_dim(&self) -> usize {
        self.dataset.raw_designs().ncols()
    }

    /// `true` for coordinates that are fixed conditions. Empty for
    /// unconditional tasks.
    pub fn condition_mask(&self) -> &[bool] {
        &self.condition_mask
    }

    pub fn is_conditional(&self) -> bool {
        self.condition_mask.iter().any(|&c| c)
    }

    /// Indices of the coordinates an optimizer may change.
    pub fn free_dims(&self) -> Vec<usize> {
        if self.condition_mask.is_empty() {
            (0..self.optimization_dim()).collect()
        } else {
            (0..self.condition_mask.len()).filter(|&j| !self.condition_mask[j]).collect()
        }
    }

    pub fn num_conditions(&self) -> usize {
        self.eval_conditions.len()
    }

    /// Optimization-space template for evaluation condition `i`; free
    /// coordinates hold the dataset mean (0 after standardization).
    pub fn condition_template(&self, i: usize) -> Result<Array1<f64>> {
        let cov = self
            .eval_conditions
            .get(i)
            .ok_or_else(|| Error::InvalidParameter(format!("condition index {i}")))?;
        let stats = self.dataset.design_stats();
        let mut raw = Array1::from(stats.mean.clone());
        let mut k = 0;
        for (j, &fixed) in self.condition_mask.iter().enumerate() {
            if fixed {
                raw[j] = cov[k];
                k += 1;
            }
        }
        stats.standardize(raw.view())
    }

    /// Design space to optimization space.
    pub fn encode(&self, raw: ArrayView1<f64>) -> Result<Array1<f64>> {
        ensure_dim(self.design_dim(), raw.len())?;
        let features = match self.oracle {
            Oracle::Motif(_) => {
                if raw.iter().any(|&a| !(a >= 0.0 && a < MOTIF_VOCAB as f64 && a.fract() == 0.0)) {
                    return Err(Error::InvalidParameter("sequence symbol outside vocabulary".into()));
                }
                one_hot(raw)
            }
            _ => raw.to_owned(),
        };
        self.dataset.design_stats().standardize(features.view())
    }

    /// Optimization space to design space. Total on `R^d`; sequence decoding
    /// takes the per-position argmax with ties to the lowest symbol.
    pub fn decode(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        ensure_dim(self.optimization_dim(), z.len())?;
        let x = self.dataset.design_stats().destandardize(z)?;
        Ok(match self.oracle {
            Oracle::Motif(_) => Array1::from_shape_fn(MOTIF_LENGTH, |p| {
                let logits = x.slice(s![p * MOTIF_VOCAB..(p + 1) * MOTIF_VOCAB]);
                let mut best = 0;
                for a in 1..MOTIF_VOCAB {
                    if logits[a] > logits[best] {
                        best = a;
                    }
                }
                best as f64
            }),
            _ => x,
        })
    }

    /// Oracle value of a design-space point.
    pub(crate) fn oracle(&self, raw: ArrayView1<f64>) -> Result<f64> {
        match &self.oracle {
            Oracle::Branin => branin(raw),
            Oracle::Motif(land) => {
                let seq: Vec<usize> = raw.iter().map(|&a| a as usize).collect();
                land.score(&seq)
            }
            Oracle::Dosing(model) => {
                ensure_dim(DOSING_COVARIATES + 1, raw.len())?;
                model.score(raw.slice(s![..DOSING_COVARIATES]), raw[DOSING_COVARIATES])
            }
        }
    }

    /// Best attainable oracle value: the known optimum for Branin, the
    /// brute-force maximum for motif, and for dosing the mean over evaluation
    /// patients of a fine dose-grid search.
    pub fn oracle_ceiling(&self) -> f64 {
        match &self.oracle {
            Oracle::Branin => BRANIN_OPTIMUM,
            Oracle::Motif(land) => land.argmax().1,
            Oracle::Dosing(model) => {
                let doses = self.dataset.raw_designs().column(DOSING_COVARIATES).to_owned();
                let lo = doses.fold(f64::INFINITY, |m, &v| m.min(v)) - 5.0;
                let hi = doses.fold(f64::NEG_INFINITY, |m, &v| m.max(v)) + 5.0;
                let total: f64 = self
                    .eval_conditions
                    .iter()
                    .map(|x| {
                        (0..=20_000)
                            .map(|k| lo + (hi - lo) * k as f64 / 20_000.0)
                            .map(|z| model.score(x.view(), z).unwrap())
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .sum();
                total / self.eval_conditions.len().max(1) as f64
            }
        }
    }
}

/// Rows of `z` with every conditioned coordinate equal to `template`'s.
pub fn conditions_untouched(z: ArrayView1<f64>, template: ArrayView1<f64>, mask: &[bool]) -> bool {
    mask.iter()
        .enumerate()
        .all(|(j, &fixed)| !fixed || z[j] == template[j])
}
