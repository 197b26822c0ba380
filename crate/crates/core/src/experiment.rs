//! Config-driven experiments: every (method, seed) pair on one task, scored
//! and written out as CSV tables plus raw trajectories.
//!
//! Seeds drive everything. For seed `s` the task and its offline dataset are
//! built from `s`, the surrogate is trained once from `s` and shared by all
//! methods, and each optimizer run uses `s` as its root (conditional tasks use
//! `derive_seed(s, "patient/<i>")` for condition `i`).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ascr::AscrConfig;
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, budget_curve, doubling_ks, rank_table, score_trajectory, trajectory_dcov, write_curve_csv,
    write_dcov_csv, write_scores_csv, DcovRow, EvalReport, MeanStd, RankTable, ScoreRow, Scores,
};
use crate::gp::{AcquireConfig, GpFitConfig};
use crate::nets::{train_surrogate, Mlp, SurrogateConfig};
use crate::optimizers::{
    run, AlphaMode, AnnealConfig, CriticScale, OptimizerKind, Problem, RunConfig, Trajectory,
};
use crate::rng::derive_seed;
use crate::tasks::{Task, TaskName};
use crate::wasserstein::CriticTrainConfig;

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

/// Critic retraining period override: a positive count, or `"never"` to train
/// the critic once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Retrain {
    Every(usize),
    Never(Never),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Never {
    Never,
}

/// One method: an optimizer name plus overrides of its default [`RunConfig`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    /// Label used in tables and file names; derived from the settings when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub optimizer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_mode: Option<AlphaMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_generator: Option<Retrain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_scale: Option<CriticScale>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ascr: Option<AscrConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic: Option<CriticTrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp: Option<GpFitConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquire: Option<AcquireConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anneal: Option<AnnealConfig>,
}

impl MethodSpec {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            optimizer: kind.as_str().to_string(),
            ..Default::default()
        }
    }

    pub fn with_alpha(mut self, mode: AlphaMode) -> Self {
        self.alpha_mode = Some(mode);
        self
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    /// Applies the overrides to the optimizer's defaults and validates.
    pub fn run_config(&self) -> Result<RunConfig> {
        let kind: OptimizerKind = self.optimizer.parse()?;
        let mut cfg = RunConfig::new(kind);
        if let Some(m) = self.alpha_mode {
            cfg.alpha_mode = m;
        }
        if let Some(t) = self.iterations {
            cfg.iterations = t;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        match self.n_generator {
            Some(Retrain::Every(n)) => cfg.n_generator = Some(n),
            Some(Retrain::Never(_)) => cfg.n_generator = None,
            None => {}
        }
        if let Some(eta) = self.eta {
            cfg.eta = eta;
        }
        if let Some(s) = self.critic_scale {
            cfg.critic_scale = s;
        }
        if let Some(c) = &self.ascr {
            cfg.ascr = c.clone();
        }
        if let Some(c) = &self.critic {
            cfg.critic = c.clone();
        }
        if let Some(c) = &self.gp {
            cfg.gp = c.clone();
        }
        if let Some(c) = &self.acquire {
            cfg.acquire = c.clone();
        }
        if let Some(c) = &self.anneal {
            cfg.anneal = c.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The explicit name, or e.g. `gabo`, `gabo_alpha0.5`, `gabo_once`.
    pub fn label(&self) -> Result<String> {
        if let Some(name) = &self.name {
            return Ok(name.clone());
        }
        let cfg = self.run_config()?;
        let mut label = cfg.optimizer.as_str().to_string();
        if let AlphaMode::Constant(a) = cfg.alpha_mode {
            label.push_str(&format!("_alpha{a}"));
        }
        if cfg.optimizer.is_penalized() && cfg.n_generator.is_none() {
            label.push_str("_once");
        }
        Ok(label)
    }
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: String,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Relative paths resolve against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    /// Conditional tasks: optimize only the first `n` evaluation conditions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditions: Option<usize>,
    #[serde(default = "default_true")]
    pub save_trajectories: bool,
}

impl ExperimentConfig {
    pub fn new(task: TaskName, methods: Vec<MethodSpec>) -> Self {
        Self {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            task: task.as_str().to_string(),
            methods,
            seeds: default_seeds(),
            output_dir: None,
            surrogate: SurrogateConfig::default(),
            conditions: None,
            save_trajectories: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, resolving a relative `output_dir`
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&fs::read_to_string(path)?)?;
        if let Some(out) = &cfg.output_dir {
            if out.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.output_dir = Some(base.join(out));
            }
        }
        Ok(cfg)
    }

    pub fn task_name(&self) -> Result<TaskName> {
        self.task.parse()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::InvalidParameter(format!(
                "schema_version {} unsupported (expected {EXPERIMENT_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.task_name()?;
        if self.methods.is_empty() {
            return Err(Error::Empty("methods"));
        }
        if self.seeds.is_empty() {
            return Err(Error::Empty("seeds"));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(Error::InvalidParameter("seeds must be distinct".into()));
        }
        if self.conditions == Some(0) {
            return Err(Error::InvalidParameter("conditions must be positive".into()));
        }
        let mut labels = HashSet::new();
        for m in &self.methods {
            let label = m.label()?;
            if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
                return Err(Error::InvalidParameter(format!(
                    "method label '{label}' must be non-empty ASCII letters, digits, '_', '-' or '.'"
                )));
            }
            if !labels.insert(label.clone()) {
                return Err(Error::InvalidParameter(format!("duplicate method label '{label}'")));
            }
        }
        Ok(())
    }
}

/// Result of one method on one seed. Conditional tasks hold one trajectory
/// per condition and average their scores.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: String,
    pub seed: u64,
    pub scores: Scores,
    pub dcov: f64,
    pub curve: Vec<(usize, f64)>,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub task: TaskName,
    /// Offline dataset best per seed.
    pub dataset_best: Vec<(u64, f64)>,
    pub outcomes: Vec<RunOutcome>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn run_method(task: &Task, surrogate: &Mlp, cfg: &RunConfig, method: &str, seed: u64, conditions: Option<usize>) -> Result<RunOutcome> {
    let trajectories: Vec<Trajectory> = if task.is_conditional() {
        let n = conditions.unwrap_or(usize::MAX).min(task.num_conditions());
        (0..n)
            .map(|i| {
                let problem = Problem::for_condition(task, surrogate, i)?;
                run(&problem, cfg, derive_seed(seed, &format!("patient/{i}")))
            })
            .collect::<Result<_>>()?
    } else {
        vec![run(&Problem::for_task(task, surrogate)?, cfg, seed)?]
    };
    let scores: Vec<Scores> = trajectories.iter().map(|t| score_trajectory(task, t)).collect::<Result<_>>()?;
    let ks = doubling_ks(trajectories[0].len());
    let curves: Vec<Vec<(usize, f64)>> =
        trajectories.iter().map(|t| budget_curve(t, task, &ks)).collect::<Result<_>>()?;
    let curve = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| (k, mean(curves.iter().map(|c| c[j].1))))
        .collect();
    let dcov = mean(trajectories.iter().map(|t| trajectory_dcov(task, t)).collect::<Result<Vec<_>>>()?);
    Ok(RunOutcome {
        method: method.to_string(),
        seed,
        scores: Scores {
            top1: mean(scores.iter().map(|s| s.top1)),
            top128: mean(scores.iter().map(|s| s.top128)),
            p90: mean(scores.iter().map(|s| s.p90)),
        },
        dcov,
        curve,
        trajectories,
    })
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs every (method, seed) pair on up to `jobs` worker threads. Results are
/// ordered by method then seed regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let name = cfg.task_name()?;
    let methods: Vec<(String, RunConfig)> =
        cfg.methods.iter().map(|m| Ok((m.label()?, m.run_config()?))).collect::<Result<_>>()?;
    with_pool(jobs, || {
        let prepared: Vec<(Task, Mlp)> = cfg
            .seeds
            .par_iter()
            .map(|&seed| {
                let task = Task::build(name, seed)?;
                let surrogate = train_surrogate(task.dataset(), &cfg.surrogate, seed)?.net;
                Ok((task, surrogate))
            })
            .collect::<Result<_>>()?;
        let pairs: Vec<(usize, usize)> =
            (0..methods.len()).flat_map(|m| (0..cfg.seeds.len()).map(move |s| (m, s))).collect();
        let outcomes = pairs
            .par_iter()
            .map(|&(m, s)| {
                let (task, surrogate) = &prepared[s];
                let (label, run_cfg) = &methods[m];
                run_method(task, surrogate, run_cfg, label, cfg.seeds[s], cfg.conditions)
            })
            .collect::<Result<Vec<_>>>()?;
        let dataset_best = cfg.seeds.iter().zip(&prepared).map(|(&s, (t, _))| (s, t.dataset().best_score())).collect();
        Ok(ExperimentResult { task: name, dataset_best, outcomes })
    })?
}

impl ExperimentResult {
    pub fn score_rows(&self) -> Vec<ScoreRow> {
        self.outcomes
            .iter()
            .map(|o| ScoreRow {
                method: o.method.clone(),
                task: self.task.to_string(),
                seed: o.seed,
                top1: o.scores.top1,
                top128: o.scores.top128,
                p90: o.scores.p90,
            })
            .collect()
    }

    pub fn reports(&self) -> Vec<EvalReport> {
        aggregate(&self.score_rows())
    }

    pub fn report(&self, method: &str) -> Option<EvalReport> {
        self.reports().into_iter().find(|r| r.method == method)
    }

    /// `None` with fewer than two methods.
    pub fn ranks(&self) -> Option<RankTable> {
        rank_table(&self.reports()).ok()
    }

    /// Budget curve per method, averaged over seeds, in method order.
    pub fn curves(&self) -> Vec<(String, Vec<(usize, f64)>)> {
        let mut grouped: Vec<(String, Vec<&RunOutcome>)> = Vec::new();
        for o in &self.outcomes {
            match grouped.iter_mut().find(|(m, _)| m == &o.method) {
                Some((_, v)) => v.push(o),
                None => grouped.push((o.method.clone(), vec![o])),
            }
        }
        grouped
            .into_iter()
            .map(|(method, runs)| {
                let curve = runs[0]
                    .curve
                    .iter()
                    .enumerate()
                    .map(|(j, &(k, _))| (k, mean(runs.iter().map(|r| r.curve[j].1))))
                    .collect();
                (method, curve)
            })
            .collect()
    }

    pub fn dcov_rows(&self) -> Vec<DcovRow> {
        self.outcomes
            .iter()
            .map(|o| DcovRow {
                method: o.method.clone(),
                task: self.task.to_string(),
                seed: o.seed,
                dcov: o.dcov,
            })
            .collect()
    }

    pub fn outcomes_of<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a RunOutcome> + 'a {
        self.outcomes.iter().filter(move |o| o.method == method)
    }

    pub fn dataset_best_mean(&self) -> f64 {
        mean(self.dataset_best.iter().map(|d| d.1))
    }

    /// Writes `scores.csv`, `ranks.csv` (two or more methods),
    /// `curve_<task>_<method>.csv`, `dcov.csv` and, when asked,
    /// `trajectories/<method>/seed<s>[_c<i>].{jsonl,summary.json}`.
    pub fn write(&self, dir: &Path, trajectories: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_scores_csv(&dir.join("scores.csv"), &self.score_rows())?;
        if let Some(ranks) = self.ranks() {
            ranks.write_csv(&dir.join("ranks.csv"))?;
        }
        for (method, curve) in self.curves() {
            write_curve_csv(&dir.join(format!("curve_{}_{method}.csv", self.task)), &curve)?;
        }
        write_dcov_csv(&dir.join("dcov.csv"), &self.dcov_rows())?;
        if trajectories {
            for o in &self.outcomes {
                let sub = dir.join("trajectories").join(&o.method);
                fs::create_dir_all(&sub)?;
                if o.trajectories.len() == 1 {
                    o.trajectories[0].save(&sub, &format!("seed{}", o.seed))?;
                } else {
                    for (i, t) in o.trajectories.iter().enumerate() {
                        t.save(&sub, &format!("seed{}_c{i}", o.seed))?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fails when `dir` already holds results, unless `force` is set.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.join("scores.csv").exists() && !force {
        return Err(Error::OutputExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Runs a config end to end and writes everything into `dir`, including a
/// copy of the config.
pub fn execute(cfg: &ExperimentConfig, dir: &Path, force: bool, jobs: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    prepare_output_dir(dir, force)?;
    let result = run_experiment(cfg, jobs)?;
    result.write(dir, cfg.save_trajectories)?;
    let mut copy = cfg.clone();
    copy.output_dir = None;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&copy)?)?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// Branin reproduction
// ---------------------------------------------------------------------------

/// Constant penalty weights swept by the Branin ablation.
pub const BRANIN_CONSTANT_ALPHAS: [f64; 5] = [0.0, 0.2, 0.5, 0.8, 1.0];

/// Methods of the Branin comparison: the two adaptive optimizers, their
/// unpenalized parents, annealing, the constant-penalty sweep and a
/// train-once critic.
pub fn branin_methods() -> Vec<MethodSpec> {
    let mut methods = vec![
        MethodSpec::new(OptimizerKind::Gabo),
        MethodSpec::new(OptimizerKind::Gaga),
        MethodSpec::new(OptimizerKind::BoQei),
        MethodSpec::new(OptimizerKind::GradAscent),
        MethodSpec::new(OptimizerKind::Anneal),
    ];
    for a in BRANIN_CONSTANT_ALPHAS {
        methods.push(MethodSpec::new(OptimizerKind::Gabo).with_alpha(AlphaMode::Constant(a)));
    }
    methods.push(MethodSpec {
        n_generator: Some(Retrain::Never(Never::Never)),
        ..MethodSpec::new(OptimizerKind::Gabo)
    });
    methods
}

pub fn branin_config(seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        seeds,
        save_trajectories: false,
        ..ExperimentConfig::new(TaskName::Branin, branin_methods())
    }
}

/// Reference Branin figures (mean, std) for methods that have them.
pub fn branin_reference(method: &str) -> (Option<(f64, f64)>, Option<(f64, f64)>) {
    match method {
        "gabo" => (Some((-2.6, 1.1)), Some((-0.5, 0.1))),
        "bo_qei" => (Some((-11.0, 7.8)), None),
        "gaga" => (Some((-2.9, 2.2)), None),
        "grad_ascent" => (Some((-245.1, 81.3)), None),
        "gabo_alpha1" => (Some((-99.5, 61.2)), None),
        _ => (None, None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionOutcome {
    pub id: u32,
    pub description: String,
    pub observed: String,
    pub passed: bool,
}

impl std::fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] criterion {}: {} ({})", self.id, self.description, self.observed)
    }
}

fn pooled_std(a: &MeanStd, b: &MeanStd) -> f64 {
    ((a.std * a.std + b.std * b.std) / 2.0).sqrt()
}

fn curves_monotone(result: &ExperimentResult) -> bool {
    result
        .outcomes
        .iter()
        .all(|o| o.curve.windows(2).all(|w| w[1].1 >= w[0].1))
        && result.curves().iter().all(|(_, c)| c.windows(2).all(|w| w[1].1 >= w[0].1))
}

/// Acceptance checks over a Branin experiment that ran [`branin_methods`].
pub fn branin_criteria(result: &ExperimentResult) -> Result<Vec<CriterionOutcome>> {
    let get = |m: &str| result.report(m).ok_or_else(|| Error::Unknown { kind: "method", name: m.to_string() });
    let gabo = get("gabo")?;
    let bo = get("bo_qei")?;
    let gaga = get("gaga")?;
    let grad = get("grad_ascent")?;
    let pure = get("gabo_alpha1")?;
    let constants: Vec<EvalReport> =
        BRANIN_CONSTANT_ALPHAS.iter().map(|a| get(&format!("gabo_alpha{a}"))).collect::<Result<_>>()?;
    let best_constant = constants
        .iter()
        .max_by(|a, b| a.top1.mean.total_cmp(&b.top1.mean))
        .expect("non-empty sweep");
    let data_best = result.dataset_best_mean();
    let gabo_k1 = result
        .curves()
        .into_iter()
        .find(|(m, _)| m == "gabo")
        .map(|(_, c)| c[0].1)
        .unwrap_or(f64::NAN);
    let in_band = |v: f64| (-8.0..=-1.0).contains(&v);
    let fmt = |r: &MeanStd| format!("{:.2} ± {:.2}", r.mean, r.std);
    Ok(vec![
        CriterionOutcome {
            id: 1,
            description: "GABO top-1 mean in [-8, -1] and above BO-qEI".into(),
            observed: format!("GABO {}, BO-qEI {}", fmt(&gabo.top1), fmt(&bo.top1)),
            passed: in_band(gabo.top1.mean) && gabo.top1.mean > bo.top1.mean,
        },
        CriterionOutcome {
            id: 2,
            description: "GABO top-128 mean in [-1.5, -0.3]".into(),
            observed: fmt(&gabo.top128),
            passed: (-1.5..=-0.3).contains(&gabo.top128.mean),
        },
        CriterionOutcome {
            id: 3,
            description: "GAGA top-1 mean >= -10 and gradient ascent mean <= -50".into(),
            observed: format!("GAGA {}, gradient ascent {}", fmt(&gaga.top1), fmt(&grad.top1)),
            passed: gaga.top1.mean >= -10.0 && grad.top1.mean <= -50.0,
        },
        CriterionOutcome {
            id: 4,
            description: "adaptive beats alpha=1 and is within one pooled std of the best constant alpha".into(),
            observed: format!(
                "adaptive {}, alpha=1 {}, best constant {} {}",
                fmt(&gabo.top1),
                fmt(&pure.top1),
                best_constant.method,
                fmt(&best_constant.top1)
            ),
            passed: gabo.top1.mean > pure.top1.mean
                && gabo.top1.mean >= best_constant.top1.mean - pooled_std(&gabo.top1, &best_constant.top1),
        },
        CriterionOutcome {
            id: 5,
            description: "GABO top-1 and top-128 means exceed the offline dataset best".into(),
            observed: format!(
                "top-1 {:.2}, top-128 {:.2}, dataset best {:.2}",
                gabo.top1.mean, gabo.top128.mean, data_best
            ),
            passed: gabo.top1.mean > data_best && gabo.top128.mean > data_best,
        },
        CriterionOutcome {
            id: 7,
            description: "budget curves non-decreasing; GABO k=1 point in [-8, -1]".into(),
            observed: format!("monotone {}, GABO k=1 {:.2}", curves_monotone(result), gabo_k1),
            passed: curves_monotone(result) && in_band(gabo_k1),
        },
    ])
}

/// Whether the budget curves of every method are non-decreasing in `k`.
pub fn budget_curves_monotone(result: &ExperimentResult) -> bool {
    curves_monotone(result)
}

/// Evidence lines checked alongside the criteria: adaptivity of the
/// penalty weight and the constant(0) reduction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BraninDiagnostics {
    /// Distinct penalty weights in each adaptive GABO run, in outcome order.
    pub distinct_alphas: Vec<usize>,
    /// Constant(0) GABO rows equal the BO-qEI rows.
    pub zero_alpha_matches_bo: bool,
}

impl BraninDiagnostics {
    /// Adaptive runs whose penalty weight changed at least once.
    pub fn adapting_runs(&self) -> usize {
        self.distinct_alphas.iter().filter(|&&n| n >= 2).count()
    }
}

pub fn branin_diagnostics(result: &ExperimentResult) -> BraninDiagnostics {
    let distinct_alphas = result
        .outcomes_of("gabo")
        .flat_map(|o| o.trajectories.iter().map(|t| t.distinct_alphas()))
        .collect();
    let scores = |m: &str| result.outcomes_of(m).map(|o| (o.seed, o.scores)).collect::<BTreeMap<_, _>>();
    let zero = scores("gabo_alpha0");
    BraninDiagnostics {
        distinct_alphas,
        zero_alpha_matches_bo: !zero.is_empty() && zero == scores("bo_qei"),
    }
}

/// Markdown comparison table: one row per method with mean ± std and the
/// reference figure where one exists.
pub fn branin_table(result: &ExperimentResult) -> String {
    let mut out = String::from("| method | top-1 | top-128 | p90 | reference top-1 | reference top-128 |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    let cell = |r: Option<(f64, f64)>| r.map_or("-".to_string(), |(m, s)| format!("{m:.1} ± {s:.1}"));
    for r in result.reports() {
        let (t1, t128) = branin_reference(&r.method);
        out.push_str(&format!(
            "| {} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.2} ± {:.2} | {} | {} |\n",
            r.method,
            r.top1.mean,
            r.top1.std,
            r.top128.mean,
            r.top128.std,
            r.p90.mean,
            r.p90.std,
            cell(t1),
            cell(t128)
        ));
    }
    out.push_str(&format!("| offline dataset best | {:.2} | | | -13.0 | |\n", result.dataset_best_mean()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: OptimizerKind) -> MethodSpec {
        MethodSpec {
            iterations: Some(3),
            batch_size: Some(4),
            n_generator: Some(Retrain::Every(2)),
            acquire: Some(AcquireConfig {
                candidate_pool: 64,
                mc_samples: 16,
                ..Default::default()
            }),
            gp: Some(GpFitConfig {
                restarts: 2,
                iterations: 10,
                ..Default::default()
            }),
            critic: Some(CriticTrainConfig {
                max_steps: 200,
                patience: 20,
                ..Default::default()
            }),
            ascr: Some(AscrConfig {
                search_budget: 32,
                ..Default::default()
            }),
            ..MethodSpec::new(kind)
        }
    }

    fn tiny_config(task: TaskName) -> ExperimentConfig {
        ExperimentConfig {
            seeds: vec![0, 1],
            surrogate: SurrogateConfig {
                hidden: vec![16, 16],
                epochs: 5,
                ..Default::default()
            },
            conditions: Some(2),
            ..ExperimentConfig::new(task, vec![tiny(OptimizerKind::Gabo), tiny(OptimizerKind::BoQei)])
        }
    }

    #[test]
    fn labels_follow_settings() {
        assert_eq!(MethodSpec::new(OptimizerKind::Gabo).label().unwrap(), "gabo");
        let labels: Vec<String> = branin_methods().iter().map(|m| m.label().unwrap()).collect();
        assert!(labels.contains(&"gabo_alpha0.5".to_string()));
        assert!(labels.contains(&"gabo_alpha1".to_string()));
        assert!(labels.contains(&"gabo_once".to_string()));
        assert_eq!(labels.len(), labels.iter().collect::<HashSet<_>>().len());
        assert_eq!(MethodSpec::new(OptimizerKind::Gabo).named("mine").label().unwrap(), "mine");
    }

    #[test]
    fn config_round_trips_and_defaults_seeds() {
        let text = r#"{"schema_version": 1, "task": "branin",
            "methods": [{"optimizer": "gabo", "n_generator": "never"},
                        {"optimizer": "gabo", "alpha_mode": {"mode": "constant", "value": 0.2}, "iterations": 4}]}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.seeds, (0..10).collect::<Vec<_>>());
        assert_eq!(cfg.methods[0].run_config().unwrap().n_generator, None);
        assert_eq!(cfg.methods[1].run_config().unwrap().iterations, 4);
        let again = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cases = [
            r#"{"schema_version": 2, "task": "branin", "methods": [{"optimizer": "gabo"}]}"#,
            r#"{"schema_version": 1, "task": "rosenbrock", "methods": [{"optimizer": "gabo"}]}"#,
            r#"{"schema_version": 1, "task": "branin", "methods": [{"optimizer": "cma_es"}]}"#,
            r#"{"schema_version": 1, "task": "branin", "methods": []}"#,
            r#"{"schema_version": 1, "task": "branin", "methods": [{"optimizer": "gabo"}], "colour": 1}"#,
            r#"{"schema_version": 1, "task": "branin", "methods": [{"optimizer": "gabo"}, {"optimizer": "gabo"}]}"#,
            r#"{"schema_version": 1, "task": "branin", "methods": [{"optimizer": "gabo", "alpha_mode": {"mode": "off"}}]}"#,
            r#"{"schema_version": 1, "task": "branin", "methods": [{"optimizer": "gabo"}], "seeds": [1, 1]}"#,
        ];
        for text in cases {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
        let err = ExperimentConfig::from_json(cases[2]).unwrap_err();
        assert!(err.to_string().contains("cma_es"));
    }

    #[test]
    fn experiments_are_deterministic_and_job_count_independent() {
        let cfg = tiny_config(TaskName::Branin);
        let a = run_experiment(&cfg, 1).unwrap();
        let b = run_experiment(&cfg, 3).unwrap();
        assert_eq!(a.score_rows(), b.score_rows());
        assert_eq!(a.dcov_rows(), b.dcov_rows());
        assert_eq!(a.score_rows().len(), 4);
        assert!(budget_curves_monotone(&a));
    }

    #[test]
    fn conditional_runs_average_over_conditions() {
        let result = run_experiment(&tiny_config(TaskName::Dosing), 1).unwrap();
        for o in &result.outcomes {
            assert_eq!(o.trajectories.len(), 2);
        }
    }

    #[test]
    fn execute_writes_outputs_and_refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = tiny_config(TaskName::Branin);
        execute(&cfg, &out, false, 1).unwrap();
        for f in ["scores.csv", "ranks.csv", "dcov.csv", "config.json", "curve_branin_gabo.csv", "curve_branin_bo_qei.csv"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let traj = Trajectory::load(&out.join("trajectories/gabo"), "seed1").unwrap();
        assert_eq!(traj.len(), 12);
        assert!(matches!(execute(&cfg, &out, false, 1), Err(Error::OutputExists(_))));
        let first = fs::read(out.join("scores.csv")).unwrap();
        execute(&cfg, &out, true, 1).unwrap();
        assert_eq!(first, fs::read(out.join("scores.csv")).unwrap());
    }
}
