//! Optimization loops over the penalized objective `-L(z; a)`.
//!
//! * `gabo`: Sobol initial batch, then batched qEI on a GP fitted to every
//!   stored `(z, y)` pair.
//! * `gaga`: `b` particles started at the best offline designs, moved by
//!   `z <- z - eta grad L(z; a)`.
//! * `bo_qei` and `grad_ascent`: the same loops on the bare surrogate.
//! * `anneal`: Metropolis chains on the bare surrogate.
//!
//! The critic is trained once on the first batch and again after every
//! iteration `t` with `t % n_generator == 0`, on the batch just evaluated.
//! Stored values are never recomputed when `a` or the critic change.
//!
//! With `alpha_mode = constant(1)` the objective becomes `c(z) - E_P[c]`,
//! the direction `-L` approaches as `a -> 1`; the surrogate is ignored.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ascr::{adaptive_scr, penalized_values, AlphaRecord, AscrConfig, AscrState};
use crate::dataset::OfflineDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::gp::{qei_acquire, AcquireConfig, Gp, GpFitConfig};
use crate::nets::{Conditioned, Mlp, ScalarField};
use crate::rng::{derive_seed, stream};
use crate::sobol::{sobol_sample, to_box};
use crate::tasks::Task;
use crate::wasserstein::{critic_architecture, reference_expectation, train_critic, CriticTrainConfig};

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gabo,
    Gaga,
    BoQei,
    GradAscent,
    Anneal,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Gabo,
        OptimizerKind::Gaga,
        OptimizerKind::BoQei,
        OptimizerKind::GradAscent,
        OptimizerKind::Anneal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Gabo => "gabo",
            OptimizerKind::Gaga => "gaga",
            OptimizerKind::BoQei => "bo_qei",
            OptimizerKind::GradAscent => "grad_ascent",
            OptimizerKind::Anneal => "anneal",
        }
    }

    /// Whether the loop optimizes the penalized objective.
    pub fn is_penalized(self) -> bool {
        matches!(self, OptimizerKind::Gabo | OptimizerKind::Gaga)
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Unknown { kind: "optimizer", name: s.to_string() })
    }
}

/// How `a` is set at each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum AlphaMode {
    Adaptive,
    /// Fixed value in `[0, 1]`; 1 selects the pure-critic objective.
    Constant(f64),
    /// No critic and no penalty.
    Off,
}

impl AlphaMode {
    pub fn label(self) -> String {
        match self {
            AlphaMode::Adaptive => "adaptive".into(),
            AlphaMode::Constant(a) => format!("alpha={a}"),
            AlphaMode::Off => "off".into(),
        }
    }
}

/// Output scaling of the trained critic used in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticScale {
    /// The clipped network as trained.
    Raw,
    /// The trained network divided by its Lipschitz upper bound.
    Lipschitz,
    /// Rescaled so its mean gradient norm over the offline designs equals
    /// the surrogate's.
    Matched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealConfig {
    /// Standard deviation of the Gaussian proposal.
    pub step: f64,
    /// Final temperature of the geometric schedule.
    pub temperature_floor: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self { step: 0.1, temperature_floor: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub optimizer: OptimizerKind,
    pub alpha_mode: AlphaMode,
    /// Number of sequential batches `T`.
    pub iterations: usize,
    /// Batch size `b`.
    pub batch_size: usize,
    /// Critic retraining period; `None` trains the critic only once.
    pub n_generator: Option<usize>,
    /// First-order step size.
    pub eta: f64,
    pub critic_scale: CriticScale,
    pub ascr: AscrConfig,
    pub critic: CriticTrainConfig,
    pub gp: GpFitConfig,
    pub acquire: AcquireConfig,
    pub anneal: AnnealConfig,
}

impl RunConfig {
    /// Defaults for `kind`: `T = 32, b = 64` for the BO loops and
    /// `T = 128, b = 16, eta = 0.05` for the others.
    pub fn new(kind: OptimizerKind) -> Self {
        let (iterations, batch_size) = match kind {
            OptimizerKind::Gabo | OptimizerKind::BoQei => (32, 64),
            _ => (128, 16),
        };
        Self {
            optimizer: kind,
            alpha_mode: if kind.is_penalized() { AlphaMode::Adaptive } else { AlphaMode::Off },
            iterations,
            batch_size,
            n_generator: Some(4),
            eta: 0.05,
            critic_scale: CriticScale::Raw,
            ascr: AscrConfig::default(),
            critic: CriticTrainConfig::default(),
            gp: GpFitConfig::default(),
            acquire: AcquireConfig::default(),
            anneal: AnnealConfig::default(),
        }
    }

    pub fn with_alpha(mut self, mode: AlphaMode) -> Self {
        self.alpha_mode = mode;
        self
    }

    pub fn total_budget(&self) -> usize {
        self.iterations * self.batch_size
    }

    pub fn is_pure_critic(&self) -> bool {
        self.alpha_mode == AlphaMode::Constant(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be positive".into());
        }
        if self.n_generator == Some(0) {
            return bad("n_generator must be positive or null".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta {} must be positive", self.eta));
        }
        match (self.optimizer.is_penalized(), self.alpha_mode) {
            (true, AlphaMode::Off) => {
                return bad(format!("{} needs a penalty; use its unpenalized parent instead", self.optimizer))
            }
            (false, AlphaMode::Adaptive | AlphaMode::Constant(_)) => {
                return bad(format!("{} runs on the bare surrogate; alpha_mode must be off", self.optimizer))
            }
            (_, AlphaMode::Constant(a)) if !(0.0..=1.0).contains(&a) => {
                return bad(format!("constant alpha {a} outside [0, 1]"))
            }
            _ => {}
        }
        if self.optimizer == OptimizerKind::Anneal
            && !(self.anneal.step > 0.0 && self.anneal.temperature_floor > 0.0)
        {
            return bad("anneal step and temperature_floor must be positive".into());
        }
        if self.alpha_mode == AlphaMode::Adaptive {
            self.ascr.validate()?;
        }
        if self.alpha_mode != AlphaMode::Off {
            self.critic.validate()?;
        }
        if matches!(self.optimizer, OptimizerKind::Gabo | OptimizerKind::BoQei)
            && self.acquire.candidate_pool < self.batch_size
        {
            return bad("candidate_pool must be at least batch_size".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Problem
// ---------------------------------------------------------------------------

/// What an optimizer sees: a surrogate over the full optimization space,
/// the offline dataset, and optionally a condition that pins some
/// coordinates to a template.
pub struct Problem<'a> {
    surrogate: &'a dyn ScalarField,
    dataset: &'a OfflineDataset,
    template: Array1<f64>,
    free: Vec<usize>,
}

impl<'a> Problem<'a> {
    pub fn new(surrogate: &'a dyn ScalarField, dataset: &'a OfflineDataset) -> Result<Self> {
        let d = dataset.dim();
        Self::conditional(surrogate, dataset, Array1::zeros(d), (0..d).collect())
    }

    /// Optimizes only the `free` coordinates; the rest stay at `template`.
    pub fn conditional(
        surrogate: &'a dyn ScalarField,
        dataset: &'a OfflineDataset,
        template: Array1<f64>,
        free: Vec<usize>,
    ) -> Result<Self> {
        ensure_dim(dataset.dim(), surrogate.input_dim())?;
        ensure_dim(dataset.dim(), template.len())?;
        Conditioned::new(surrogate, template.clone(), free.clone())?;
        Ok(Self { surrogate, dataset, template, free })
    }

    /// The unconditional problem of `task`.
    pub fn for_task(task: &'a Task, surrogate: &'a dyn ScalarField) -> Result<Self> {
        Self::new(surrogate, task.dataset())
    }

    /// The problem of evaluation condition `i` of a conditional task.
    pub fn for_condition(task: &'a Task, surrogate: &'a dyn ScalarField, i: usize) -> Result<Self> {
        Self::conditional(surrogate, task.dataset(), task.condition_template(i)?, task.free_dims())
    }

    pub fn dim(&self) -> usize {
        self.template.len()
    }

    pub fn free_dims(&self) -> &[usize] {
        &self.free
    }

    pub fn template(&self) -> &Array1<f64> {
        &self.template
    }

    pub fn dataset(&self) -> &OfflineDataset {
        self.dataset
    }

    fn view<'f, F: ScalarField + ?Sized>(&self, field: &'f F) -> Conditioned<'f, F> {
        Conditioned::new(field, self.template.clone(), self.free.clone()).expect("validated on construction")
    }

    fn embed(&self, z: ArrayView2<f64>) -> Array2<f64> {
        self.view(self.surrogate).embed(z)
    }

    /// Free coordinates of the `k` best offline designs.
    fn top_offline(&self, k: usize) -> Result<Array2<f64>> {
        if k > self.dataset.len() {
            return Err(Error::InvalidParameter(format!(
                "batch size {k} exceeds the {} offline designs",
                self.dataset.len()
            )));
        }
        let idx = self.dataset.top_k_indices(k);
        Ok(self.dataset.designs().select(Axis(0), &idx).select(Axis(1), &self.free))
    }
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    /// 1-based batch number.
    pub iteration: usize,
    /// Position within the batch.
    pub index: usize,
    /// Full optimization-space point.
    pub z: Vec<f64>,
    /// Objective value at evaluation time.
    pub y_penalized: f64,
    pub alpha_at_eval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticEvent {
    pub iteration: usize,
    pub steps: usize,
    pub best_estimate: f64,
    pub lipschitz_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub optimizer: OptimizerKind,
    pub alpha_mode: AlphaMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub records: Vec<Record>,
    pub critic_events: Vec<CriticEvent>,
    pub alpha_history: Vec<AlphaRecord>,
    /// Objective evaluations of proposed candidates.
    pub surrogate_queries: usize,
    /// Rows at which gradients were taken to move particles.
    pub gradient_evaluations: usize,
    /// Rows probed by the adaptive weight search.
    pub probe_evaluations: usize,
}

/// Everything in a trajectory except the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySummary {
    pub schema_version: u32,
    pub optimizer: OptimizerKind,
    pub alpha_mode: AlphaMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub num_records: usize,
    pub best_y: f64,
    pub surrogate_queries: usize,
    pub gradient_evaluations: usize,
    pub probe_evaluations: usize,
    pub critic_events: Vec<CriticEvent>,
    pub alpha_history: Vec<AlphaRecord>,
}

impl Trajectory {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            optimizer: cfg.optimizer,
            alpha_mode: cfg.alpha_mode,
            iterations: cfg.iterations,
            batch_size: cfg.batch_size,
            records: Vec::with_capacity(cfg.total_budget()),
            critic_events: Vec::new(),
            alpha_history: Vec::new(),
            surrogate_queries: 0,
            gradient_evaluations: 0,
            probe_evaluations: 0,
        }
    }

    fn push_batch(&mut self, iteration: usize, z: ArrayView2<f64>, y: &Array1<f64>, alpha: f64) {
        for (i, (row, &v)) in z.rows().into_iter().zip(y).enumerate() {
            self.records.push(Record {
                iteration,
                index: i,
                z: row.to_vec(),
                y_penalized: v,
                alpha_at_eval: alpha,
            });
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn best_y(&self) -> f64 {
        self.records.iter().map(|r| r.y_penalized).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Number of distinct weights in the history.
    pub fn distinct_alphas(&self) -> usize {
        let mut a: Vec<f64> = self.alpha_history.iter().map(|r| r.alpha).collect();
        a.sort_by(f64::total_cmp);
        a.dedup();
        a.len()
    }

    pub fn summary(&self) -> TrajectorySummary {
        TrajectorySummary {
            schema_version: TRAJECTORY_SCHEMA_VERSION,
            optimizer: self.optimizer,
            alpha_mode: self.alpha_mode,
            iterations: self.iterations,
            batch_size: self.batch_size,
            num_records: self.records.len(),
            best_y: self.best_y(),
            surrogate_queries: self.surrogate_queries,
            gradient_evaluations: self.gradient_evaluations,
            probe_evaluations: self.probe_evaluations,
            critic_events: self.critic_events.clone(),
            alpha_history: self.alpha_history.clone(),
        }
    }

    /// Writes `<stem>.jsonl` (one record per line) and `<stem>.summary.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(dir.join(format!("{stem}.jsonl")))?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        fs::write(
            dir.join(format!("{stem}.summary.json")),
            serde_json::to_string_pretty(&self.summary())?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let summary: TrajectorySummary =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.summary.json")))?)?;
        if summary.schema_version != TRAJECTORY_SCHEMA_VERSION {
            return Err(Error::InvalidParameter(format!(
                "trajectory schema version {} (expected {TRAJECTORY_SCHEMA_VERSION})",
                summary.schema_version
            )));
        }
        let file = BufReader::new(fs::File::open(dir.join(format!("{stem}.jsonl")))?);
        let mut records = Vec::with_capacity(summary.num_records);
        for line in file.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        ensure_dim(summary.num_records, records.len())?;
        Ok(Self {
            optimizer: summary.optimizer,
            alpha_mode: summary.alpha_mode,
            iterations: summary.iterations,
            batch_size: summary.batch_size,
            records,
            critic_events: summary.critic_events,
            alpha_history: summary.alpha_history,
            surrogate_queries: summary.surrogate_queries,
            gradient_evaluations: summary.gradient_evaluations,
            probe_evaluations: summary.probe_evaluations,
        })
    }
}

// ---------------------------------------------------------------------------
// Critic and objective
// ---------------------------------------------------------------------------

/// Produces the critic used by the objective from an offline sample `p` and a
/// generated sample `q`, both full-dimensional.
pub(crate) trait CriticSource {
    fn fit(&mut self, p: ArrayView2<f64>, q: ArrayView2<f64>, iteration: usize) -> Result<(Mlp, CriticEvent)>;
}

/// Weight-clipped critic, warm-started from its previous parameters.
struct ClippedCritic {
    raw: Mlp,
    cfg: CriticTrainConfig,
    scale: CriticScale,
    /// Mean surrogate gradient norm over the offline designs.
    surrogate_slope: f64,
    rng: ChaCha8Rng,
}

fn mean_grad_norm(field: &dyn ScalarField, z: ArrayView2<f64>) -> Result<f64> {
    let (_, g) = field.values_and_grads(z)?;
    Ok(g.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / z.nrows().max(1) as f64)
}

impl ClippedCritic {
    fn new(problem: &Problem, cfg: &RunConfig, seed: u64) -> Result<Self> {
        // The pure-critic objective has no surrogate term to match against.
        let scale = match cfg.critic_scale {
            CriticScale::Matched if cfg.is_pure_critic() => CriticScale::Lipschitz,
            s => s,
        };
        let surrogate_slope = match scale {
            CriticScale::Matched => mean_grad_norm(problem.surrogate, problem.dataset.designs())?,
            _ => 0.0,
        };
        Ok(Self {
            raw: Mlp::new(&critic_architecture(problem.dim()), derive_seed(seed, "critic-init"))?,
            cfg: cfg.critic.clone(),
            scale,
            surrogate_slope,
            rng: stream(seed, "critic"),
        })
    }
}

impl CriticSource for ClippedCritic {
    fn fit(&mut self, p: ArrayView2<f64>, q: ArrayView2<f64>, iteration: usize) -> Result<(Mlp, CriticEvent)> {
        let trained = train_critic(&self.raw, p, q, &self.cfg, &mut self.rng)?;
        self.raw = trained.critic;
        let bound = self.raw.lipschitz_upper_bound();
        let mut effective = self.raw.clone();
        match self.scale {
            CriticScale::Raw => {}
            CriticScale::Lipschitz => {
                if bound > 0.0 {
                    effective.scale_output(1.0 / bound);
                }
            }
            CriticScale::Matched => {
                let slope = mean_grad_norm(&self.raw, p)?;
                if slope > 0.0 {
                    effective.scale_output(self.surrogate_slope / slope);
                }
            }
        }
        log::debug!(
            "critic at t={iteration}: {} steps, dual estimate {:.3e}, bound {bound:.3e}",
            trained.steps,
            trained.best_estimate
        );
        Ok((
            effective,
            CriticEvent { iteration, steps: trained.steps, best_estimate: trained.best_estimate, lipschitz_bound: bound },
        ))
    }
}

/// The time-varying objective of one run.
struct Objective<'p, 'a> {
    problem: &'p Problem<'a>,
    mode: AlphaMode,
    ascr: AscrConfig,
    critic: Option<Mlp>,
    ref_exp: f64,
    state: AscrState,
    ascr_rng: ChaCha8Rng,
    alpha: f64,
}

impl<'p, 'a> Objective<'p, 'a> {
    fn new(problem: &'p Problem<'a>, cfg: &RunConfig, seed: u64) -> Self {
        Self {
            problem,
            mode: cfg.alpha_mode,
            ascr: cfg.ascr.clone(),
            critic: None,
            ref_exp: 0.0,
            state: AscrState::default(),
            ascr_rng: stream(seed, "ascr"),
            alpha: 0.0,
        }
    }

    fn penalized(&self) -> bool {
        self.mode != AlphaMode::Off
    }

    fn retrain(
        &mut self,
        source: &mut dyn CriticSource,
        q_free: ArrayView2<f64>,
        iteration: usize,
        traj: &mut Trajectory,
    ) -> Result<()> {
        let q = self.problem.embed(q_free);
        let (critic, event) = source.fit(self.problem.dataset.designs(), q.view(), iteration)?;
        self.ref_exp = reference_expectation(&critic, self.problem.dataset.designs())?;
        self.critic = Some(critic);
        traj.critic_events.push(event);
        Ok(())
    }

    fn update_alpha(&mut self, iteration: usize, traj: &mut Trajectory) -> Result<f64> {
        match self.mode {
            AlphaMode::Adaptive => {
                let critic = self.critic.as_ref().expect("critic trained before weight search");
                let f = self.problem.view(self.problem.surrogate);
                let c = self.problem.view(critic);
                let out = adaptive_scr(&f, &c, self.ref_exp, &self.ascr, &mut self.state, iteration, &mut self.ascr_rng)?;
                traj.probe_evaluations += out.probes;
                traj.alpha_history.push(*self.state.history().last().expect("just pushed"));
                self.alpha = out.alpha;
            }
            AlphaMode::Constant(a) => {
                self.alpha = a;
                traj.alpha_history.push(AlphaRecord { iteration, alpha: a, fallback: false });
            }
            AlphaMode::Off => self.alpha = 0.0,
        }
        Ok(self.alpha)
    }

    fn pure_critic(&self) -> bool {
        self.alpha == 1.0
    }

    /// Stored objective values of free-coordinate rows.
    fn values(&self, z: ArrayView2<f64>, traj: &mut Trajectory) -> Result<Array1<f64>> {
        traj.surrogate_queries += z.nrows();
        let f = self.problem.view(self.problem.surrogate);
        match &self.critic {
            Some(critic) if self.penalized() => {
                let c = self.problem.view(critic);
                if self.pure_critic() {
                    Ok(c.values(z)? - self.ref_exp)
                } else {
                    penalized_values(z, self.alpha, &f, &c, self.ref_exp)
                }
            }
            _ => f.values(z),
        }
    }

    /// `grad L` over the free coordinates.
    fn lagrangian_grads(&self, z: ArrayView2<f64>, traj: &mut Trajectory) -> Result<Array2<f64>> {
        traj.gradient_evaluations += z.nrows();
        let f = self.problem.view(self.problem.surrogate);
        let critic = self.critic.as_ref().filter(|_| self.penalized());
        if let Some(critic) = critic {
            let c = self.problem.view(critic);
            if self.pure_critic() {
                return Ok(-c.values_and_grads(z)?.1);
            }
            return crate::ascr::lagrangian_grads(z, self.alpha, &f, &c);
        }
        Ok(-f.values_and_grads(z)?.1)
    }
}

fn retrain_due(n_generator: Option<usize>, t: usize) -> bool {
    n_generator.is_some_and(|n| t.is_multiple_of(n))
}

// ---------------------------------------------------------------------------
// Loops
// ---------------------------------------------------------------------------

fn check_kind(cfg: &RunConfig, allowed: &[OptimizerKind]) -> Result<()> {
    cfg.validate()?;
    if allowed.contains(&cfg.optimizer) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("config is for {}, not {allowed:?}", cfg.optimizer)))
    }
}

/// Runs the loop selected by `cfg.optimizer`.
pub fn run(problem: &Problem, cfg: &RunConfig, seed: u64) -> Result<Trajectory> {
    cfg.validate()?;
    match cfg.optimizer {
        OptimizerKind::Gabo => run_gabo(problem, cfg, seed),
        OptimizerKind::Gaga => run_gaga(problem, cfg, seed),
        OptimizerKind::BoQei => run_bo_qei(problem, cfg, seed),
        OptimizerKind::GradAscent => run_grad_ascent(problem, cfg, seed),
        OptimizerKind::Anneal => run_anneal(problem, cfg, seed),
    }
}

pub fn run_gabo(problem: &Problem, cfg: &RunConfig, seed: u64) -> Result<Trajectory> {
    check_kind(cfg, &[OptimizerKind::Gabo])?;
    let mut critic = ClippedCritic::new(problem, cfg, seed)?;
    bo_loop(problem, cfg, seed, Some(&mut critic))
}

pub fn run_bo_qei(problem: &Problem, cfg: &RunConfig, seed: u64) -> Result<Trajectory> {
    check_kind(cfg, &[OptimizerKind::BoQei])?;
    bo_loop(problem, cfg, seed, None)
}

pub fn run_gaga(problem: &Problem, cfg: &RunConfig, seed: u64) -> Result<Trajectory> {
    check_kind(cfg, &[OptimizerKind::Gaga])?;
    let mut critic = ClippedCritic::new(problem, cfg, seed)?;
    gradient_loop(problem, cfg, seed, Some(&mut critic))
}

pub fn run_grad_ascent(problem: &Problem, cfg: &RunConfig, seed: u64) -> Result<Trajectory> {
    check_kind(cfg, &[OptimizerKind::GradAscent])?;
    gradient_loop(problem, cfg, seed, None)
}

/// The gabo or gaga loop on `c(z) - E_P[c]` alone.
pub fn run_pure_critic(problem: &Problem, cfg: &RunConfig, seed: u64) -> Result<Trajectory> {
    if !cfg.is_pure_critic() {
        return Err(Error::InvalidParameter("pure-critic mode needs alpha_mode constant(1)".into()));
    }
    match cfg.optimizer {
        OptimizerKind::Gabo => run_gabo(problem, cfg, seed),
        OptimizerKind::Gaga => run_gaga(problem, cfg, seed),
        other => Err(Error::InvalidParameter(format!("{other} has no pure-critic mode"))),
    }
}

pub(crate) fn bo_loop(
    problem: &Problem,
    cfg: &RunConfig,
    seed: u64,
    mut critic: Option<&mut dyn CriticSource>,
) -> Result<Trajectory> {
    let (t_max, b) = (cfg.iterations, cfg.batch_size);
    let d = problem.free.len();
    let mut traj = Trajectory::new(cfg);
    let mut obj = Objective::new(problem, cfg, seed);
    let mut acquire_rng = stream(seed, "acquire");
    let [lo, hi] = cfg.acquire.bounds;

    let z = to_box(sobol_sample(b, d, Some(derive_seed(seed, "sobol-init")))?, lo, hi);
    if let Some(source) = critic.as_deref_mut() {
        obj.retrain(source, z.view(), 1, &mut traj)?;
    }
    let alpha = obj.update_alpha(1, &mut traj)?;
    let y = obj.values(z.view(), &mut traj)?;
    traj.push_batch(1, problem.embed(z.view()).view(), &y, alpha);
    let mut zs = z;
    let mut ys = y;

    for t in 2..=t_max {
        let gp = Gp::fit(zs.view(), ys.view(), &cfg.gp)?;
        let incumbent = ys.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z = qei_acquire(&gp, incumbent, b, &cfg.acquire, &mut acquire_rng)?;
        let alpha = obj.update_alpha(t, &mut traj)?;
        let y = obj.values(z.view(), &mut traj)?;
        traj.push_batch(t, problem.embed(z.view()).view(), &y, alpha);
        if retrain_due(cfg.n_generator, t) {
            if let Some(source) = critic.as_deref_mut() {
                obj.retrain(source, z.view(), t, &mut traj)?;
            }
        }
        zs.append(Axis(0), z.view())?;
        ys.append(Axis(0), y.view())?;
    }
    Ok(traj)
}

pub(crate) fn gradient_loop(
    problem: &Problem,
    cfg: &RunConfig,
    seed: u64,
    mut critic: Option<&mut dyn CriticSource>,
) -> Result<Trajectory> {
    let mut traj = Trajectory::new(cfg);
    let mut obj = Objective::new(problem, cfg, seed);

    let mut z = problem.top_offline(cfg.batch_size)?;
    if let Some(source) = critic.as_deref_mut() {
        obj.retrain(source, z.view(), 1, &mut traj)?;
    }
    let alpha = obj.update_alpha(1, &mut traj)?;
    let y = obj.values(z.view(), &mut traj)?;
    traj.push_batch(1, problem.embed(z.view()).view(), &y, alpha);

    for t in 2..=cfg.iterations {
        let g = obj.lagrangian_grads(z.view(), &mut traj)?;
        z.scaled_add(-cfg.eta, &g);
        let alpha = obj.update_alpha(t, &mut traj)?;
        let y = obj.values(z.view(), &mut traj)?;
        traj.push_batch(t, problem.embed(z.view()).view(), &y, alpha);
        if retrain_due(cfg.n_generator, t) {
            if let Some(source) = critic.as_deref_mut() {
                obj.retrain(source, z.view(), t, &mut traj)?;
            }
        }
    }
    Ok(traj)
}

/// Metropolis rule for a maximization step of size `delta` at `temperature`.
pub fn metropolis_accept(delta: f64, temperature: f64, u: f64) -> bool {
    delta >= 0.0 || u < (delta / temperature).exp()
}

/// Geometric schedule from `start` at `t = 1` to `floor` at `t = t_max`.
pub fn anneal_temperature(start: f64, floor: f64, t: usize, t_max: usize) -> f64 {
    if start <= floor || t_max <= 1 {
        return floor;
    }
    let frac = (t - 1) as f64 / (t_max - 1) as f64;
    start * (floor / start).powf(frac)
}

/// `b` Metropolis chains started at the best offline designs. The first
/// batch records the starting points; each later batch records one Gaussian
/// proposal per chain. The start temperature is the standard deviation of the
/// standardized offline scores.
pub fn run_anneal(problem: &Problem, cfg: &RunConfig, seed: u64) -> Result<Trajectory> {
    check_kind(cfg, &[OptimizerKind::Anneal])?;
    let mut traj = Trajectory::new(cfg);
    let obj = Objective::new(problem, cfg, seed);
    let mut rng = stream(seed, "anneal");
    let start = problem.dataset.standardized_scores().std(0.0);

    let mut z = problem.top_offline(cfg.batch_size)?;
    let mut y = obj.values(z.view(), &mut traj)?;
    traj.push_batch(1, problem.embed(z.view()).view(), &y, 0.0);
    for t in 2..=cfg.iterations {
        let temp = anneal_temperature(start, cfg.anneal.temperature_floor, t, cfg.iterations);
        let mut proposal = z.clone();
        proposal.mapv_inplace(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + cfg.anneal.step * e
        });
        let y_new = obj.values(proposal.view(), &mut traj)?;
        traj.push_batch(t, problem.embed(proposal.view()).view(), &y_new, 0.0);
        for i in 0..z.nrows() {
            if metropolis_accept(y_new[i] - y[i], temp, rng.random::<f64>()) {
                z.row_mut(i).assign(&proposal.row(i));
                y[i] = y_new[i];
            }
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::GpFitConfig;
    use ndarray::array;
    use rand::SeedableRng;

    /// `f(z) = -|z|^2`.
    struct NegSquare(usize);

    impl ScalarField for NegSquare {
        fn input_dim(&self) -> usize {
            self.0
        }

        fn values(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
            Ok(z.rows().into_iter().map(|r| -r.dot(&r)).collect())
        }

        fn values_and_grads(&self, z: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
            Ok((self.values(z)?, z.mapv(|v| -2.0 * v)))
        }
    }

    struct ZeroCritic;

    impl CriticSource for ZeroCritic {
        fn fit(&mut self, p: ArrayView2<f64>, _q: ArrayView2<f64>, iteration: usize) -> Result<(Mlp, CriticEvent)> {
            let critic = Mlp::zeros(&critic_architecture(p.ncols()))?;
            Ok((critic, CriticEvent { iteration, steps: 0, best_estimate: 0.0, lipschitz_bound: 0.0 }))
        }
    }

    fn ring_dataset(n: usize, d: usize, seed: u64) -> OfflineDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, d), || {
            let e: f64 = StandardNormal.sample(&mut rng);
            1.5 + e
        });
        let y: Array1<f64> = x.rows().into_iter().map(|r| -r.dot(&r)).collect();
        OfflineDataset::new(x.clone(), x, y).unwrap()
    }

    fn small(kind: OptimizerKind) -> RunConfig {
        let mut cfg = RunConfig::new(kind);
        cfg.iterations = 6;
        cfg.batch_size = 4;
        cfg.n_generator = Some(2);
        cfg.ascr.search_budget = 64;
        cfg.critic.max_steps = 200;
        cfg.gp = GpFitConfig { restarts: 2, iterations: 10, ..GpFitConfig::default() };
        cfg.acquire.candidate_pool = 256;
        cfg.acquire.mc_samples = 32;
        cfg
    }

    fn surrogate(d: usize) -> Mlp {
        Mlp::new(&[d, 16, 16, 1], 5).unwrap()
    }

    #[test]
    fn optimizer_names_round_trip() {
        for k in OptimizerKind::ALL {
            assert_eq!(k.as_str().parse::<OptimizerKind>().unwrap(), k);
        }
        assert!(matches!("bogus".parse::<OptimizerKind>(), Err(Error::Unknown { .. })));
    }

    #[test]
    fn config_defaults_and_validation() {
        let gabo = RunConfig::new(OptimizerKind::Gabo);
        assert_eq!((gabo.iterations, gabo.batch_size, gabo.total_budget()), (32, 64, 2048));
        let gaga = RunConfig::new(OptimizerKind::Gaga);
        assert_eq!((gaga.iterations, gaga.batch_size, gaga.eta), (128, 16, 0.05));
        assert_eq!(gaga.n_generator, Some(4));
        assert!(RunConfig::new(OptimizerKind::BoQei).with_alpha(AlphaMode::Adaptive).validate().is_err());
        assert!(gabo.clone().with_alpha(AlphaMode::Off).validate().is_err());
        assert!(gabo.clone().with_alpha(AlphaMode::Constant(1.5)).validate().is_err());
        assert!(gabo.with_alpha(AlphaMode::Constant(1.0)).validate().is_ok());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = RunConfig::new(OptimizerKind::Gabo).with_alpha(AlphaMode::Constant(0.2));
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains(r#""alpha_mode":{"mode":"constant","value":0.2}"#));
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn bo_loop_budget_and_determinism() {
        let data = ring_dataset(64, 2, 1);
        let net = surrogate(2);
        let problem = Problem::new(&net, &data).unwrap();
        let cfg = small(OptimizerKind::Gabo);
        let a = run_gabo(&problem, &cfg, 3).unwrap();
        assert_eq!(a.len(), cfg.total_budget());
        assert_eq!(a.surrogate_queries, cfg.total_budget());
        assert_eq!(a.probe_evaluations, cfg.iterations * cfg.ascr.search_budget);
        // Initial training plus t = 2, 4, 6.
        let iters: Vec<usize> = a.critic_events.iter().map(|e| e.iteration).collect();
        assert_eq!(iters, vec![1, 2, 4, 6]);
        assert!(a.records.iter().all(|r| (0.0..=1.0).contains(&r.alpha_at_eval)));
        assert_eq!(a, run_gabo(&problem, &cfg, 3).unwrap());
        assert_ne!(a.records, run_gabo(&problem, &cfg, 4).unwrap().records);
    }

    #[test]
    fn single_critic_event_without_retraining() {
        let data = ring_dataset(64, 2, 1);
        let net = surrogate(2);
        let problem = Problem::new(&net, &data).unwrap();
        for kind in [OptimizerKind::Gabo, OptimizerKind::Gaga] {
            let mut cfg = small(kind);
            cfg.n_generator = None;
            assert_eq!(run(&problem, &cfg, 0).unwrap().critic_events.len(), 1);
        }
    }

    #[test]
    fn zero_weight_reduces_to_parents() {
        let data = ring_dataset(64, 2, 2);
        let net = surrogate(2);
        let problem = Problem::new(&net, &data).unwrap();
        for (kind, parent) in [
            (OptimizerKind::Gabo, OptimizerKind::BoQei),
            (OptimizerKind::Gaga, OptimizerKind::GradAscent),
        ] {
            let a = run(&problem, &small(kind).with_alpha(AlphaMode::Constant(0.0)), 9).unwrap();
            let b = run(&problem, &small(parent), 9).unwrap();
            assert_eq!(a.records, b.records);
        }
    }

    #[test]
    fn pure_critic_ignores_the_surrogate() {
        let data = ring_dataset(64, 2, 3);
        let (n1, n2) = (surrogate(2), Mlp::new(&[2, 8, 1], 77).unwrap());
        let cfg = small(OptimizerKind::Gabo).with_alpha(AlphaMode::Constant(1.0));
        let a = run_pure_critic(&Problem::new(&n1, &data).unwrap(), &cfg, 1).unwrap();
        let b = run_pure_critic(&Problem::new(&n2, &data).unwrap(), &cfg, 1).unwrap();
        assert_eq!(a.records, b.records);
        assert!(run_pure_critic(&Problem::new(&n1, &data).unwrap(), &small(OptimizerKind::Gabo), 1).is_err());
    }

    #[test]
    fn pure_critic_with_zero_critic_scores_zero() {
        let data = ring_dataset(64, 2, 3);
        let net = surrogate(2);
        let problem = Problem::new(&net, &data).unwrap();
        let cfg = small(OptimizerKind::Gabo).with_alpha(AlphaMode::Constant(1.0));
        let traj = bo_loop(&problem, &cfg, 0, Some(&mut ZeroCritic)).unwrap();
        assert!(traj.records.iter().all(|r| r.y_penalized == 0.0));
    }

    #[test]
    fn gradient_particles_contract_on_a_quadratic() {
        let data = ring_dataset(64, 3, 4);
        let f = NegSquare(3);
        let problem = Problem::new(&f, &data).unwrap();
        let mut cfg = small(OptimizerKind::Gaga);
        cfg.iterations = 20;
        let traj = gradient_loop(&problem, &cfg, 0, Some(&mut ZeroCritic)).unwrap();
        let b = cfg.batch_size;
        for i in 0..b {
            let norms: Vec<f64> = (0..cfg.iterations)
                .map(|t| {
                    let r = &traj.records[t * b + i];
                    assert_eq!((r.iteration, r.index), (t + 1, i));
                    r.z.iter().map(|v| v * v).sum::<f64>().sqrt()
                })
                .collect();
            for w in norms.windows(2) {
                // Closed form: z <- z - eta * 2 z.
                assert!((w[1] - (1.0 - 2.0 * cfg.eta) * w[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaga_starts_at_top_offline_designs() {
        let data = ring_dataset(64, 2, 5);
        let net = surrogate(2);
        let problem = Problem::new(&net, &data).unwrap();
        let cfg = small(OptimizerKind::GradAscent);
        let traj = run(&problem, &cfg, 0).unwrap();
        for (r, &j) in traj.records.iter().zip(&data.top_k_indices(cfg.batch_size)) {
            assert_eq!(r.z, data.designs().row(j).to_vec());
        }
        let mut too_big = cfg.clone();
        too_big.batch_size = 65;
        assert!(run(&problem, &too_big, 0).is_err());
    }

    #[test]
    fn anneal_finds_the_quadratic_optimum() {
        let data = ring_dataset(256, 2, 6);
        let f = NegSquare(2);
        let problem = Problem::new(&f, &data).unwrap();
        let cfg = RunConfig::new(OptimizerKind::Anneal);
        let traj = run(&problem, &cfg, 0).unwrap();
        assert_eq!(traj.len(), 2048);
        let best = traj.records.iter().max_by(|a, b| a.y_penalized.total_cmp(&b.y_penalized)).unwrap();
        let norm = best.z.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 0.3, "best norm {norm}");
        assert_eq!(traj, run(&problem, &cfg, 0).unwrap());
    }

    #[test]
    fn zero_temperature_accepts_only_improvements() {
        assert!(metropolis_accept(0.0, 0.0, 0.999));
        assert!(metropolis_accept(1e-9, 0.0, 0.999));
        assert!(!metropolis_accept(-1e-12, 0.0, 0.0));
        assert_eq!(anneal_temperature(2.0, 1e-3, 1, 10), 2.0);
        assert!((anneal_temperature(2.0, 1e-3, 10, 10) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn conditional_runs_keep_conditions() {
        let data = ring_dataset(64, 3, 7);
        let net = surrogate(3);
        let template = array![0.7, -0.2, 0.0];
        let problem = Problem::conditional(&net, &data, template.clone(), vec![2]).unwrap();
        for kind in [OptimizerKind::Gabo, OptimizerKind::Gaga, OptimizerKind::Anneal] {
            let traj = run(&problem, &small(kind), 0).unwrap();
            for r in &traj.records {
                assert_eq!(&r.z[..2], &template.as_slice().unwrap()[..2]);
            }
        }
    }

    #[test]
    fn trajectory_files_round_trip() {
        let data = ring_dataset(64, 2, 8);
        let net = surrogate(2);
        let problem = Problem::new(&net, &data).unwrap();
        let traj = run(&problem, &small(OptimizerKind::Gaga), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        traj.save(dir.path(), "run").unwrap();
        assert_eq!(Trajectory::load(dir.path(), "run").unwrap(), traj);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn budget_is_exact_and_weights_stay_in_range(
                kind in prop::sample::select(vec![OptimizerKind::Gaga, OptimizerKind::GradAscent, OptimizerKind::Anneal]),
                iterations in 1usize..6,
                batch in 1usize..5,
                seed in any::<u64>(),
            ) {
                let data = ring_dataset(32, 2, 3);
                let net = surrogate(2);
                let mut cfg = small(kind);
                cfg.iterations = iterations;
                cfg.batch_size = batch;
                let traj = run(&Problem::new(&net, &data).unwrap(), &cfg, seed).unwrap();
                prop_assert_eq!(traj.len(), iterations * batch);
                prop_assert_eq!(traj.surrogate_queries, cfg.total_budget());
                prop_assert!(traj.records.iter().all(|r| (0.0..=1.0).contains(&r.alpha_at_eval)));
                prop_assert_eq!(&traj, &run(&Problem::new(&net, &data).unwrap(), &cfg, seed).unwrap());
            }

            #[test]
            fn conditions_are_never_mutated(
                kind in prop::sample::select(vec![OptimizerKind::Gaga, OptimizerKind::Anneal]),
                pinned in prop::collection::vec(-2.0f64..2.0, 2),
                seed in any::<u64>(),
            ) {
                let data = ring_dataset(32, 3, 4);
                let net = surrogate(3);
                let template = array![pinned[0], 0.0, pinned[1]];
                let problem = Problem::conditional(&net, &data, template.clone(), vec![1]).unwrap();
                let mut cfg = small(kind);
                cfg.iterations = 3;
                let traj = run(&problem, &cfg, seed).unwrap();
                let mask = [true, false, true];
                prop_assert!(traj.records.iter().all(|r| crate::tasks::conditions_untouched(
                    ndarray::aview1(&r.z), template.view(), &mask)));
            }
        }
    }
}
