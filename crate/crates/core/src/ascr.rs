//! Adaptive source critic regularization.
//!
//! The penalized objective is the Lagrangian
//!
//! ```text
//! L(z; a) = -f(z) + a / (1 - a) * (E_P[c] - c(z)),    0 <= a < 1
//! ```
//!
//! and optimizers maximize `-L`. The weight `a` is chosen per iteration by
//! scanning a grid: for each grid value, the Monte Carlo sample whose
//! combined gradient `(1 - a) grad f + a grad c` is smallest stands in for a
//! stationary point, and the grid value whose dual value
//! `-(1 - a) f(z*) + a (E_P[c] - c(z*))` is largest wins.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::nets::ScalarField;

/// `a / (1 - a)`.
pub fn lambda(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha / (1.0 - alpha))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("alpha {alpha} outside [0, 1)")))
    }
}

fn row(z: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, z.len()), z).expect("row view")
}

/// `L(z; alpha)` at a single point.
pub fn lagrangian<F, C>(z: &[f64], alpha: f64, surrogate: &F, critic: &C, ref_exp: f64) -> Result<f64>
where
    F: ScalarField + ?Sized,
    C: ScalarField + ?Sized,
{
    Ok(-penalized_values(row(z), alpha, surrogate, critic, ref_exp)?[0])
}

/// `grad_z L(z; alpha) = -grad f(z) - lambda grad c(z)`.
pub fn lagrangian_grad<F, C>(z: &[f64], alpha: f64, surrogate: &F, critic: &C) -> Result<Vec<f64>>
where
    F: ScalarField + ?Sized,
    C: ScalarField + ?Sized,
{
    let g = lagrangian_grads(row(z), alpha, surrogate, critic)?;
    Ok(g.row(0).to_vec())
}

/// Rows of `-L(z; alpha)`: the values optimizers maximize.
pub fn penalized_values<F, C>(
    z: ArrayView2<f64>,
    alpha: f64,
    surrogate: &F,
    critic: &C,
    ref_exp: f64,
) -> Result<Array1<f64>>
where
    F: ScalarField + ?Sized,
    C: ScalarField + ?Sized,
{
    let lam = lambda(alpha)?;
    let f = surrogate.values(z)?;
    if lam == 0.0 {
        return Ok(f);
    }
    let c = critic.values(z)?;
    Ok(f - (ref_exp - c) * lam)
}

/// Rows of `grad_z L(z; alpha)`.
pub fn lagrangian_grads<F, C>(z: ArrayView2<f64>, alpha: f64, surrogate: &F, critic: &C) -> Result<Array2<f64>>
where
    F: ScalarField + ?Sized,
    C: ScalarField + ?Sized,
{
    let lam = lambda(alpha)?;
    let (_, gf) = surrogate.values_and_grads(z)?;
    let mut out = -gf;
    if lam != 0.0 {
        let (_, gc) = critic.values_and_grads(z)?;
        out.scaled_add(-lam, &gc);
    }
    Ok(out)
}

/// How the stationarity norm threshold is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum NormThreshold {
    /// Multiple of the batch-mean surrogate gradient norm.
    Relative(f64),
    Absolute(f64),
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AscrConfig {
    pub alpha_steps: usize,
    pub search_budget: usize,
    pub threshold: NormThreshold,
}

impl Default for AscrConfig {
    fn default() -> Self {
        Self {
            alpha_steps: 200,
            search_budget: 512,
            threshold: NormThreshold::Relative(1.0),
        }
    }
}

impl AscrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_steps < 2 || self.search_budget == 0 {
            return Err(Error::InvalidParameter(
                "alpha_steps must be >= 2 and search_budget >= 1".into(),
            ));
        }
        match self.threshold {
            NormThreshold::Relative(t) | NormThreshold::Absolute(t) if !(t > 0.0) => Err(
                Error::InvalidParameter(format!("norm threshold {t} must be positive")),
            ),
            _ => Ok(()),
        }
    }

    /// `{0, 1/n, ..., (n-1)/n}`.
    pub fn grid(&self) -> Vec<f64> {
        (0..self.alpha_steps)
            .map(|k| k as f64 / self.alpha_steps as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub iteration: usize,
    pub alpha: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AscrState {
    pub current_alpha: f64,
    pub last_valid_alpha: f64,
    history: Vec<AlphaRecord>,
}

impl AscrState {
    pub fn history(&self) -> &[AlphaRecord] {
        &self.history
    }

    fn push(&mut self, record: AlphaRecord) {
        self.current_alpha = record.alpha;
        if !record.fallback {
            self.last_valid_alpha = record.alpha;
        }
        self.history.push(record);
    }
}

/// Surrogate and critic values and gradients at the Monte Carlo sample.
#[derive(Debug, Clone)]
pub struct Probe {
    pub z: Array2<f64>,
    pub f: Array1<f64>,
    pub grad_f: Array2<f64>,
    pub c: Array1<f64>,
    pub grad_c: Array2<f64>,
}

impl Probe {
    pub fn evaluate<F, C>(z: Array2<f64>, surrogate: &F, critic: &C) -> Result<Self>
    where
        F: ScalarField + ?Sized,
        C: ScalarField + ?Sized,
    {
        ensure_dim(surrogate.input_dim(), critic.input_dim())?;
        let (f, grad_f) = surrogate.values_and_grads(z.view())?;
        let (c, grad_c) = critic.values_and_grads(z.view())?;
        Ok(Self { z, f, grad_f, c, grad_c })
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Grid scan over cached gradients. Returns the winning grid value, or `None`
/// when every value is discarded by the threshold.
pub fn select_alpha(probe: &Probe, ref_exp: f64, cfg: &AscrConfig) -> Result<Option<f64>> {
    cfg.validate()?;
    let b = probe.f.len();
    if b == 0 {
        return Err(Error::Empty("probe sample"));
    }
    let tau = match cfg.threshold {
        NormThreshold::Relative(k) => {
            k * probe.grad_f.rows().into_iter().map(norm).sum::<f64>() / b as f64
        }
        NormThreshold::Absolute(t) => t,
        NormThreshold::Disabled => f64::INFINITY,
    };
    // Squared norms expand into three cached inner products per row.
    let ff: Vec<f64> = probe.grad_f.rows().into_iter().map(|r| r.dot(&r)).collect();
    let cc: Vec<f64> = probe.grad_c.rows().into_iter().map(|r| r.dot(&r)).collect();
    let fc: Vec<f64> = probe
        .grad_f
        .rows()
        .into_iter()
        .zip(probe.grad_c.rows())
        .map(|(a, c)| a.dot(&c))
        .collect();

    let mut best: Option<(f64, f64)> = None;
    for alpha in cfg.grid() {
        let (wa, wc) = (1.0 - alpha, alpha);
        let mut arg = 0;
        let mut min_sq = f64::INFINITY;
        for i in 0..b {
            let sq = (wa * wa * ff[i] + 2.0 * wa * wc * fc[i] + wc * wc * cc[i]).max(0.0);
            if sq < min_sq {
                min_sq = sq;
                arg = i;
            }
        }
        if min_sq.sqrt() > tau {
            continue;
        }
        let g = -(1.0 - alpha) * probe.f[arg] + alpha * (ref_exp - probe.c[arg]);
        if best.is_none_or(|(_, bg)| g > bg) {
            best = Some((alpha, g));
        }
    }
    Ok(best.map(|(a, _)| a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscrOutcome {
    pub alpha: f64,
    pub fallback: bool,
    /// Rows evaluated on each network.
    pub probes: usize,
}

/// Draws `search_budget` standard-normal points, scans the grid, records the
/// chosen value in `state`, and returns it. When every grid value is
/// discarded, the last valid value (initially 0) is reused and flagged.
pub fn adaptive_scr<F, C, R>(
    surrogate: &F,
    critic: &C,
    ref_exp: f64,
    cfg: &AscrConfig,
    state: &mut AscrState,
    iteration: usize,
    rng: &mut R,
) -> Result<AscrOutcome>
where
    F: ScalarField + ?Sized,
    C: ScalarField + ?Sized,
    R: rand::Rng,
{
    cfg.validate()?;
    let d = surrogate.input_dim();
    let z = Array2::from_shape_simple_fn((cfg.search_budget, d), || StandardNormal.sample(&mut *rng));
    let probe = Probe::evaluate(z, surrogate, critic)?;
    let chosen = select_alpha(&probe, ref_exp, cfg)?;
    let outcome = match chosen {
        Some(alpha) => AscrOutcome { alpha, fallback: false, probes: cfg.search_budget },
        None => {
            log::debug!("every alpha discarded at iteration {iteration}; reusing {}", state.last_valid_alpha);
            AscrOutcome { alpha: state.last_valid_alpha, fallback: true, probes: cfg.search_budget }
        }
    };
    state.push(AlphaRecord { iteration, alpha: outcome.alpha, fallback: outcome.fallback });
    Ok(outcome)
}
