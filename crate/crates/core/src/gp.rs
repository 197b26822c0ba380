//! Gaussian process regression and Monte Carlo batch expected improvement.
//!
//! Kernel: Matérn-5/2 with one shared lengthscale,
//! `k(r) = s2 (1 + u + u^2/3) exp(-u)`, `u = sqrt(5) r / l`, plus Gaussian
//! observation noise. Targets are standardized internally; posterior means
//! and covariances are reported in the original units.
//!
//! Hyperparameters maximize the log marginal likelihood by projected
//! gradient ascent in log space from 8 starting points (the defaults and
//! seven Sobol points in the bounding box). To bound cost, the fit uses at
//! most `fit_points` observations and the posterior conditions on at most
//! `max_points`; both subsets keep the best half by target value and fill the
//! rest with the most recent observations.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::sobol::{sobol_sample, to_box, Sobol};

const SQRT5: f64 = 2.236_067_977_499_79;
/// Absolute floor on the noise variance (standardized units).
pub const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lengthscale: f64,
    pub outputscale: f64,
    pub noise: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            lengthscale: 1.0,
            outputscale: 1.0,
            noise: 1e-3,
        }
    }
}

impl Hyperparameters {
    fn to_log(self) -> [f64; 3] {
        [self.lengthscale.ln(), self.outputscale.ln(), self.noise.ln()]
    }

    fn from_log(t: [f64; 3]) -> Self {
        Self {
            lengthscale: t[0].exp(),
            outputscale: t[1].exp(),
            noise: t[2].exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpFitConfig {
    pub restarts: usize,
    pub iterations: usize,
    pub fit_points: usize,
    pub max_points: usize,
    /// Box bounds `[lo, hi]` for lengthscale, outputscale and noise.
    pub lengthscale_bounds: [f64; 2],
    pub outputscale_bounds: [f64; 2],
    pub noise_bounds: [f64; 2],
}

impl Default for GpFitConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            iterations: 40,
            fit_points: 64,
            max_points: 256,
            lengthscale_bounds: [1e-2, 20.0],
            outputscale_bounds: [5e-2, 20.0],
            noise_bounds: [1e-6, 1.0],
        }
    }
}

impl GpFitConfig {
    fn log_bounds(&self) -> [[f64; 2]; 3] {
        let lg = |b: [f64; 2]| [b[0].ln(), b[1].ln()];
        [
            lg(self.lengthscale_bounds),
            lg(self.outputscale_bounds),
            lg(self.noise_bounds),
        ]
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn matern(r: f64, h: &Hyperparameters) -> f64 {
    let u = SQRT5 * r / h.lengthscale;
    h.outputscale * (1.0 + u + u * u / 3.0) * (-u).exp()
}

fn cross_kernel(a: ArrayView2<f64>, b: ArrayView2<f64>, h: &Hyperparameters) -> Array2<f64> {
    let mut k = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            k[[i, j]] = matern(sq_dist(ra, rb).sqrt(), h);
        }
    }
    k
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Cholesky of `K + noise I`, adding jitter tenfold on failure.
fn robust_cholesky(k: &DMatrix<f64>, noise: f64) -> (nalgebra::Cholesky<f64, nalgebra::Dyn>, f64) {
    let mut extra = noise.max(JITTER);
    loop {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += extra;
        }
        if let Some(c) = m.cholesky() {
            return (c, extra);
        }
        extra *= 10.0;
        assert!(extra.is_finite(), "covariance could not be factorized");
    }
}

struct Likelihood {
    value: f64,
    grad: [f64; 3],
}

/// Log marginal likelihood of standardized targets and its gradient with
/// respect to (log l, log s2, log noise).
fn log_marginal_likelihood(x: ArrayView2<f64>, y: &DVector<f64>, h: &Hyperparameters) -> Likelihood {
    let n = x.nrows();
    let mut kf = DMatrix::zeros(n, n);
    let mut dl = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let r = sq_dist(x.row(i), x.row(j)).sqrt();
            let u = SQRT5 * r / h.lengthscale;
            let e = (-u).exp();
            let kv = h.outputscale * (1.0 + u + u * u / 3.0) * e;
            let dv = h.outputscale * u * u * (1.0 + u) * e / 3.0;
            kf[(i, j)] = kv;
            kf[(j, i)] = kv;
            dl[(i, j)] = dv;
            dl[(j, i)] = dv;
        }
    }
    let (chol, noise) = robust_cholesky(&kf, h.noise);
    let alpha = chol.solve(y);
    let log_det: f64 = chol.l_dirty().diagonal().iter().take(n).map(|v| v.ln()).sum::<f64>() * 2.0;
    let value = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    // W = alpha alpha^T - K^{-1}; each gradient is tr(W dK) / 2.
    let kinv = chol.inverse();
    let mut g = [0.0; 3];
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            g[0] += w * dl[(i, j)];
            g[1] += w * kf[(i, j)];
        }
        g[2] += (alpha[i] * alpha[i] - kinv[(i, i)]) * noise;
    }
    Likelihood {
        value,
        grad: [0.5 * g[0], 0.5 * g[1], 0.5 * g[2]],
    }
}

fn project(t: [f64; 3], bounds: &[[f64; 2]; 3]) -> [f64; 3] {
    [
        t[0].clamp(bounds[0][0], bounds[0][1]),
        t[1].clamp(bounds[1][0], bounds[1][1]),
        t[2].clamp(bounds[2][0], bounds[2][1]),
    ]
}

/// Projected gradient ascent with an adaptive step; never accepts a decrease.
fn ascend(
    x: ArrayView2<f64>,
    y: &DVector<f64>,
    start: [f64; 3],
    bounds: &[[f64; 2]; 3],
    iterations: usize,
) -> ([f64; 3], f64) {
    let mut t = project(start, bounds);
    let mut cur = log_marginal_likelihood(x, y, &Hyperparameters::from_log(t));
    let mut step = 0.1;
    for _ in 0..iterations {
        let gnorm = cur.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-8 {
            break;
        }
        let mut accepted = false;
        while step > 1e-6 {
            let cand = project(
                [
                    t[0] + step * cur.grad[0] / gnorm,
                    t[1] + step * cur.grad[1] / gnorm,
                    t[2] + step * cur.grad[2] / gnorm,
                ],
                bounds,
            );
            let next = log_marginal_likelihood(x, y, &Hyperparameters::from_log(cand));
            if next.value > cur.value {
                t = cand;
                cur = next;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (t, cur.value)
}

/// Indices of at most `cap` rows: the best `cap / 2` by `y`, then the most
/// recent of the rest. Returned in ascending order.
fn subset(y: ArrayView1<f64>, cap: usize) -> Vec<usize> {
    let n = y.len();
    if n <= cap {
        return (0..n).collect();
    }
    let mut by_y: Vec<usize> = (0..n).collect();
    by_y.sort_by(|&a, &b| y[b].total_cmp(&y[a]).then(a.cmp(&b)));
    let mut keep = vec![false; n];
    for &i in by_y.iter().take(cap / 2) {
        keep[i] = true;
    }
    let mut count = cap / 2;
    for i in (0..n).rev() {
        if count == cap {
            break;
        }
        if !keep[i] {
            keep[i] = true;
            count += 1;
        }
    }
    (0..n).filter(|&i| keep[i]).collect()
}

/// Fitted posterior state.
#[derive(Debug, Clone)]
pub struct Gp {
    hyper: Hyperparameters,
    noise: f64,
    x: Array2<f64>,
    y_mean: f64,
    y_scale: f64,
    /// (K + noise I)^{-1} y in standardized units.
    alpha: Array1<f64>,
    /// Inverse of the lower Cholesky factor.
    l_inv: Array2<f64>,
    log_likelihood: f64,
}

impl Gp {
    /// Fits hyperparameters by marginal likelihood and conditions on the data.
    pub fn fit(x: ArrayView2<f64>, y: ArrayView1<f64>, cfg: &GpFitConfig) -> Result<Self> {
        Self::check_data(x, y)?;
        let (mean, scale) = standardization(y);
        let ys = y.mapv(|v| (v - mean) / scale);
        let idx = subset(ys.view(), cfg.fit_points.max(2));
        let xf = x.select(Axis(0), &idx);
        let yf = DVector::from_iterator(idx.len(), idx.iter().map(|&i| ys[i]));
        let bounds = cfg.log_bounds();

        let mut starts = vec![Hyperparameters::default().to_log()];
        let mut sobol = Sobol::new(3, None)?;
        let mut u = [0.0; 3];
        sobol.next_into(&mut u);
        while starts.len() < cfg.restarts.max(1) {
            sobol.next_into(&mut u);
            starts.push([
                bounds[0][0] + u[0] * (bounds[0][1] - bounds[0][0]),
                bounds[1][0] + u[1] * (bounds[1][1] - bounds[1][0]),
                bounds[2][0] + u[2] * (bounds[2][1] - bounds[2][0]),
            ]);
        }
        let mut best: Option<([f64; 3], f64)> = None;
        for start in starts {
            let (t, v) = ascend(xf.view(), &yf, start, &bounds, cfg.iterations);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((t, v));
            }
        }
        let (t, v) = best.expect("at least one restart");
        let hyper = Hyperparameters::from_log(t);
        let mut gp = Self::condition(x, y, hyper, cfg.max_points)?;
        gp.log_likelihood = v;
        Ok(gp)
    }

    /// Conditions on the data with fixed hyperparameters (noise in
    /// standardized units, floored at [`JITTER`]).
    pub fn with_hyperparameters(
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
        hyper: Hyperparameters,
    ) -> Result<Self> {
        Self::check_data(x, y)?;
        Self::condition(x, y, hyper, usize::MAX)
    }

    fn check_data(x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<()> {
        ensure_dim(x.nrows(), y.len())?;
        if y.len() < 2 {
            return Err(Error::InvalidParameter("a GP needs at least two observations".into()));
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("GP training data"));
        }
        Ok(())
    }

    fn condition(x: ArrayView2<f64>, y: ArrayView1<f64>, hyper: Hyperparameters, cap: usize) -> Result<Self> {
        let (y_mean, y_scale) = standardization(y);
        let ys = y.mapv(|v| (v - y_mean) / y_scale);
        let idx = subset(ys.view(), cap);
        let xs = x.select(Axis(0), &idx);
        let yc = DVector::from_iterator(idx.len(), idx.iter().map(|&i| ys[i]));
        let k = to_dmatrix(&cross_kernel(xs.view(), xs.view(), &hyper));
        let (chol, noise) = robust_cholesky(&k, hyper.noise);
        let alpha = chol.solve(&yc);
        let n = idx.len();
        let l = chol.l();
        let l_inv_na = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(Error::NonFinite("Cholesky factor"))?;
        let l_inv = Array2::from_shape_fn((n, n), |(i, j)| l_inv_na[(i, j)]);
        let log_likelihood = {
            let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
            -0.5 * yc.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
        };
        Ok(Self {
            hyper,
            noise,
            x: xs,
            y_mean,
            y_scale,
            alpha: Array1::from_iter(alpha.iter().copied()),
            l_inv,
            log_likelihood,
        })
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        self.hyper
    }

    /// Noise variance actually used (standardized units, after jitter).
    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn num_conditioning_points(&self) -> usize {
        self.x.nrows()
    }

    pub fn target_scale(&self) -> (f64, f64) {
        (self.y_mean, self.y_scale)
    }

    /// `V = L^{-1} K(X, X*)`.
    fn projected(&self, xs: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let kx = cross_kernel(self.x.view(), xs, &self.hyper);
        let v = self.l_inv.dot(&kx);
        (kx, v)
    }

    /// Posterior mean and covariance at the rows of `xs`, original units.
    pub fn posterior(&self, xs: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        ensure_dim(self.input_dim(), xs.ncols())?;
        let (kx, v) = self.projected(xs);
        let mean = kx.t().dot(&self.alpha).mapv(|m| m * self.y_scale + self.y_mean);
        let mut cov = cross_kernel(xs, xs, &self.hyper) - v.t().dot(&v);
        for i in 0..cov.nrows() {
            cov[[i, i]] = cov[[i, i]].max(0.0);
        }
        let cov = (&cov + &cov.t()) * (0.5 * self.y_scale * self.y_scale);
        Ok((mean, cov))
    }

    /// Posterior means and variances, standardized units.
    fn marginals(&self, xs: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>, Array2<f64>) {
        let (kx, v) = self.projected(xs);
        let mean = kx.t().dot(&self.alpha);
        let var = v
            .columns()
            .into_iter()
            .map(|c| (self.hyper.outputscale - c.dot(&c)).max(0.0))
            .collect();
        (mean, var, v)
    }

    /// Posterior means and variances in original units.
    pub fn mean_and_variance(&self, xs: ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        ensure_dim(self.input_dim(), xs.ncols())?;
        let (m, v, _) = self.marginals(xs);
        let s2 = self.y_scale * self.y_scale;
        Ok((m.mapv(|x| x * self.y_scale + self.y_mean), v.mapv(|x| x * s2)))
    }
}

fn standardization(y: ArrayView1<f64>) -> (f64, f64) {
    let mean = y.mean().unwrap_or(0.0);
    let std = y.std(0.0);
    (mean, if std > 1e-12 { std } else { 1.0 })
}

// ---------------------------------------------------------------------------
// Acquisition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquireConfig {
    pub candidate_pool: usize,
    pub mc_samples: usize,
    /// Acquisition box `[lo, hi]^d` in optimization space.
    pub bounds: [f64; 2],
}

impl Default for AcquireConfig {
    fn default() -> Self {
        Self {
            candidate_pool: 4096,
            mc_samples: 128,
            bounds: [-4.0, 4.0],
        }
    }
}

/// Monte Carlo expected improvement of `N(mean, sd^2)` over `incumbent`
/// with fixed base draws.
pub fn mc_expected_improvement(mean: f64, sd: f64, incumbent: f64, base: &[f64]) -> f64 {
    base.iter().map(|e| (mean + sd * e - incumbent).max(0.0)).sum::<f64>() / base.len() as f64
}

/// Single-point Monte Carlo EI for every pool row, original units.
pub fn expected_improvement(gp: &Gp, incumbent: f64, pool: ArrayView2<f64>, base: &[f64]) -> Result<Array1<f64>> {
    let (m, v) = gp.mean_and_variance(pool)?;
    Ok(Array1::from_shape_fn(m.len(), |i| {
        mc_expected_improvement(m[i], v[i].sqrt(), incumbent, base)
    }))
}

/// Greedy batch selection from a fixed pool.
///
/// Each pick maximizes single-point MC EI under the posterior conditioned on
/// the earlier picks, each fantasized at its posterior mean. Fantasies leave
/// the mean unchanged, shrink variances by a rank-one update, and raise the
/// incumbent to the fantasized value when it is higher. Returns pool indices;
/// repeats are possible when the pool is small.
pub fn qei_select_from_pool<R: rand::Rng>(
    gp: &Gp,
    incumbent: f64,
    pool: ArrayView2<f64>,
    b: usize,
    mc_samples: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    ensure_dim(gp.input_dim(), pool.ncols())?;
    if b == 0 || pool.nrows() == 0 || mc_samples == 0 {
        return Err(Error::InvalidParameter("batch, pool and mc_samples must be positive".into()));
    }
    let base: Vec<f64> = (0..mc_samples).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let (mean, mut var, v) = gp.marginals(pool);
    let mut best = (incumbent - gp.y_mean) / gp.y_scale;
    let m = pool.nrows();
    // Rank-one factors of the fantasy updates: cov_j(i, s) = cov_0(i, s) - sum_p u_p(i) u_p(s).
    let mut factors: Vec<Array1<f64>> = Vec::with_capacity(b);
    let mut picks = Vec::with_capacity(b);
    for _ in 0..b {
        let mut arg = 0;
        let mut top = f64::NEG_INFINITY;
        for i in 0..m {
            let ei = mc_expected_improvement(mean[i], var[i].sqrt(), best, &base);
            if ei > top {
                top = ei;
                arg = i;
            }
        }
        picks.push(arg);
        best = best.max(mean[arg]);

        let k_s = cross_kernel(pool, pool.row(arg).insert_axis(Axis(0)), &gp.hyper).column(0).to_owned();
        let mut cov_s = k_s - v.t().dot(&v.column(arg));
        for u in &factors {
            cov_s.scaled_add(-u[arg], u);
        }
        let denom = (var[arg] + gp.noise).sqrt();
        let u = cov_s / denom;
        for i in 0..m {
            var[i] = (var[i] - u[i] * u[i]).max(0.0);
        }
        factors.push(u);
    }
    Ok(picks)
}

/// Draws a scrambled Sobol pool in the acquisition box and selects `b` points.
pub fn qei_acquire<R: rand::Rng>(
    gp: &Gp,
    incumbent: f64,
    b: usize,
    cfg: &AcquireConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if cfg.candidate_pool < b {
        return Err(Error::InvalidParameter("candidate_pool must be >= batch".into()));
    }
    let seed: u64 = rand::RngExt::random(rng);
    let pool = to_box(
        sobol_sample(cfg.candidate_pool, gp.input_dim(), Some(seed))?,
        cfg.bounds[0],
        cfg.bounds[1],
    );
    let picks = qei_select_from_pool(gp, incumbent, pool.view(), b, cfg.mc_samples, rng)?;
    Ok(pool.select(Axis(0), &picks))
}
