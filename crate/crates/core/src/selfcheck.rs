//! Fast oracle checks: each component compared against an independent,
//! brute-force or closed-form reference on seeded random instances.

use std::path::Path;

use itertools::Itertools;
use ndarray::{Array1, Array2, ArrayView2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ascr::{adaptive_scr, AscrConfig, AscrState, NormThreshold};
use crate::error::Result;
use crate::eval::oracle_eval;
use crate::gp::{expected_improvement, Gp, Hyperparameters, JITTER};
use crate::nets::Mlp;
use crate::tasks::{Task, TaskName, MOTIF_LENGTH, MOTIF_VOCAB};
use crate::wasserstein::{critic_architecture, train_critic, w1_dual_estimate, w1_exact, CriticTrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || shift + normal(rng))
}

/// True when a hidden pre-activation lies within reach of a step of size `h`.
fn near_kink(net: &Mlp, z: &[f64], h: f64) -> bool {
    let mut act = Array1::from(z.to_vec());
    let last = net.num_layers() - 1;
    for (w, b) in net.weights().iter().zip(net.biases()).take(last) {
        let pre = w.dot(&act) + b;
        for (o, &p) in pre.iter().enumerate() {
            let reach = 10.0 * h * w.row(o).iter().map(|v| v.abs()).sum::<f64>();
            if p.abs() < reach {
                return true;
            }
        }
        act = pre.mapv(|p| if p > 0.0 { p } else { net.slope() * p });
    }
    false
}

/// Input gradients against central differences (`h = 1e-4`) on `pairs`
/// random (network, point) pairs.
pub fn input_gradients(pairs: usize, seed: u64) -> Result<Check> {
    const H: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let d = rng.random_range(1..6usize);
        let mut dims = vec![d];
        for _ in 0..rng.random_range(1..4usize) {
            dims.push(rng.random_range(2..24usize));
        }
        dims.push(1);
        let mut net = Mlp::new(&dims, rng.random())?;
        for l in 0..net.num_layers() {
            net.layer_mut(l).1.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let z = loop {
            let z: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            if !near_kink(&net, &z, H) {
                break z;
            }
        };
        let g = net.input_grad(&z)?;
        let mut fd = vec![0.0; d];
        for i in 0..d {
            let (mut plus, mut minus) = (z.clone(), z.clone());
            plus[i] += H;
            minus[i] -= H;
            fd[i] = (net.forward(&plus)? - net.forward(&minus)?) / (2.0 * H);
        }
        let scale = fd.iter().map(|v| v.abs()).fold(1e-8, f64::max);
        for (a, b) in g.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    Ok(Check::new(
        "input gradients vs finite differences",
        worst < 1e-4,
        format!("{pairs} pairs, max relative error {worst:.2e}"),
    ))
}

fn brute_force_w1(p: ArrayView2<f64>, q: ArrayView2<f64>) -> f64 {
    let n = p.nrows();
    let dist = |i: usize, j: usize| {
        p.row(i).iter().zip(q.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    (0..n)
        .permutations(n)
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| dist(i, j)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        / n as f64
}

/// Exact W1 against the minimum over all permutations for `n <= 7`.
pub fn exact_w1(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=7 {
        for d in 1..=3 {
            let p = gaussian(n, d, 0.0, &mut rng);
            let q = gaussian(n, d, 0.7, &mut rng);
            worst = worst.max((w1_exact(p.view(), q.view())? - brute_force_w1(p.view(), q.view())).abs());
            cases += 1;
        }
    }
    Ok(Check::new(
        "exact W1 vs permutation brute force",
        worst <= 1e-9,
        format!("{cases} instances, max deviation {worst:.2e}"),
    ))
}

/// Trained critics never certify more than the exact distance:
/// `dual / lipschitz_bound <= 1.05 * W1` on random Gaussian pairs.
pub fn critic_duality(pairs: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let d = rng.random_range(1..4usize);
        let shift = rng.random_range(0.0..4.0);
        let p = gaussian(64, d, shift, &mut rng);
        let q = gaussian(64, d, -shift, &mut rng);
        let init = Mlp::new(&critic_architecture(d), rng.random())?;
        let cfg = CriticTrainConfig { max_steps: 2000, ..Default::default() };
        let trained = train_critic(&init, p.view(), q.view(), &cfg, &mut rng)?;
        let bound = trained.critic.lipschitz_upper_bound().max(f64::EPSILON);
        let certified = w1_dual_estimate(&trained.critic, p.view(), q.view())? / bound;
        worst = worst.max(certified / w1_exact(p.view(), q.view())?);
    }
    Ok(Check::new(
        "critic dual estimate bounded by exact W1",
        worst <= 1.05,
        format!("{pairs} pairs, max certified/exact ratio {worst:.4}"),
    ))
}

fn replay_alpha(f: &Mlp, c: &Mlp, z: &Array2<f64>, ref_exp: f64, cfg: &AscrConfig) -> Result<Option<f64>> {
    let rows: Vec<Vec<f64>> = z.rows().into_iter().map(|r| r.to_vec()).collect();
    let mean_norm = rows
        .iter()
        .map(|r| Ok(f.input_grad(r)?.iter().map(|v| v * v).sum::<f64>().sqrt()))
        .sum::<Result<f64>>()?
        / rows.len() as f64;
    let tau = match cfg.threshold {
        NormThreshold::Relative(k) => k * mean_norm,
        NormThreshold::Absolute(t) => t,
        NormThreshold::Disabled => f64::INFINITY,
    };
    let mut best: Option<(f64, f64)> = None;
    for k in 0..cfg.alpha_steps {
        let alpha = k as f64 / cfg.alpha_steps as f64;
        let (mut arg, mut min) = (0, f64::INFINITY);
        for (i, r) in rows.iter().enumerate() {
            let (gf, gc) = (f.input_grad(r)?, c.input_grad(r)?);
            let norm = gf
                .iter()
                .zip(&gc)
                .map(|(a, b)| ((1.0 - alpha) * a + alpha * b).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm < min {
                (arg, min) = (i, norm);
            }
        }
        if min > tau {
            continue;
        }
        let g = -(1.0 - alpha) * f.forward(&rows[arg])? + alpha * (ref_exp - c.forward(&rows[arg])?);
        if best.is_none_or(|(_, bg)| g > bg) {
            best = Some((alpha, g));
        }
    }
    Ok(best.map(|b| b.0))
}

/// The adaptive penalty weight against an exhaustive per-value replay of
/// the same standard-normal draw.
pub fn alpha_grid_replay(instances: usize, seed: u64) -> Result<Check> {
    let mut mismatches = 0;
    for k in 0..instances as u64 {
        let s = seed.wrapping_add(k);
        let d = 1 + (k as usize % 3);
        let f = Mlp::new(&[d, 16, 1], s)?;
        let c = Mlp::new(&[d, 12, 1], s ^ 0xC0FFEE)?;
        let cfg = AscrConfig { search_budget: 32, alpha_steps: 50, ..Default::default() };
        let ref_exp = 0.1 * (k as f64 % 5.0 - 2.0);
        let mut state = AscrState::default();
        let out = adaptive_scr(&f, &c, ref_exp, &cfg, &mut state, 1, &mut ChaCha8Rng::seed_from_u64(s))?;
        let mut again = ChaCha8Rng::seed_from_u64(s);
        let z = gaussian(cfg.search_budget, d, 0.0, &mut again);
        if out.alpha != replay_alpha(&f, &c, &z, ref_exp, &cfg)?.unwrap_or(0.0) {
            mismatches += 1;
        }
    }
    Ok(Check::new(
        "adaptive alpha vs exhaustive grid replay",
        mismatches == 0,
        format!("{instances} instances, {mismatches} mismatches"),
    ))
}

/// Noiseless GP interpolation at the training inputs.
pub fn gp_interpolation(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((20, 2), || rng.random_range(-1.0f64..1.0));
    let y: Array1<f64> = x.rows().into_iter().map(|r| r[0].sin() + r[1] * r[1]).collect();
    let hyper = Hyperparameters { lengthscale: 0.7, outputscale: 1.0, noise: JITTER };
    let gp = Gp::with_hyperparameters(x.view(), y.view(), hyper)?;
    let (m, _) = gp.mean_and_variance(x.view())?;
    let (_, scale) = gp.target_scale();
    let worst = m.iter().zip(&y).map(|(a, b)| (a - b).abs() / scale).fold(0.0, f64::max);
    Ok(Check::new(
        "GP noiseless interpolation",
        worst <= 1e-6,
        format!("max standardized residual {worst:.2e}"),
    ))
}

/// Expected improvement is nonnegative on 1000 pool points.
pub fn ei_nonnegative(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((30, 2), || rng.random_range(-2.0..2.0));
    let y: Array1<f64> = x.rows().into_iter().map(|r| -(r[0] * r[0] + r[1] * r[1])).collect();
    let gp = Gp::with_hyperparameters(
        x.view(),
        y.view(),
        Hyperparameters { lengthscale: 1.0, outputscale: 1.0, noise: 1e-4 },
    )?;
    let pool = Array2::from_shape_simple_fn((1000, 2), || rng.random_range(-4.0..4.0));
    let base: Vec<f64> = (0..128).map(|_| normal(&mut rng)).collect();
    let incumbent = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ei = expected_improvement(&gp, incumbent, pool.view(), &base)?;
    let min = ei.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Check::new("expected improvement nonnegative", min >= 0.0, format!("min over 1000 points {min:.3e}")))
}

/// Best oracle value over all `4^8` sequences, by enumeration.
pub fn motif_brute_force_max(task: &Task) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for code in 0..MOTIF_VOCAB.pow(MOTIF_LENGTH as u32) {
        let seq: Vec<f64> = (0..MOTIF_LENGTH)
            .map(|p| ((code / MOTIF_VOCAB.pow(p as u32)) % MOTIF_VOCAB) as f64)
            .collect();
        let z = task.encode(Array1::from(seq).view())?;
        best = best.max(oracle_eval(task, [z.as_slice().expect("contiguous")])?);
    }
    Ok(best)
}

/// The motif dataset sits strictly below the enumerated global maximum.
pub fn motif_maximum(seed: u64) -> Result<Check> {
    let task = Task::build(TaskName::Motif, seed)?;
    let global = motif_brute_force_max(&task)?;
    let data = task.dataset().best_score();
    Ok(Check::new(
        "motif enumeration maximum",
        data <= global && global <= 1.0,
        format!("dataset best {data:.4}, enumerated max {global:.4}"),
    ))
}

/// The checkpoint at `path` loads and survives a round trip.
pub fn checkpoint(path: &Path) -> Check {
    match Mlp::load(path) {
        Ok(net) => {
            let same = Mlp::from_bytes(&net.to_bytes()).is_ok_and(|n| n == net)
                && Mlp::from_json(&net.to_json()).is_ok_and(|n| n == net);
            Check::new("checkpoint", same, format!("{} loaded, {} parameters", path.display(), net.num_parameters()))
        }
        Err(e) => Check::new("checkpoint", false, format!("{}: {e}", path.display())),
    }
}

/// In-memory checkpoint round trip of a fresh network.
pub fn checkpoint_round_trip(seed: u64) -> Result<Check> {
    let net = Mlp::new(&[3, 16, 8, 1], seed)?;
    let ok = Mlp::from_bytes(&net.to_bytes())? == net && Mlp::from_json(&net.to_json())? == net;
    let z = [0.1, -0.2, 0.3];
    let same_output = Mlp::from_bytes(&net.to_bytes())?.forward(&z)? == net.forward(&z)?;
    Ok(Check::new("checkpoint round trip", ok && same_output, "binary and JSON".into()))
}

/// The quick suite run by `selfcheck`.
pub fn run_all(checkpoint_path: Option<&Path>) -> Vec<Check> {
    let wrap = |name: &'static str, r: Result<Check>| r.unwrap_or_else(|e| Check::new(name, false, e.to_string()));
    let mut checks = vec![
        wrap("input gradients vs finite differences", input_gradients(100, 0)),
        wrap("exact W1 vs permutation brute force", exact_w1(0)),
        wrap("GP noiseless interpolation", gp_interpolation(0)),
        wrap("expected improvement nonnegative", ei_nonnegative(0)),
        wrap("motif enumeration maximum", motif_maximum(0)),
        wrap("adaptive alpha vs exhaustive grid replay", alpha_grid_replay(50, 0)),
        wrap("checkpoint round trip", checkpoint_round_trip(0)),
    ];
    if let Some(p) = checkpoint_path {
        checks.push(checkpoint(p));
    }
    checks
}
