//! Empirical 1-Wasserstein distance: an exact assignment solver used as a
//! test oracle, the Kantorovich-Rubinstein dual estimate through a critic,
//! and the weight-clipped critic training loop.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::nets::{AdamState, Mlp};

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Shortest augmenting paths with vertex potentials, O(n^3). Returns
/// `col_of_row` and the optimal total cost.
pub fn assignment(cost: ArrayView2<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    ensure_dim(n, cost.ncols())?;
    if n == 0 {
        return Err(Error::Empty("cost matrix"));
    }
    if !cost.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    let total = col_of_row.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((col_of_row, total))
}

fn pairwise_distances(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((p.nrows(), q.nrows()), |(i, j)| {
        p.row(i)
            .iter()
            .zip(q.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    })
}

/// Exact empirical W1 between equal-size samples under the Euclidean metric.
pub fn w1_exact(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<f64> {
    ensure_dim(p.nrows(), q.nrows())?;
    ensure_dim(p.ncols(), q.ncols())?;
    if p.nrows() == 0 || p.ncols() == 0 {
        return Err(Error::Empty("sample"));
    }
    let (_, total) = assignment(pairwise_distances(p, q).view())?;
    Ok((total / p.nrows() as f64).max(0.0))
}

/// `mean_P c - mean_Q c`.
pub fn w1_dual_estimate(critic: &Mlp, p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<f64> {
    Ok(reference_expectation(critic, p)? - reference_expectation(critic, q)?)
}

/// Mean critic output over the rows of `p`.
pub fn reference_expectation(critic: &Mlp, p: ArrayView2<f64>) -> Result<f64> {
    if p.nrows() == 0 {
        return Err(Error::Empty("reference sample"));
    }
    Ok(critic.forward_batch(p)?.mean().unwrap())
}

/// Critic layer sizes for optimization dimension `d`.
pub fn critic_architecture(d: usize) -> Vec<usize> {
    vec![d, 4 * d, d, 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticTrainConfig {
    pub learning_rate: f64,
    pub clip_bound: f64,
    pub patience: usize,
    pub max_steps: usize,
    pub minibatch: usize,
}

impl Default for CriticTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            clip_bound: 0.01,
            patience: 100,
            max_steps: 20_000,
            minibatch: 128,
        }
    }
}

impl CriticTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.clip_bound > 0.0) {
            return Err(Error::InvalidParameter(
                "critic learning_rate and clip_bound must be positive".into(),
            ));
        }
        if self.patience == 0 || self.max_steps < self.patience || self.minibatch == 0 {
            return Err(Error::InvalidParameter(
                "critic needs patience >= 1, max_steps >= patience, minibatch >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CriticTraining {
    pub critic: Mlp,
    pub steps: usize,
    pub best_estimate: f64,
}

fn minibatch_rows<R: rand::Rng>(x: ArrayView2<f64>, size: usize, rng: &mut R) -> Array2<f64> {
    if x.nrows() <= size {
        return x.to_owned();
    }
    let idx = index::sample(rng, x.nrows(), size).into_vec();
    x.select(Axis(0), &idx)
}

/// Maximizes `mean_P c - mean_Q c` by minibatch Adam updates with weight
/// clipping after every update. Moment estimates start fresh on each call.
///
/// The full-data estimate is recomputed after each update; training stops
/// once it has not strictly improved for `patience` consecutive updates, or
/// after `max_steps`. The best parameters seen (the clipped starting point
/// included) are returned.
pub fn train_critic<R: rand::Rng>(
    critic: &Mlp,
    p: ArrayView2<f64>,
    q: ArrayView2<f64>,
    cfg: &CriticTrainConfig,
    rng: &mut R,
) -> Result<CriticTraining> {
    cfg.validate()?;
    if p.nrows() == 0 || q.nrows() == 0 {
        return Err(Error::Empty("critic training sample"));
    }
    ensure_dim(critic.input_dim(), p.ncols())?;
    ensure_dim(critic.input_dim(), q.ncols())?;

    let mut net = critic.clipped(cfg.clip_bound)?;
    let mut best = net.clone();
    let mut best_estimate = w1_dual_estimate(&net, p, q)?;
    let mut adam = AdamState::new(&net, cfg.learning_rate);
    let mut stale = 0;
    let mut steps = 0;
    while steps < cfg.max_steps && stale < cfg.patience {
        let bp = minibatch_rows(p, cfg.minibatch, rng);
        let bq = minibatch_rows(q, cfg.minibatch, rng);
        let weights = concatenate![
            Axis(0),
            Array1::from_elem(bp.nrows(), -1.0 / bp.nrows() as f64),
            Array1::from_elem(bq.nrows(), 1.0 / bq.nrows() as f64)
        ];
        let batch = concatenate![Axis(0), bp, bq];
        // Descent on the negated estimate.
        let (_, grads) = net.param_grads(batch.view(), weights.view())?;
        adam.step(&mut net, &grads);
        net.clip_weights(cfg.clip_bound)?;
        steps += 1;

        let estimate = w1_dual_estimate(&net, p, q)?;
        if estimate > best_estimate {
            best_estimate = estimate;
            best = net.clone();
            stale = 0;
        } else {
            stale += 1;
        }
    }
    Ok(CriticTraining {
        critic: best,
        steps,
        best_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn brute_force_w1(p: ArrayView2<f64>, q: ArrayView2<f64>) -> f64 {
        let n = p.nrows();
        let d = pairwise_distances(p, q);
        (0..n)
            .permutations(n)
            .map(|perm| perm.iter().enumerate().map(|(i, &j)| d[[i, j]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            / n as f64
    }

    fn gaussian(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || { let g: f64 = StandardNormal.sample(&mut *rng); shift + g })
    }

    #[test]
    fn w1_simple_cases() {
        let p = array![[0.0], [1.0]];
        assert_eq!(w1_exact(p.view(), p.view()).unwrap(), 0.0);
        assert_eq!(w1_exact(array![[0.0]].view(), array![[3.0]].view()).unwrap(), 3.0);
        assert_eq!(w1_exact(p.view(), array![[1.0], [2.0]].view()).unwrap(), 1.0);
        assert!(w1_exact(p.view(), array![[1.0]].view()).is_err());
        assert!(w1_exact(Array2::zeros((0, 2)).view(), Array2::zeros((0, 2)).view()).is_err());
    }

    #[test]
    fn w1_matches_brute_force_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 1..=7 {
            for d in [1, 2, 3] {
                let p = gaussian(n, d, 0.0, &mut rng);
                let q = gaussian(n, d, 0.5, &mut rng);
                let exact = w1_exact(p.view(), q.view()).unwrap();
                assert!((exact - brute_force_w1(p.view(), q.view())).abs() < 1e-9);
                assert!((exact - w1_exact(q.view(), p.view()).unwrap()).abs() < 1e-9);
                assert!(exact >= 0.0);
            }
        }
    }

    #[test]
    fn assignment_on_a_known_matrix() {
        let c = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let (cols, total) = assignment(c.view()).unwrap();
        assert_eq!(total, 5.0);
        assert_eq!(cols, vec![1, 0, 2]);
    }

    #[test]
    fn dual_estimate_simple_cases() {
        let mut constant = Mlp::zeros(&[2, 1]).unwrap();
        constant.layer_mut(0).1[0] = 7.0;
        let p = array![[1.0, 0.0], [2.0, 3.0]];
        let q = array![[0.0, 0.0]];
        assert_eq!(w1_dual_estimate(&constant, p.view(), q.view()).unwrap(), 0.0);
        assert_eq!(reference_expectation(&constant, p.view()).unwrap(), 7.0);
        let random = Mlp::new(&[2, 8, 1], 3).unwrap();
        assert_eq!(w1_dual_estimate(&random, p.view(), p.view()).unwrap(), 0.0);
        let mut coord = Mlp::zeros(&[2, 1]).unwrap();
        coord.layer_mut(0).0[[0, 0]] = 1.0;
        assert_eq!(
            w1_dual_estimate(&coord, array![[1.0, 0.0]].view(), q.view()).unwrap(),
            1.0
        );
        assert!(reference_expectation(&coord, Array2::zeros((0, 2)).view()).is_err());
    }

    #[test]
    fn reference_expectation_is_the_mean_of_scalar_forwards() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[3, 12, 3, 1], 8).unwrap();
        let p = gaussian(100, 3, 0.0, &mut rng);
        let direct: f64 = p
            .rows()
            .into_iter()
            .map(|r| net.forward(r.as_slice().unwrap()).unwrap())
            .sum::<f64>()
            / 100.0;
        let via = reference_expectation(&net, p.view()).unwrap();
        assert!((direct - via).abs() < 1e-15);
        assert_eq!(
            reference_expectation(&net, p.slice(ndarray::s![..1, ..])).unwrap(),
            net.forward(p.row(0).as_slice().unwrap()).unwrap()
        );
    }

    #[test]
    fn duality_bound_holds_for_random_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in 0..20 {
            let net = Mlp::new(&[2, 8, 2, 1], k).unwrap();
            let p = gaussian(16, 2, 0.0, &mut rng);
            let q = gaussian(16, 2, 1.0, &mut rng);
            let dual = w1_dual_estimate(&net, p.view(), q.view()).unwrap();
            let k = net.lipschitz_upper_bound().max(1e-12);
            assert!(dual / k <= w1_exact(p.view(), q.view()).unwrap() + 1e-9);
        }
    }

    #[test]
    fn critic_separates_shifted_gaussians_within_the_dual_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = gaussian(256, 2, 5.0, &mut rng);
        let q = gaussian(256, 2, -5.0, &mut rng);
        let init = Mlp::new(&critic_architecture(2), 2).unwrap();
        let out = train_critic(&init, p.view(), q.view(), &CriticTrainConfig::default(), &mut rng).unwrap();
        assert!(out.best_estimate > 0.0);
        let k = out.critic.lipschitz_upper_bound();
        let w1 = w1_exact(p.view(), q.view()).unwrap();
        assert!(out.best_estimate / k <= w1 * 1.05);
        assert!(out.critic.max_abs_parameter() <= 0.01);
        let again = w1_dual_estimate(&out.critic, p.view(), q.view()).unwrap();
        assert_eq!(again, out.best_estimate);
    }

    #[test]
    fn identical_samples_give_no_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = gaussian(128, 2, 0.0, &mut rng);
        let init = Mlp::new(&critic_architecture(2), 0).unwrap();
        let out = train_critic(&init, p.view(), p.view(), &CriticTrainConfig::default(), &mut rng).unwrap();
        assert!(out.best_estimate <= 0.05);
        assert!(out.steps >= 100);
    }

    #[test]
    fn step_cap_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = gaussian(32, 2, 1.0, &mut rng);
        let q = gaussian(32, 2, 0.0, &mut rng);
        let cfg = CriticTrainConfig {
            patience: 1,
            max_steps: 1,
            ..Default::default()
        };
        let init = Mlp::new(&critic_architecture(2), 0).unwrap();
        let out = train_critic(&init, p.view(), q.view(), &cfg, &mut rng).unwrap();
        assert!(out.steps <= 1);
        let bad = CriticTrainConfig {
            patience: 0,
            ..Default::default()
        };
        assert!(train_critic(&init, p.view(), q.view(), &bad, &mut rng).is_err());
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn cloud(n: usize, d: usize, flat: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |(i, j)| flat[i * 3 + j])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exact_w1_is_a_metric_on_equal_size_samples(
            n in 1usize..8,
            d in 1usize..4,
            p in prop::collection::vec(-5.0f64..5.0, 24),
            q in prop::collection::vec(-5.0f64..5.0, 24),
            r in prop::collection::vec(-5.0f64..5.0, 24),
        ) {
            let (p, q, r) = (cloud(n, d, &p), cloud(n, d, &q), cloud(n, d, &r));
            let pq = w1_exact(p.view(), q.view()).unwrap();
            prop_assert!(pq >= 0.0);
            prop_assert!(w1_exact(p.view(), p.view()).unwrap().abs() < 1e-12);
            prop_assert!((pq - w1_exact(q.view(), p.view()).unwrap()).abs() < 1e-9);
            let pr = w1_exact(p.view(), r.view()).unwrap();
            let qr = w1_exact(q.view(), r.view()).unwrap();
            prop_assert!(pr <= pq + qr + 1e-9);
        }

        #[test]
        fn normalized_dual_never_exceeds_exact_w1(
            n in 1usize..8,
            d in 1usize..4,
            p in prop::collection::vec(-5.0f64..5.0, 24),
            q in prop::collection::vec(-5.0f64..5.0, 24),
            seed in any::<u64>(),
        ) {
            let (p, q) = (cloud(n, d, &p), cloud(n, d, &q));
            let critic = Mlp::new(&critic_architecture(d), seed).unwrap();
            let k = critic.lipschitz_upper_bound().max(f64::EPSILON);
            let dual = w1_dual_estimate(&critic, p.view(), q.view()).unwrap();
            prop_assert!(dual / k <= w1_exact(p.view(), q.view()).unwrap() + 1e-9);
        }
    }
}
