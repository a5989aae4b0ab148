use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{check_probability, ClientShard, ParamVector};
use crate::error::{Error, Result};
use crate::model;
use crate::scalar::Scalar;

/// Bernoulli sampling probability and the number of sampling rounds `N`
/// averaged into one update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub p: f64,
    pub rounds: usize,
}

impl SamplingPlan {
    pub fn new(p: f64, rounds: usize) -> Result<Self> {
        check_probability(p)?;
        if rounds == 0 {
            return Err(Error::Validation("sampling rounds must be >= 1".into()));
        }
        Ok(Self { p, rounds })
    }
}

/// Includes each of `m` indices independently with probability `p`.
pub fn draw_indices<R: Rng + ?Sized>(m: usize, p: f64, rng: &mut R) -> Vec<usize> {
    (0..m).filter(|_| rng.random::<f64>() < p).collect()
}

/// Bernoulli mini-batch over the shard using its own sampling probability.
pub fn draw_minibatch<T: Scalar, R: Rng + ?Sized>(shard: &ClientShard<T>, rng: &mut R) -> Vec<usize> {
    draw_indices(shard.len(), shard.sample_prob(), rng)
}

pub fn gradient_sum<T: Scalar>(grads: &[ParamVector<T>]) -> Result<ParamVector<T>> {
    let first = grads.first().ok_or_else(|| Error::Validation("no gradients".into()))?;
    let mut acc = ParamVector::zeros(first.dim());
    for g in grads {
        acc = acc.checked_add(g)?;
    }
    Ok(acc)
}

/// `Σ ||g_i||^2`.
pub fn gradient_sq_sum<T: Scalar>(grads: &[ParamVector<T>]) -> T {
    grads.iter().map(|g| g.norm_sq()).sum()
}

/// Exact mean of the distorted update: `w - p Σ g_i + noise`.
pub fn expected_update_from_gradients<T: Scalar>(
    w_prev: &ParamVector<T>,
    grads: &[ParamVector<T>],
    p: T,
    noise: &ParamVector<T>,
) -> Result<ParamVector<T>> {
    let s = gradient_sum(grads)?;
    w_prev.checked_sub(&s.scale(p))?.checked_add(noise)
}

pub fn expected_update<T: Scalar>(
    w_prev: &ParamVector<T>,
    shard: &ClientShard<T>,
    p: T,
    noise: &ParamVector<T>,
) -> Result<ParamVector<T>> {
    let grads = model::gradients(w_prev, shard.points())?;
    expected_update_from_gradients(w_prev, &grads, p, noise)
}

/// Total variance (trace of the covariance) of the update averaged over `n`
/// independent sampling rounds: `p (1 - p) Σ ||g_i||^2 / n`.
pub fn variance_from_gradients<T: Scalar>(grads: &[ParamVector<T>], p: T, n: usize) -> Result<T> {
    if !(p >= T::zero() && p <= T::one()) {
        return Err(Error::Validation("sampling probability outside [0, 1]".into()));
    }
    if n == 0 {
        return Err(Error::Validation("sampling rounds must be >= 1".into()));
    }
    Ok(p * (T::one() - p) * gradient_sq_sum(grads) / T::lit(n as f64))
}

pub fn update_variance<T: Scalar>(w_prev: &ParamVector<T>, shard: &ClientShard<T>, p: T, n: usize) -> Result<T> {
    let grads = model::gradients(w_prev, shard.points())?;
    variance_from_gradients(&grads, p, n)
}

/// One draw of the summed-gradient update averaged over `n` sampling rounds:
/// `w - (1/n) Σ_j Σ_{i in S_j} g_i`.
pub fn sampled_update<R: Rng + ?Sized>(
    w_prev: &ParamVector<f64>,
    grads: &[ParamVector<f64>],
    p: f64,
    n: usize,
    rng: &mut R,
) -> ParamVector<f64> {
    let mut step = vec![0.0; w_prev.dim()];
    for _ in 0..n {
        for i in draw_indices(grads.len(), p, rng) {
            for (s, &g) in step.iter_mut().zip(grads[i].as_slice()) {
                *s += g;
            }
        }
    }
    let inv = 1.0 / n as f64;
    ParamVector::from_raw(w_prev.as_slice().iter().zip(&step).map(|(&w, &s)| w - s * inv).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingCalibration {
    pub p: f64,
    /// The budget does not constrain `p`; any probability is admissible.
    pub free: bool,
    /// A negative target was clamped to zero.
    pub clamped: bool,
}

/// Smallest `p` with `p (1 - p) >= c_target`.
pub fn calibrate_sampling_probability(c_target: f64) -> Result<SamplingCalibration> {
    if c_target.is_nan() {
        return Err(Error::Validation("sampling target is NaN".into()));
    }
    if c_target > 0.25 {
        return Err(Error::InfeasibleBudget { c_target, round: None, client: None });
    }
    if c_target <= 0.0 {
        return Ok(SamplingCalibration { p: 0.0, free: true, clamped: c_target < 0.0 });
    }
    if c_target == 0.25 {
        return Ok(SamplingCalibration { p: 0.5, free: false, clamped: false });
    }
    // Rationalised root avoids cancellation for small targets.
    let p = 2.0 * c_target / (1.0 + (1.0 - 4.0 * c_target).sqrt());
    // Nudge up by ulps if rounding left p (1 - p) a hair short.
    let mut p = p;
    while p * (1.0 - p) < c_target && p < 0.5 {
        p = f64::from_bits(p.to_bits() + 1);
    }
    Ok(SamplingCalibration { p, free: false, clamped: false })
}

/// Target for `p (1 - p)` that makes the sampling variance match `c6` times
/// the leakage gap: `n * c6 * gap / Σ ||g||^2`. Returns +inf when the
/// gradients vanish but a positive gap must be covered.
pub fn sampling_target(c6: f64, c1_minus_tau: f64, grad_sq_sum: f64, n: usize) -> f64 {
    if c1_minus_tau <= 0.0 {
        return c1_minus_tau;
    }
    if grad_sq_sum <= 0.0 {
        return f64::INFINITY;
    }
    n as f64 * c6 * c1_minus_tau / grad_sq_sum
}

/// Exact mean and total variance of the single-round summed update by
/// enumerating all `2^M` subsets. Intended for small shards.
pub fn enumerate_update_moments(
    w_prev: &ParamVector<f64>,
    grads: &[ParamVector<f64>],
    p: f64,
) -> (ParamVector<f64>, f64) {
    let m = grads.len();
    assert!(m <= 20, "enumeration limited to small shards");
    let d = w_prev.dim();
    let mut mean = vec![0.0; d];
    let mut second = 0.0;
    let mut outcomes = Vec::with_capacity(1 << m);
    for mask in 0u32..(1u32 << m) {
        let k = mask.count_ones() as i32;
        let prob = p.powi(k) * (1.0 - p).powi(m as i32 - k);
        let mut w = w_prev.as_slice().to_vec();
        for (i, g) in grads.iter().enumerate() {
            if mask & (1 << i) != 0 {
                for (wj, &gj) in w.iter_mut().zip(g.as_slice()) {
                    *wj -= gj;
                }
            }
        }
        for (a, &x) in mean.iter_mut().zip(&w) {
            *a += prob * x;
        }
        outcomes.push((prob, w));
    }
    for (prob, w) in &outcomes {
        second += prob * w.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>();
    }
    (ParamVector::from_raw(mean), second)
}
