use serde::{Deserialize, Serialize};

use crate::divergence::{js_discrete, DiscreteDist, TvEstimate};
use crate::domain::{ClientShard, ParamVector};
use crate::error::{Error, Result};
use crate::metrics::{mean_var, BoundEntry, Constants};
use crate::model;
use crate::sampling;

pub const MAX_CANDIDATES: usize = 16;

/// Finite hypothesis space of candidate datasets with a prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateUniverse {
    candidates: Vec<ClientShard<f64>>,
    prior: DiscreteDist<f64>,
}

impl CandidateUniverse {
    pub fn new(candidates: Vec<ClientShard<f64>>, prior: DiscreteDist<f64>) -> Result<Self> {
        if !(2..=MAX_CANDIDATES).contains(&candidates.len()) {
            return Err(Error::Validation(format!(
                "candidate universe needs 2..={MAX_CANDIDATES} datasets, got {}",
                candidates.len()
            )));
        }
        if prior.len() != candidates.len() {
            return Err(Error::shape(candidates.len(), prior.len()));
        }
        let d = candidates[0].dim();
        if let Some(c) = candidates.iter().find(|c| c.dim() != d) {
            return Err(Error::shape(d, c.dim()));
        }
        Ok(Self { candidates, prior })
    }

    pub fn uniform(candidates: Vec<ClientShard<f64>>) -> Result<Self> {
        let n = candidates.len().max(1);
        Self::new(candidates, DiscreteDist::uniform(n))
    }

    pub fn candidates(&self) -> &[ClientShard<f64>] {
        &self.candidates
    }

    pub fn prior(&self) -> &DiscreteDist<f64> {
        &self.prior
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// How a candidate dataset maps to the mean of the released parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UpdateRule {
    /// `w - p Σ g_i`: summed gradients over the Bernoulli batch.
    SummedGradient,
    /// `w - eta (1 - (1 - p)^M) mean(g)`: expectation of a mean-batch step
    /// that is skipped when the batch is empty.
    MeanBatch { learning_rate: f64 },
}

/// Gaussian channel `W | D = c ~ N(mean_c, variance I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodModel {
    pub variance: f64,
    pub rule: UpdateRule,
}

impl LikelihoodModel {
    pub fn new(variance: f64, rule: UpdateRule) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Validation(format!("channel variance must be > 0, got {variance}")));
        }
        Ok(Self { variance, rule })
    }
}

pub fn channel_mean(
    candidate: &ClientShard<f64>,
    w_prev: &ParamVector<f64>,
    p: f64,
    rule: UpdateRule,
) -> Result<ParamVector<f64>> {
    match rule {
        UpdateRule::SummedGradient => {
            sampling::expected_update(w_prev, candidate, p, &ParamVector::zeros(w_prev.dim()))
        }
        UpdateRule::MeanBatch { learning_rate } => {
            let grads = model::gradients(w_prev, candidate.points())?;
            let mean = ParamVector::mean(&grads)?;
            let nonempty = 1.0 - (1.0 - p).powi(candidate.len() as i32);
            Ok(w_prev.axpy(-learning_rate * nonempty, &mean))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub dist: DiscreteDist<f64>,
    /// Natural log of each posterior mass (finite even where the mass underflows).
    pub log_masses: Vec<f64>,
    /// Every likelihood was degenerate and the uniform distribution was used.
    pub fallback: bool,
}

/// Precomputed channel for one round: candidate means and log prior.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefChannel {
    means: Vec<ParamVector<f64>>,
    log_prior: Vec<f64>,
    variance: f64,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl BeliefChannel {
    pub fn new(universe: &CandidateUniverse, lik: &LikelihoodModel, w_prev: &ParamVector<f64>, p: f64) -> Result<Self> {
        let means =
            universe.candidates().iter().map(|c| channel_mean(c, w_prev, p, lik.rule)).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_means(means, universe.prior(), lik.variance))
    }

    pub fn from_means(means: Vec<ParamVector<f64>>, prior: &DiscreteDist<f64>, variance: f64) -> Self {
        let log_prior = (0..means.len()).map(|i| prior.mass(i).ln()).collect();
        Self { means, log_prior, variance }
    }

    pub fn means(&self) -> &[ParamVector<f64>] {
        &self.means
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn posterior(&self, w: &ParamVector<f64>) -> Result<Posterior> {
        let mut logs = Vec::with_capacity(self.means.len());
        for (m, lp) in self.means.iter().zip(&self.log_prior) {
            if m.dim() != w.dim() {
                return Err(Error::shape(m.dim(), w.dim()));
            }
            logs.push(lp - w.distance_sq(m) / (2.0 * self.variance));
        }
        let z = log_sum_exp(&logs);
        if !z.is_finite() {
            let n = logs.len();
            return Ok(Posterior {
                dist: DiscreteDist::uniform(n),
                log_masses: vec![-(n as f64).ln(); n],
                fallback: true,
            });
        }
        let log_masses: Vec<f64> = logs.iter().map(|l| l - z).collect();
        let masses: Vec<f64> = log_masses.iter().map(|l| l.exp()).collect();
        let dist = DiscreteDist::from_weights(masses)?;
        Ok(Posterior { dist, log_masses, fallback: false })
    }
}

/// Posterior over candidates after observing `observed_w`.
pub fn posterior(
    universe: &CandidateUniverse,
    lik: &LikelihoodModel,
    observed_w: &ParamVector<f64>,
    w_prev: &ParamVector<f64>,
    p: f64,
) -> Result<Posterior> {
    BeliefChannel::new(universe, lik, w_prev, p)?.posterior(observed_w)
}

/// `max_{w, c} |ln f(c|w) - ln f_D(c)|` with `f_D(c) = Σ_w weight(w) f(c|w)`,
/// from log posteriors. Weights are normalised; `None` means uniform.
pub fn xi_from_log_kernel(log_rows: &[Vec<f64>], weights: Option<&[f64]>) -> Result<f64> {
    let first = log_rows.first().ok_or_else(|| Error::Config("xi needs a nonempty parameter grid".into()))?;
    let n = first.len();
    let log_w: Vec<f64> = match weights {
        None => vec![-(log_rows.len() as f64).ln(); log_rows.len()],
        Some(w) => {
            if w.len() != log_rows.len() {
                return Err(Error::shape(log_rows.len(), w.len()));
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0) || w.iter().any(|x| *x < 0.0) {
                return Err(Error::Validation("xi weights must be nonnegative with a positive sum".into()));
            }
            w.iter().map(|x| (x / total).ln()).collect()
        }
    };
    let mut xi: f64 = 0.0;
    for c in 0..n {
        let terms: Vec<f64> = log_rows.iter().zip(&log_w).map(|(r, lw)| r[c] + lw).collect();
        let log_fd = log_sum_exp(&terms);
        for row in log_rows {
            xi = xi.max((row[c] - log_fd).abs());
        }
    }
    Ok(xi)
}

/// `xi` from a kernel given as posterior rows (one per grid point).
pub fn xi_from_kernel(rows: &[DiscreteDist<f64>], weights: Option<&[f64]>) -> Result<f64> {
    let n = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let logs: Vec<Vec<f64>> = rows.iter().map(|r| (0..n).map(|c| r.mass(c).ln()).collect()).collect();
    xi_from_log_kernel(&logs, weights)
}

/// `xi` for the channel over a parameter grid.
pub fn compute_xi(channel: &BeliefChannel, grid: &[ParamVector<f64>], weights: Option<&[f64]>) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Config("xi needs a nonempty parameter grid".into()));
    }
    let rows = grid.iter().map(|w| channel.posterior(w).map(|p| p.log_masses)).collect::<Result<Vec<_>>>()?;
    xi_from_log_kernel(&rows, weights)
}

/// `sqrt(JS(a || b))`.
pub fn privacy_leakage(a: &DiscreteDist<f64>, b: &DiscreteDist<f64>) -> f64 {
    js_discrete(a, b).sqrt()
}

/// Mean of per-client leakages.
pub fn system_leakage(per_client: &[f64]) -> Option<f64> {
    if per_client.is_empty() {
        None
    } else {
        Some(per_client.iter().sum::<f64>() / per_client.len() as f64)
    }
}

/// `C2 * TV`, treating `TV = 0` as zero even when `C2` overflows.
pub fn c2_times_tv(c2: f64, tv: f64) -> f64 {
    if tv == 0.0 {
        0.0
    } else {
        c2 * tv
    }
}

/// Leakage sandwich `C1 - C2 TV <= eps_p <= 2 C1 - C2 TV`, where `eps_p`
/// compares the protected belief to the reference belief and `C1` the
/// unprotected one. The upper side requires `C2 TV <= C1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageBounds {
    pub measured: f64,
    pub measured_stderr: f64,
    pub c1: f64,
    pub c1_stderr: f64,
    pub c2: f64,
    pub xi: f64,
    pub tv: TvEstimate,
    pub lower: f64,
    pub upper: f64,
    pub in_regime: bool,
}

impl LeakageBounds {
    pub fn from_values(measured: f64, measured_stderr: f64, c1: f64, c1_stderr: f64, tv: TvEstimate, xi: f64) -> Self {
        let c2 = Constants::c2_from_xi(xi);
        let shift = c2_times_tv(c2, tv.estimate);
        Self {
            measured,
            measured_stderr,
            c1,
            c1_stderr,
            c2,
            xi,
            tv,
            lower: c1 - shift,
            upper: 2.0 * c1 - shift,
            in_regime: shift <= c1,
        }
    }

    fn stderr(&self) -> f64 {
        let tv_term = c2_times_tv(self.c2, self.tv.stderr);
        (self.measured_stderr.powi(2) + self.c1_stderr.powi(2) + tv_term.powi(2)).sqrt()
    }

    pub fn entries(&self) -> Vec<BoundEntry> {
        let se = self.stderr();
        let lower = BoundEntry::ge("leakage_lower", self.measured, self.lower, se);
        let mut upper = BoundEntry::le("leakage_upper", self.measured, self.upper, se);
        if !self.in_regime && upper.status != crate::metrics::Status::OutOfRegime {
            upper = upper.out_of_regime("C2*TV exceeds C1");
        }
        vec![lower, upper]
    }

    pub fn holds(&self) -> bool {
        self.entries().iter().all(|e| e.status != crate::metrics::Status::Fail)
    }
}

/// Exact sandwich from beliefs: `f_tilde` protected, `f` unprotected,
/// `f_breve` the reference belief.
pub fn leakage_bounds(
    f_tilde: &DiscreteDist<f64>,
    f: &DiscreteDist<f64>,
    f_breve: &DiscreteDist<f64>,
    tv: TvEstimate,
    xi: f64,
) -> LeakageBounds {
    LeakageBounds::from_values(privacy_leakage(f_tilde, f_breve), 0.0, privacy_leakage(f, f_breve), 0.0, tv, xi)
}

/// Average of posteriors, with bootstrap standard errors of the leakage
/// functionals. Used when beliefs are estimated from replica parameters.
pub fn mean_belief(posteriors: &[Posterior]) -> Result<DiscreteDist<f64>> {
    let dists: Vec<_> = posteriors.iter().map(|p| p.dist.clone()).collect();
    let w = vec![1.0 / dists.len() as f64; dists.len()];
    DiscreteDist::mixture(&dists, &w)
}

/// Bootstrap standard error of `sqrt(JS(mean(posteriors) || reference))`.
pub fn leakage_bootstrap_stderr<R: rand::Rng + ?Sized>(
    posteriors: &[Posterior],
    reference: &DiscreteDist<f64>,
    resamples: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = posteriors.len();
    if n == 0 {
        return Err(Error::Estimation("no posteriors".into()));
    }
    let k = posteriors[0].dist.len();
    let mut vals = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = vec![0.0; k];
        for _ in 0..n {
            let p = &posteriors[rng.random_range(0..n)].dist;
            for (a, m) in acc.iter_mut().zip(p.masses()) {
                *a += m / n as f64;
            }
        }
        vals.push(privacy_leakage(&DiscreteDist::from_weights(acc)?, reference));
    }
    Ok(mean_var(&vals).1.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::tv_discrete;
    use crate::domain::DataPoint;
    use crate::rng::{RngSeedTree, StreamTag};
    use rand::Rng;

    fn pv(v: &[f64]) -> ParamVector<f64> {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn shard(xy: &[(f64, f64)]) -> ClientShard<f64> {
        ClientShard::new(xy.iter().map(|&(x, y)| DataPoint::new(pv(&[x]), y).unwrap()).collect(), 0.5).unwrap()
    }

    fn two_candidates() -> CandidateUniverse {
        CandidateUniverse::uniform(vec![shard(&[(1.0, 1.0)]), shard(&[(1.0, -1.0)])]).unwrap()
    }

    #[test]
    fn universe_validation() {
        assert!(CandidateUniverse::uniform(vec![shard(&[(1.0, 1.0)])]).is_err());
        let bad_prior = DiscreteDist::uniform(3);
        assert!(CandidateUniverse::new(vec![shard(&[(1.0, 1.0)]), shard(&[(0.5, 0.0)])], bad_prior).is_err());
        assert!(LikelihoodModel::new(0.0, UpdateRule::SummedGradient).is_err());
    }

    #[test]
    fn channel_means() {
        // w = 0: gradient of (x w - y)^2 is -2 y x.
        let c = shard(&[(1.0, 1.0), (0.5, 1.0)]);
        let w = pv(&[0.0]);
        let m = channel_mean(&c, &w, 0.5, UpdateRule::SummedGradient).unwrap();
        assert!((m.get(0) - 0.5 * 3.0).abs() < 1e-15);
        let m = channel_mean(&c, &w, 0.5, UpdateRule::MeanBatch { learning_rate: 0.2 }).unwrap();
        assert!((m.get(0) - 0.2 * 0.75 * 1.5).abs() < 1e-15);
    }

    #[test]
    fn flat_likelihood_returns_prior() {
        let u = two_candidates();
        let lik = LikelihoodModel::new(1e12, UpdateRule::SummedGradient).unwrap();
        let post = posterior(&u, &lik, &pv(&[0.3]), &pv(&[0.0]), 0.5).unwrap();
        assert!(tv_discrete(&post.dist, u.prior()) < 1e-6);
    }

    #[test]
    fn sharp_likelihood_concentrates() {
        let u = two_candidates();
        let lik = LikelihoodModel::new(1e-3, UpdateRule::SummedGradient).unwrap();
        let w0 = pv(&[0.0]);
        let at = channel_mean(&u.candidates()[1], &w0, 0.5, lik.rule).unwrap();
        let post = posterior(&u, &lik, &at, &w0, 0.5).unwrap();
        assert!(post.dist.mass(1) >= 0.999);
        // Extremely sharp: plain densities underflow but log space still works.
        let lik = LikelihoodModel::new(1e-300, UpdateRule::SummedGradient).unwrap();
        let post = posterior(&u, &lik, &at, &w0, 0.5).unwrap();
        assert!(!post.fallback && post.dist.mass(1) == 1.0);
    }

    #[test]
    fn posterior_matches_direct_bayes() {
        let mut rng = RngSeedTree::new(13).derive_stream(0, 0, StreamTag::Oracle);
        for _ in 0..50 {
            let cands: Vec<_> = (0..4)
                .map(|_| {
                    let pts: Vec<(f64, f64)> =
                        (0..3).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
                    shard(&pts)
                })
                .collect();
            let prior = DiscreteDist::from_weights((0..4).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
            let u = CandidateUniverse::new(cands, prior.clone()).unwrap();
            let lik = LikelihoodModel::new(rng.random_range(0.05..2.0), UpdateRule::SummedGradient).unwrap();
            let w0 = pv(&[rng.random_range(-0.5..0.5)]);
            let obs = pv(&[rng.random_range(-2.0..2.0)]);
            let post = posterior(&u, &lik, &obs, &w0, 0.3).unwrap();
            // Direct: prior * normal density, normalised.
            let dens: Vec<f64> = u
                .candidates()
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let m = sampling::expected_update(&w0, c, 0.3, &pv(&[0.0])).unwrap().get(0);
                    let z = obs.get(0) - m;
                    prior.mass(i) * (-(z * z) / (2.0 * lik.variance)).exp()
                        / (2.0 * std::f64::consts::PI * lik.variance).sqrt()
                })
                .collect();
            let direct = DiscreteDist::from_weights(dens).unwrap();
            assert!(tv_discrete(&post.dist, &direct) < 1e-10);
        }
    }

    #[test]
    fn xi_examples() {
        let row = DiscreteDist::new(vec![0.3, 0.7]).unwrap();
        assert!(xi_from_kernel(&[row.clone(), row], None).unwrap() < 1e-15);
        let r1 = DiscreteDist::new(vec![0.5, 0.5]).unwrap();
        let r2 = DiscreteDist::new(vec![0.25, 0.75]).unwrap();
        let xi = xi_from_kernel(&[r1, r2], Some(&[1.0, 0.0])).unwrap();
        assert!((xi - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(xi_from_log_kernel(&[], None), Err(Error::Config(_))));
    }

    #[test]
    fn xi_matches_double_loop() {
        let mut rng = RngSeedTree::new(19).derive_stream(0, 0, StreamTag::Oracle);
        let rows: Vec<DiscreteDist<f64>> = (0..7)
            .map(|_| DiscreteDist::from_weights((0..5).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap())
            .collect();
        let w: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = w.iter().sum();
        let mut brute: f64 = 0.0;
        for c in 0..5 {
            let fd: f64 = rows.iter().zip(&w).map(|(r, wi)| r.mass(c) * wi / total).sum();
            for r in &rows {
                brute = brute.max((r.mass(c) / fd).ln().abs());
            }
        }
        let xi = xi_from_kernel(&rows, Some(&w)).unwrap();
        assert!((xi - brute).abs() < 1e-12);
    }

    #[test]
    fn leakage_examples() {
        let f = DiscreteDist::new(vec![0.2, 0.8]).unwrap();
        assert_eq!(privacy_leakage(&f, &f), 0.0);
        let a = DiscreteDist::new(vec![1.0, 0.0]).unwrap();
        let b = DiscreteDist::new(vec![0.0, 1.0]).unwrap();
        assert!((privacy_leakage(&a, &b) - 0.83255461115769775635).abs() < 1e-15);
        assert_eq!(system_leakage(&[0.1, 0.3]), Some(0.2));
    }

    #[test]
    fn sandwich_without_protection() {
        let f = DiscreteDist::new(vec![0.9, 0.1]).unwrap();
        let prior = DiscreteDist::uniform(2);
        let b = leakage_bounds(&f, &f, &prior, TvEstimate::exact(0.0), 3.0);
        assert_eq!(b.upper, 2.0 * b.c1);
        assert_eq!(b.lower, b.c1);
        assert!(b.in_regime && b.holds());
        let b = leakage_bounds(&f, &f, &prior, TvEstimate::exact(0.2), 0.0);
        assert_eq!(b.c2, 0.0);
        assert_eq!((b.lower, b.upper), (b.c1, 2.0 * b.c1));
    }
}
