//! Exact one-dimensional adversary instance.
//!
//! The unprotected parameter distribution is a discretised Gaussian with the
//! exact mean and variance of the sampled update, laid on a fixed grid; the
//! protected one is its convolution with a discretised noise kernel on the
//! same grid. Beliefs are grid mixtures of the channel posterior, so every
//! divergence, constant and bound is computed without sampling error.

use serde::{Deserialize, Serialize};

use crate::adversary::{
    leakage_bounds, privacy_leakage, xi_from_log_kernel, BeliefChannel, CandidateUniverse, LeakageBounds,
    LikelihoodModel, UpdateRule,
};
use crate::divergence::{js_discrete, tv_discrete, DiscreteDist, TvEstimate};
use crate::domain::{ClientShard, DataPoint, ParamVector};
use crate::error::{Error, Result};
use crate::metrics::{
    check_tradeoff_bounds, check_utility_upper_bound, estimate_assumption_constants, BoundEntry, BoundReport,
    ConstantObservation, Constants, TradeoffInput, UtilityBoundInput,
};
use crate::model;
use crate::protection::tv_sandwich;
use crate::rng::{RngSeedTree, StreamTag, SETUP_ROUND};
use crate::sampling;

/// Floor added to the channel variance so densities stay finite.
pub const CHANNEL_FLOOR: f64 = 1e-6;

const TOY_KEY: u64 = 0x746f79;
const MAX_ATTEMPTS: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub candidates: usize,
    pub points_per_candidate: usize,
    pub sample_prob: f64,
    pub grid_points: usize,
    /// Grid half-width in standard deviations of the widest protected law.
    pub grid_halfwidth_sd: f64,
    /// Largest noise variance the grid must accommodate.
    pub max_noise_variance: f64,
    /// Channel variance as a multiple of the sampling variance.
    pub channel_inflation: f64,
    pub gap_constant: f64,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c6: Option<f64>,
    /// Instances whose unprotected leakage falls below this are redrawn.
    pub min_c1: f64,
    pub noise_grid: Vec<f64>,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            candidates: 4,
            points_per_candidate: 3,
            sample_prob: 0.5,
            grid_points: 401,
            grid_halfwidth_sd: 6.0,
            max_noise_variance: 1.0,
            channel_inflation: 1.0,
            gap_constant: 1.0,
            gamma: 1.0,
            delta: None,
            c6: None,
            min_c1: 0.02,
            noise_grid: vec![0.01, 0.05, 0.1, 0.25, 0.5],
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("toy.{m}")));
        if !(2..=8).contains(&self.candidates) {
            return bad("candidates must be in 2..=8");
        }
        if !(1..=4).contains(&self.points_per_candidate) {
            return bad("points_per_candidate must be in 1..=4");
        }
        if !(self.sample_prob > 0.0 && self.sample_prob < 1.0) {
            return bad("sample_prob must be in (0, 1)");
        }
        if self.grid_points < 16 {
            return bad("grid_points must be >= 16");
        }
        if !(self.grid_halfwidth_sd > 0.0 && self.max_noise_variance >= 0.0 && self.channel_inflation > 0.0) {
            return bad("grid_halfwidth_sd and channel_inflation must be > 0, max_noise_variance >= 0");
        }
        if !(self.gap_constant > 0.0 && self.gamma > 0.0) {
            return bad("gap_constant and gamma must be > 0");
        }
        if self.delta.is_some_and(|d| !(d > 0.0)) || self.c6.is_some_and(|c| !(c > 0.0)) {
            return bad("delta and c6 must be > 0 when set");
        }
        if self.noise_grid.iter().any(|v| !(*v >= 0.0 && *v <= self.max_noise_variance)) {
            return bad("noise_grid values must lie in [0, max_noise_variance]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ToyInstance {
    pub spec: ToySpec,
    pub universe: CandidateUniverse,
    pub w_prev: f64,
    /// Index of the dataset actually held by the client.
    pub truth: usize,
    pub mean: f64,
    pub sampling_variance: f64,
    pub channel_variance: f64,
    pub w_star: f64,
    pub grid: Vec<f64>,
    log_kernel: Vec<Vec<f64>>,
    kernel: Vec<DiscreteDist<f64>>,
    unprotected: DiscreteDist<f64>,
}

/// Exact quantities at one noise level.
#[derive(Clone, Debug, Serialize)]
pub struct ToyEvaluation {
    pub noise_variance: f64,
    pub tv: f64,
    pub tv_lower: f64,
    pub tv_upper: f64,
    pub c1: f64,
    pub eps_p: f64,
    pub js_protected_vs_unprotected: f64,
    pub xi: f64,
    pub eps_u_literal: f64,
    pub expected_variance: f64,
    pub bias: f64,
    pub max_norm: f64,
    pub leakage: LeakageBounds,
    #[serde(skip)]
    pub belief: DiscreteDist<f64>,
    #[serde(skip)]
    pub protected_belief: DiscreteDist<f64>,
}

fn discretised_gaussian(grid: &[f64], mean: f64, variance: f64) -> Result<DiscreteDist<f64>> {
    let w: Vec<f64> = grid.iter().map(|g| (-(g - mean) * (g - mean) / (2.0 * variance)).exp()).collect();
    DiscreteDist::from_weights(w)
}

impl ToyInstance {
    pub fn generate(seed: u64, spec: &ToySpec) -> Result<Self> {
        spec.validate()?;
        let tree = RngSeedTree::new(seed);
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = tree.derive_indexed(SETUP_ROUND, TOY_KEY, StreamTag::Oracle, attempt);
            let candidates =
                (0..spec.candidates).map(|_| random_candidate(spec, &mut rng)).collect::<Result<Vec<_>>>()?;
            let universe = CandidateUniverse::uniform(candidates)?;
            let inst = Self::build(spec.clone(), universe, 0.0)?;
            if inst.sampling_variance > 1e-4 && inst.evaluate(0.0)?.c1 >= spec.min_c1 {
                return Ok(inst);
            }
        }
        Err(Error::Config(format!("no informative toy instance found for seed {seed}")))
    }

    /// Builds the instance for a given universe; candidate 0 is the truth.
    pub fn build(spec: ToySpec, universe: CandidateUniverse, w_prev: f64) -> Result<Self> {
        let p = spec.sample_prob;
        let w0 = ParamVector::new(vec![w_prev])?;
        let truth = 0;
        let true_shard = &universe.candidates()[truth];
        let grads = model::gradients(&w0, true_shard.points())?;
        let sampling_variance = sampling::variance_from_gradients(&grads, p, 1)?;
        let mean = sampling::expected_update_from_gradients(&w0, &grads, p, &ParamVector::zeros(1))?.get(0);
        let w_star = model::solve_optimum(true_shard.points())?.w.get(0);

        // Wide enough for the configured noise and for calibrated noise up to sigma^2.
        let widest = sampling_variance + spec.max_noise_variance.max(sampling_variance);
        let half = spec.grid_halfwidth_sd * widest.sqrt();
        let n = spec.grid_points;
        let grid: Vec<f64> = (0..n).map(|i| mean - half + 2.0 * half * i as f64 / (n - 1) as f64).collect();

        let channel_variance = spec.channel_inflation * sampling_variance + CHANNEL_FLOOR;
        let lik = LikelihoodModel::new(channel_variance, UpdateRule::SummedGradient)?;
        let channel = BeliefChannel::new(&universe, &lik, &w0, p)?;
        let mut log_kernel = Vec::with_capacity(n);
        let mut kernel = Vec::with_capacity(n);
        for &g in &grid {
            let post = channel.posterior(&ParamVector::new(vec![g])?)?;
            log_kernel.push(post.log_masses);
            kernel.push(post.dist);
        }
        let unprotected = discretised_gaussian(&grid, mean, sampling_variance.max(f64::MIN_POSITIVE))?;
        Ok(Self {
            spec,
            universe,
            w_prev,
            truth,
            mean,
            sampling_variance,
            channel_variance,
            w_star,
            grid,
            log_kernel,
            kernel,
            unprotected,
        })
    }

    pub fn unprotected(&self) -> &DiscreteDist<f64> {
        &self.unprotected
    }

    /// Law of the protected parameter on the grid.
    pub fn protected(&self, noise_variance: f64) -> Result<DiscreteDist<f64>> {
        if noise_variance < 0.0 {
            return Err(Error::Config("noise variance must be >= 0".into()));
        }
        if noise_variance == 0.0 {
            return Ok(self.unprotected.clone());
        }
        let n = self.grid.len();
        let mut out = vec![0.0; n];
        for (i, &gi) in self.grid.iter().enumerate() {
            let pi = self.unprotected.mass(i);
            if pi == 0.0 {
                continue;
            }
            let row: Vec<f64> =
                self.grid.iter().map(|g| (-(g - gi) * (g - gi) / (2.0 * noise_variance)).exp()).collect();
            let z: f64 = row.iter().sum();
            for (o, r) in out.iter_mut().zip(&row) {
                *o += pi * r / z;
            }
        }
        DiscreteDist::from_weights(out)
    }

    /// Belief induced by a parameter law on the grid.
    pub fn belief(&self, law: &DiscreteDist<f64>) -> Result<DiscreteDist<f64>> {
        DiscreteDist::mixture(&self.kernel, law.masses())
    }

    pub fn evaluate(&self, noise_variance: f64) -> Result<ToyEvaluation> {
        let p_tilde = self.protected(noise_variance)?;
        let tv = tv_discrete(&p_tilde, &self.unprotected);
        let f = self.belief(&self.unprotected)?;
        let f_tilde = self.belief(&p_tilde)?;
        let prior = self.universe.prior();
        let mix: Vec<f64> = (0..self.grid.len()).map(|i| 0.5 * (self.unprotected.mass(i) + p_tilde.mass(i))).collect();
        let xi = xi_from_log_kernel(&self.log_kernel, Some(&mix))?;
        let c = self.spec.gap_constant;
        let gap_under = |law: &DiscreteDist<f64>| -> f64 {
            self.grid.iter().zip(law.masses()).map(|(g, m)| m * c * (g - self.w_star).powi(2)).sum()
        };
        let eps_u_literal = gap_under(&self.unprotected) - gap_under(&p_tilde);
        let mean_w: f64 = self.grid.iter().zip(self.unprotected.masses()).map(|(g, m)| g * m).sum();
        let (lo, hi) = if self.sampling_variance > 0.0 {
            tv_sandwich(self.sampling_variance, noise_variance, 1)
        } else {
            (0.0, f64::INFINITY)
        };
        let leakage = leakage_bounds(&f_tilde, &f, prior, TvEstimate::exact(tv), xi);
        Ok(ToyEvaluation {
            noise_variance,
            tv,
            tv_lower: lo,
            tv_upper: hi,
            c1: privacy_leakage(&f, prior),
            eps_p: privacy_leakage(&f_tilde, prior),
            js_protected_vs_unprotected: js_discrete(&f_tilde, &f),
            xi,
            eps_u_literal,
            expected_variance: self.sampling_variance + noise_variance,
            bias: (mean_w - self.w_star).abs(),
            max_norm: self.grid.iter().fold(0.0f64, |m, g| m.max(g.abs())),
            leakage,
            belief: f,
            protected_belief: f_tilde,
        })
    }

    /// Configured `C6`, or one estimated over the nonzero noise levels given.
    pub fn c6(&self, evals: &[ToyEvaluation]) -> Result<(f64, Option<f64>)> {
        let obs: Vec<ConstantObservation> = evals
            .iter()
            .filter(|e| e.noise_variance > 0.0)
            .map(|e| ConstantObservation { max_norm: e.max_norm, bias: e.bias, tv: e.tv })
            .collect();
        let estimate = if obs.is_empty() { None } else { estimate_assumption_constants(&obs)?.c6 };
        match (self.spec.c6, estimate) {
            (Some(c6), est) => Ok((c6, est)),
            (None, Some(est)) if est > 0.0 => Ok((est, Some(est))),
            _ => Err(Error::Estimation("C6 could not be estimated for the toy instance".into())),
        }
    }

    /// Evaluates every bound over the configured noise grid. Entries carry the
    /// grid index as their round.
    pub fn bound_report(&self) -> Result<BoundReport> {
        let evals = self.spec.noise_grid.iter().map(|&v| self.evaluate(v)).collect::<Result<Vec<_>>>()?;
        let (c6, c6_estimate) = self.c6(&evals)?;
        let c1 = evals.first().map(|e| e.c1).unwrap_or(0.0);
        let mut report = BoundReport::new();
        for (i, e) in evals.iter().enumerate() {
            let c_d = self.spec.delta.map(|d| Constants::c_d_from(e.xi, self.spec.gamma, d));
            let consts = Constants {
                c: self.spec.gap_constant,
                c1t: c1,
                c2: e.leakage.c2,
                c3: crate::metrics::CONSTANT_MARGIN * e.max_norm,
                c4: crate::metrics::CONSTANT_MARGIN * e.bias,
                c5: None,
                c6,
                c6_estimate,
                c6_fixed: self.spec.c6.is_some(),
                c_d,
                xi: e.xi,
                gamma: self.spec.gamma,
                delta: self.spec.delta,
            };
            let mut entries = self.entries(e, &consts);
            let tag = format!("sigma_eps_sq={:e}", e.noise_variance);
            for en in &mut entries {
                en.round = Some(i);
                en.client = Some(0);
                en.note = if en.note.is_empty() { tag.clone() } else { format!("{tag}; {}", en.note) };
            }
            report.extend(entries);
            report.record_constants(Some(i), Some(0), consts);
        }
        Ok(report)
    }

    fn entries(&self, e: &ToyEvaluation, k: &Constants) -> Vec<BoundEntry> {
        let mut out = vec![
            BoundEntry::ge("tv_sandwich_lower", e.tv, e.tv_lower, 0.0),
            BoundEntry::le("tv_sandwich_upper", e.tv, e.tv_upper, 0.0),
            crate::divergence::check_js_tv_bound(&e.protected_belief, &e.belief, TvEstimate::exact(e.tv), e.xi),
        ];
        out.extend(e.leakage.entries());
        out.extend(
            check_utility_upper_bound(&UtilityBoundInput {
                eps_u: e.eps_u_literal,
                eps_u_stderr: 0.0,
                expected_variance: e.expected_variance,
                tv: e.tv,
                tv_stderr: 0.0,
                c6: k.c6,
            })
            .into_iter()
            .filter(|b| b.name == "utility_upper_bound"),
        );
        let mut trade = check_tradeoff_bounds(&TradeoffInput {
            eps_p: e.eps_p,
            eps_p_stderr: 0.0,
            eps_u_literal: e.eps_u_literal,
            eps_u_stderr: 0.0,
            expected_variance: e.expected_variance,
            c1: k.c1t,
            c2: k.c2,
            c6: k.c6,
            c_d: k.c_d,
            leakage_in_regime: e.leakage.in_regime,
        });
        out.append(&mut trade);
        out
    }
}

fn random_candidate<R: rand::Rng + ?Sized>(spec: &ToySpec, rng: &mut R) -> Result<ClientShard<f64>> {
    use rand_distr::{Distribution, Normal};
    let slope = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    let w: f64 = slope.sample(rng);
    let pts = (0..spec.points_per_candidate)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            DataPoint::new(ParamVector::new(vec![x])?, w * x + noise.sample(rng))
        })
        .collect::<Result<Vec<_>>>()?;
    ClientShard::new(pts, spec.sample_prob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Status;

    #[test]
    fn generation_is_deterministic() {
        let spec = ToySpec::default();
        let a = ToyInstance::generate(5, &spec).unwrap();
        let b = ToyInstance::generate(5, &spec).unwrap();
        assert_eq!(a.universe, b.universe);
        assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn zero_noise_is_unprotected() {
        let inst = ToyInstance::generate(1, &ToySpec::default()).unwrap();
        let e = inst.evaluate(0.0).unwrap();
        assert_eq!(e.tv, 0.0);
        assert_eq!(e.eps_p, e.c1);
        assert_eq!(e.js_protected_vs_unprotected, 0.0);
        assert_eq!(e.eps_u_literal, 0.0);
    }

    #[test]
    fn noise_widens_the_law() {
        let inst = ToyInstance::generate(2, &ToySpec::default()).unwrap();
        let e = inst.evaluate(0.25).unwrap();
        // Convolution adds the noise variance (up to grid truncation).
        assert!((e.eps_u_literal + 0.25).abs() < 1e-3, "{}", e.eps_u_literal);
        assert!(e.tv > 0.0 && e.tv < 1.0);
    }

    #[test]
    fn js_tv_bound_holds_exactly() {
        for seed in 0..10 {
            let inst = ToyInstance::generate(seed, &ToySpec::default()).unwrap();
            for &v in &[0.0, 0.1, 0.25] {
                let e = inst.evaluate(v).unwrap();
                let b =
                    crate::divergence::check_js_tv_bound(&e.protected_belief, &e.belief, TvEstimate::exact(e.tv), e.xi);
                assert_ne!(b.status, Status::Fail, "seed {seed} v {v}: {b:?}");
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = ToySpec::default();
        s.candidates = 9;
        assert!(s.validate().is_err());
        let mut s = ToySpec::default();
        s.noise_grid = vec![2.0];
        assert!(s.validate().is_err());
    }
}
