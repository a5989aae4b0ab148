use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::ParamVector;
use crate::error::{Error, Result};
use crate::model;
use crate::scalar::Scalar;

/// Minimum replicas per arm for a utility-loss estimate.
pub const MIN_REPLICAS: usize = 30;

/// Standard errors of slack granted to Monte Carlo inequality checks.
pub const SIGMA_SLACK: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    #[serde(rename = "pass")]
    Pass,
    #[serde(rename = "fail")]
    Fail,
    #[serde(rename = "out-of-regime")]
    OutOfRegime,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::OutOfRegime => "out-of-regime",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One evaluated inequality `lhs <= rhs` (within `SIGMA_SLACK * stderr`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub name: String,
    pub round: Option<usize>,
    pub client: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: f64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

fn exact_tolerance(lhs: f64, rhs: f64) -> f64 {
    1e-12 * (1.0 + lhs.abs().max(rhs.abs()))
}

impl BoundEntry {
    /// Evaluates `lhs <= rhs + SIGMA_SLACK * stderr`. Non-finite sides are
    /// reported out of regime rather than failed.
    pub fn le(name: impl Into<String>, lhs: f64, rhs: f64, stderr: f64) -> Self {
        let mut e = Self {
            name: name.into(),
            round: None,
            client: None,
            lhs,
            rhs,
            stderr,
            status: Status::Pass,
            note: String::new(),
        };
        if !(lhs.is_finite() && rhs.is_finite() && stderr.is_finite()) {
            e.status = Status::OutOfRegime;
            e.note = "non-finite side".into();
        } else if lhs > rhs + SIGMA_SLACK * stderr + exact_tolerance(lhs, rhs) {
            e.status = Status::Fail;
        }
        e
    }

    /// `lhs >= rhs`, stored with the sides as given.
    pub fn ge(name: impl Into<String>, lhs: f64, rhs: f64, stderr: f64) -> Self {
        let mut e = Self::le(name, rhs, lhs, stderr);
        std::mem::swap(&mut e.lhs, &mut e.rhs);
        e.note = if e.note.is_empty() { "lhs >= rhs".into() } else { format!("lhs >= rhs; {}", e.note) };
        e
    }

    pub fn at(mut self, round: usize, client: usize) -> Self {
        self.round = Some(round);
        self.client = Some(client);
        self
    }

    pub fn out_of_regime(mut self, why: impl Into<String>) -> Self {
        self.status = Status::OutOfRegime;
        self.push_note(why);
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.push_note(note);
        self
    }

    fn push_note(&mut self, note: impl Into<String>) {
        let note = note.into();
        if self.note.is_empty() {
            self.note = note;
        } else {
            self.note = format!("{}; {}", self.note, note);
        }
    }

    /// Slack `rhs - lhs` in the direction of the inequality.
    pub fn slack(&self) -> f64 {
        if self.note.starts_with("lhs >= rhs") {
            self.lhs - self.rhs
        } else {
            self.rhs - self.lhs
        }
    }
}

/// Constants entering the bounds, logged alongside every report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub c: f64,
    pub c1t: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: Option<f64>,
    pub c6: f64,
    /// Estimate from the proof structure, when one was available.
    pub c6_estimate: Option<f64>,
    pub c6_fixed: bool,
    pub c_d: Option<f64>,
    pub xi: f64,
    pub gamma: f64,
    pub delta: Option<f64>,
}

impl Constants {
    pub fn c2_from_xi(xi: f64) -> f64 {
        0.5 * (2.0 * xi).exp_m1()
    }

    pub fn c_d_from(xi: f64, gamma: f64, delta: f64) -> f64 {
        gamma / (4.0 * delta) * (2.0 * xi).exp_m1()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantsRecord {
    pub round: Option<usize>,
    pub client: Option<usize>,
    pub constants: Constants,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub entries: Vec<BoundEntry>,
    pub constants: Vec<ConstantsRecord>,
}

impl BoundReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: BoundEntry) {
        self.entries.push(e);
    }

    pub fn extend(&mut self, es: impl IntoIterator<Item = BoundEntry>) {
        self.entries.extend(es);
    }

    pub fn append(&mut self, other: BoundReport) {
        self.entries.extend(other.entries);
        self.constants.extend(other.constants);
    }

    pub fn record_constants(&mut self, round: Option<usize>, client: Option<usize>, constants: Constants) {
        self.constants.push(ConstantsRecord { round, client, constants });
    }

    pub fn failures(&self) -> impl Iterator<Item = &BoundEntry> {
        self.entries.iter().filter(|e| e.status == Status::Fail)
    }

    pub fn has_failures(&self) -> bool {
        self.failures().next().is_some()
    }

    pub fn count(&self, status: Status) -> usize {
        self.entries.iter().filter(|e| e.status == status).count()
    }

    pub fn named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a BoundEntry> + 'a {
        self.entries.iter().filter(move |e| e.name == name)
    }
}

/// Utility loss in both orientations. `literal` is `GAP(W) - GAP(W~)`;
/// `degradation` is its negation, positive when distortion hurts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityLoss {
    pub literal: f64,
    pub degradation: f64,
    pub stderr: f64,
    pub replicas: usize,
}

/// Single-pair utility loss `GAP(w) - GAP(w~)`.
pub fn utility_loss_pair<T: Scalar>(
    w: &ParamVector<T>,
    w_tilde: &ParamVector<T>,
    w_star: &ParamVector<T>,
    c: T,
) -> Result<T> {
    Ok(model::gap(w, w_star, c)? - model::gap(w_tilde, w_star, c)?)
}

/// Replica estimate of the utility loss. Equal-length arms are treated as
/// paired draws (same sampling seed), otherwise as independent samples.
pub fn utility_loss(
    unprotected: &[ParamVector<f64>],
    protected: &[ParamVector<f64>],
    w_star: &ParamVector<f64>,
    c: f64,
) -> Result<UtilityLoss> {
    if unprotected.len() < MIN_REPLICAS || protected.len() < MIN_REPLICAS {
        return Err(Error::Estimation(format!(
            "utility loss needs at least {MIN_REPLICAS} replicas per arm, got {} and {}",
            unprotected.len(),
            protected.len()
        )));
    }
    let ga = unprotected.iter().map(|w| model::gap(w, w_star, c)).collect::<Result<Vec<_>>>()?;
    let gb = protected.iter().map(|w| model::gap(w, w_star, c)).collect::<Result<Vec<_>>>()?;
    let (literal, stderr) = if ga.len() == gb.len() {
        let diffs: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| a - b).collect();
        let (m, v) = mean_var(&diffs);
        (m, (v / diffs.len() as f64).sqrt())
    } else {
        let (ma, va) = mean_var(&ga);
        let (mb, vb) = mean_var(&gb);
        (ma - mb, (va / ga.len() as f64 + vb / gb.len() as f64).sqrt())
    };
    Ok(UtilityLoss { literal, degradation: -literal, stderr, replicas: ga.len().min(gb.len()) })
}

/// Average of per-round, per-client losses.
pub fn system_utility_loss(losses: &[UtilityLoss]) -> Option<f64> {
    if losses.is_empty() {
        None
    } else {
        Some(losses.iter().map(|u| u.literal).sum::<f64>() / losses.len() as f64)
    }
}

/// Sample mean and unbiased variance (0 for a single value).
pub(crate) fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasVariance<T> {
    pub gap: T,
    pub variance: T,
    pub bias_sq: T,
}

/// Decomposition of the empirical mean squared distance to `w_star` into
/// trace covariance and squared bias, using population normalisation so the
/// identity is exact for the empirical measure.
pub fn bias_variance_decomposition<T: Scalar>(
    replicas: &[ParamVector<T>],
    w_star: &ParamVector<T>,
) -> Result<BiasVariance<T>> {
    if replicas.len() < 2 {
        return Err(Error::Estimation("bias-variance decomposition needs at least 2 replicas".into()));
    }
    let mean = ParamVector::mean(replicas)?;
    mean.checked_sub(w_star)?;
    let n = T::lit(replicas.len() as f64);
    let gap = replicas.iter().map(|w| w.distance_sq(w_star)).sum::<T>() / n;
    let variance = replicas.iter().map(|w| w.distance_sq(&mean)).sum::<T>() / n;
    let bias_sq = mean.distance_sq(w_star);
    Ok(BiasVariance { gap, variance, bias_sq })
}

/// Inputs to the utility upper bound for one round and client.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityBoundInput {
    pub eps_u: f64,
    pub eps_u_stderr: f64,
    /// `E Var[W~ | W_prev]`: sampling variance plus `d * sigma_eps^2`.
    pub expected_variance: f64,
    pub tv: f64,
    pub tv_stderr: f64,
    pub c6: f64,
}

/// Utility upper bound `eps_u <= -E Var + C6 TV` and the near-optimality
/// condition `-E Var + C6 TV <= 0`.
pub fn check_utility_upper_bound(x: &UtilityBoundInput) -> Vec<BoundEntry> {
    let rhs = -x.expected_variance + x.c6 * x.tv;
    let rhs_se = x.c6 * x.tv_stderr;
    let se = (x.eps_u_stderr.powi(2) + rhs_se.powi(2)).sqrt();
    vec![
        BoundEntry::le("utility_upper_bound", x.eps_u, rhs, se),
        BoundEntry::le("near_optimal_utility", rhs, 0.0, rhs_se),
    ]
}

/// Inputs to the privacy-utility trade-off bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffInput {
    pub eps_p: f64,
    pub eps_p_stderr: f64,
    /// `GAP(W) - GAP(W~)`.
    pub eps_u_literal: f64,
    pub eps_u_stderr: f64,
    pub expected_variance: f64,
    pub c1: f64,
    pub c2: f64,
    pub c6: f64,
    pub c_d: Option<f64>,
    /// Whether the leakage upper bound this bound rests on is in regime.
    pub leakage_in_regime: bool,
}

/// Upper trade-off bound, no-free-lunch lower bound and the optimality-gap
/// diagnostic.
///
/// The upper bound chains the utility bound with the leakage upper bound and
/// uses the literal utility loss. The lower bound comes from a result stated
/// for a nonnegative utility loss, so it uses the degradation orientation.
pub fn check_tradeoff_bounds(x: &TradeoffInput) -> Vec<BoundEntry> {
    let ratio = x.c2 / x.c6;
    let value = x.eps_p + ratio * x.eps_u_literal;
    let rhs = -ratio * x.expected_variance + 2.0 * x.c1;
    let se = (x.eps_p_stderr.powi(2) + (ratio * x.eps_u_stderr).powi(2)).sqrt();
    let mut upper = BoundEntry::le("tradeoff_upper", value, rhs, se);
    if !x.leakage_in_regime && upper.status != Status::OutOfRegime {
        upper = upper.out_of_regime("C2*TV exceeds C1");
    }

    let lower = match x.c_d {
        Some(c_d) => {
            let v = x.eps_p + c_d * (-x.eps_u_literal);
            let se = (x.eps_p_stderr.powi(2) + (c_d * x.eps_u_stderr).powi(2)).sqrt();
            BoundEntry::ge("tradeoff_lower", v, x.c1, se)
        }
        None => BoundEntry::ge("tradeoff_lower", f64::NAN, x.c1, 0.0).out_of_regime("delta unset"),
    };

    let target = ratio * x.expected_variance;
    // Informational: optimum is reached when the two sides coincide.
    let finite = x.c1.is_finite() && target.is_finite();
    let diag = BoundEntry {
        name: "optimality_gap".into(),
        round: None,
        client: None,
        lhs: x.c1,
        rhs: target,
        stderr: 0.0,
        status: if finite { Status::Pass } else { Status::OutOfRegime },
        note: format!("diagnostic: |C1 - (C2/C6) E Var| = {:e}", (x.c1 - target).abs()),
    };
    vec![upper, lower, diag]
}

/// One observation feeding the assumption constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantObservation {
    /// Largest parameter norm seen (either arm).
    pub max_norm: f64,
    /// `||E[W] - W*||`.
    pub bias: f64,
    pub tv: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    pub c3: f64,
    pub c4: f64,
    /// `None` when some observation had zero TV but positive bias.
    pub c5: Option<f64>,
    pub c6: Option<f64>,
}

pub const CONSTANT_MARGIN: f64 = 1.1;

/// Empirical constants: `C3`, `C4` as observed maxima with a 10% margin,
/// `C5` as the largest bias-to-TV ratio, and `C6 = 2 C3^2 + C3 C4 + 2 C4 C5`.
pub fn estimate_assumption_constants(obs: &[ConstantObservation]) -> Result<AssumptionConstants> {
    if obs.is_empty() {
        return Err(Error::Estimation("no observations for assumption constants".into()));
    }
    let c3 = CONSTANT_MARGIN * obs.iter().map(|o| o.max_norm).fold(0.0, f64::max);
    let c4 = CONSTANT_MARGIN * obs.iter().map(|o| o.bias).fold(0.0, f64::max);
    let mut c5 = Some(0.0f64);
    for o in obs {
        if o.tv > 0.0 {
            c5 = c5.map(|c| c.max(o.bias / o.tv));
        } else if o.bias > 0.0 {
            c5 = None;
        }
    }
    let c6 = c5.map(|c5| 2.0 * c3 * c3 + c3 * c4 + 2.0 * c4 * c5);
    Ok(AssumptionConstants { c3, c4, c5, c6 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngSeedTree, StreamTag};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn pv(v: &[f64]) -> ParamVector<f64> {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn entry_status() {
        assert_eq!(BoundEntry::le("a", 1.0, 2.0, 0.0).status, Status::Pass);
        assert_eq!(BoundEntry::le("a", 2.0, 1.0, 0.0).status, Status::Fail);
        assert_eq!(BoundEntry::le("a", 2.0, 1.0, 0.5).status, Status::Pass);
        assert_eq!(BoundEntry::le("a", f64::NAN, 1.0, 0.0).status, Status::OutOfRegime);
        let g = BoundEntry::ge("b", 3.0, 1.0, 0.0);
        assert_eq!((g.lhs, g.rhs, g.status), (3.0, 1.0, Status::Pass));
        assert_eq!(g.slack(), 2.0);
        assert_eq!(BoundEntry::ge("b", 0.0, 1.0, 0.0).status, Status::Fail);
    }

    #[test]
    fn utility_loss_examples() {
        let w_star = pv(&[0.0]);
        assert_eq!(utility_loss_pair(&pv(&[2.0]), &pv(&[1.0]), &w_star, 1.0).unwrap(), 3.0);
        let same: Vec<_> = (0..30).map(|i| pv(&[i as f64 * 0.1])).collect();
        let u = utility_loss(&same, &same, &w_star, 1.0).unwrap();
        assert_eq!((u.literal, u.stderr), (0.0, 0.0));
        assert!(utility_loss(&same[..10], &same[..10], &w_star, 1.0).is_err());
    }

    #[test]
    fn utility_loss_matches_direct_recomputation() {
        let mut rng = RngSeedTree::new(17).derive_stream(0, 0, StreamTag::Oracle);
        let mut draw = |n| -> Vec<ParamVector<f64>> {
            (0..n).map(|_| pv(&[rng.sample(StandardNormal), rng.sample(StandardNormal)])).collect()
        };
        let a = draw(40);
        let b = draw(40);
        let w_star = pv(&[0.3, -0.2]);
        let u = utility_loss(&a, &b, &w_star, 1.7).unwrap();
        let mut direct = 0.0;
        for (x, y) in a.iter().zip(&b) {
            let gx: f64 = x.as_slice().iter().zip(w_star.as_slice()).map(|(p, q)| (p - q).powi(2)).sum();
            let gy: f64 = y.as_slice().iter().zip(w_star.as_slice()).map(|(p, q)| (p - q).powi(2)).sum();
            direct += 1.7 * gx - 1.7 * gy;
        }
        direct /= 40.0;
        assert!((u.literal - direct).abs() < 1e-12);
        assert_eq!(u.degradation, -u.literal);
    }

    #[test]
    fn decomposition_examples() {
        let w = pv(&[0.5, 0.5]);
        let bv = bias_variance_decomposition(&[w.clone(), w.clone()], &w).unwrap();
        assert_eq!((bv.gap, bv.variance, bv.bias_sq), (0.0, 0.0, 0.0));
        let bv = bias_variance_decomposition(&[pv(&[0.0]), pv(&[2.0])], &pv(&[0.0])).unwrap();
        assert_eq!((bv.gap, bv.variance, bv.bias_sq), (2.0, 1.0, 1.0));
        assert!(bias_variance_decomposition(&[pv(&[0.0])], &pv(&[0.0])).is_err());
    }

    #[test]
    fn decomposition_gaussian_moments() {
        let mut rng = RngSeedTree::new(23).derive_stream(0, 0, StreamTag::Oracle);
        let n = 10_000;
        let xs: Vec<_> = (0..n).map(|_| pv(&[1.0 + 2.0 * rng.sample::<f64, _>(StandardNormal)])).collect();
        let bv = bias_variance_decomposition(&xs, &pv(&[0.0])).unwrap();
        // Standard errors: var of x^2 for N(1,4) is 2*16 + 4*1*4 = 48; var of sample variance ~ 2*16.
        assert!((bv.gap - 5.0).abs() <= 3.0 * (48.0 / n as f64).sqrt());
        assert!((bv.variance - 4.0).abs() <= 3.0 * (32.0 / n as f64).sqrt());
        // bias^2 = mean^2; d(mean^2) ~ 2 * 1 * 2/sqrt(n)
        assert!((bv.bias_sq - 1.0).abs() <= 3.0 * 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn decomposition_generic_f32() {
        let xs = [ParamVector::<f32>::from_f64(&[0.0]).unwrap(), ParamVector::<f32>::from_f64(&[2.0]).unwrap()];
        let bv = bias_variance_decomposition(&xs, &ParamVector::<f32>::zeros(1)).unwrap();
        assert_eq!((bv.gap, bv.variance, bv.bias_sq), (2.0f32, 1.0, 1.0));
    }

    #[test]
    fn utility_bound_no_protection_passes() {
        let es = check_utility_upper_bound(&UtilityBoundInput {
            eps_u: 0.0,
            eps_u_stderr: 0.0,
            expected_variance: 0.0,
            tv: 0.0,
            tv_stderr: 0.0,
            c6: 3.0,
        });
        assert!(es.iter().all(|e| e.status == Status::Pass));
    }

    #[test]
    fn tradeoff_degenerate_channel() {
        let es = check_tradeoff_bounds(&TradeoffInput {
            eps_p: 0.2,
            eps_p_stderr: 0.0,
            eps_u_literal: -0.1,
            eps_u_stderr: 0.0,
            expected_variance: 0.3,
            c1: 0.2,
            c2: 0.0,
            c6: 2.0,
            c_d: Some(0.0),
            leakage_in_regime: true,
        });
        assert_eq!(es[0].rhs, 0.4);
        assert_eq!(es[0].status, Status::Pass);
        assert_eq!(es[1].status, Status::Pass);
        assert_eq!(es[2].name, "optimality_gap");
        let es = check_tradeoff_bounds(&TradeoffInput {
            eps_p: 0.2,
            eps_p_stderr: 0.0,
            eps_u_literal: 0.0,
            eps_u_stderr: 0.0,
            expected_variance: 0.0,
            c1: 0.2,
            c2: 1.0,
            c6: 1.0,
            c_d: None,
            leakage_in_regime: true,
        });
        assert_eq!(es[1].status, Status::OutOfRegime);
    }

    #[test]
    fn constants_examples() {
        let zero = estimate_assumption_constants(&[ConstantObservation { max_norm: 0.0, bias: 0.0, tv: 0.0 }]).unwrap();
        assert_eq!(zero.c3, 0.0);
        assert_eq!(zero.c5, Some(0.0));
        let unit =
            estimate_assumption_constants(&[ConstantObservation { max_norm: 1.0, bias: 0.5, tv: 0.25 }]).unwrap();
        assert!((unit.c3 - 1.1).abs() < 1e-15);
        assert_eq!(unit.c5, Some(2.0));
        let c6 = 2.0 * 1.1f64.powi(2) + 1.1 * 0.55 + 2.0 * 0.55 * 2.0;
        assert!((unit.c6.unwrap() - c6).abs() < 1e-12);
        let bad = estimate_assumption_constants(&[ConstantObservation { max_norm: 1.0, bias: 0.5, tv: 0.0 }]).unwrap();
        assert!(bad.c5.is_none() && bad.c6.is_none());
    }

    proptest! {
        #[test]
        fn decomposition_identity(d in 1usize..9, n in 2usize..40, seed in any::<u64>()) {
            let mut rng = RngSeedTree::new(seed).derive_stream(0, 0, StreamTag::Oracle);
            let xs: Vec<_> = (0..n)
                .map(|_| ParamVector::new((0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0 + 1.0).collect()).unwrap())
                .collect();
            let w_star = ParamVector::new((0..d).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let bv = bias_variance_decomposition(&xs, &w_star).unwrap();
            prop_assert!((bv.gap - bv.variance - bv.bias_sq).abs() <= 1e-10 * bv.gap.max(1e-300));
        }

        #[test]
        fn log_ratio_bound(a in 1e-6f64..1e6, b in 1e-6f64..1e6) {
            prop_assert!((a / b).ln().abs() <= (a - b).abs() / a.min(b) * (1.0 + 1e-12));
        }
    }
}
