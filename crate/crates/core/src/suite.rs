//! The `verify-bounds` suite and the parameter sweeps.

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::domain::ParamVector;
use crate::error::Result;
use crate::federation::Federation;
use crate::metrics::{self, BoundEntry, BoundReport};
use crate::model;
use crate::protection;
use crate::rng::{RngSeedTree, StreamTag, SETUP_ROUND};
use crate::sampling;
use crate::toy::ToyInstance;

/// Budget gaps exercised by the calibration round trip.
pub const CALIBRATION_GAPS: [f64; 3] = [0.001, 0.005, 0.009];

const SUITE_KEY: u64 = 0x7375_6974;
const BIAS_VARIANCE_REPLICAS: usize = 50;

fn exact(name: &str, err: f64, tol: f64) -> BoundEntry {
    BoundEntry::le(name, err, tol, 0.0)
}

/// Moment formulas against exhaustive enumeration on the toy's true shard.
fn moment_entries(inst: &ToyInstance) -> Result<Vec<BoundEntry>> {
    let w = ParamVector::new(vec![inst.w_prev])?;
    let grads = model::gradients(&w, inst.universe.candidates()[inst.truth].points())?;
    let mut out = Vec::new();
    for p in [0.1, 0.3, 0.5, 0.9] {
        let (mean, var) = sampling::enumerate_update_moments(&w, &grads, p);
        let m = sampling::expected_update_from_gradients(&w, &grads, p, &ParamVector::zeros(1))?;
        let v = sampling::variance_from_gradients(&grads, p, 1)?;
        let scale = 1.0 + m.norm() + v;
        out.push(exact("sampling_mean", mean.distance_sq(&m).sqrt(), 1e-12 * scale).with_note(format!("p={p}")));
        out.push(exact("sampling_variance", (var - v).abs(), 1e-12 * scale).with_note(format!("p={p}")));
    }
    Ok(out)
}

/// Bias-variance identity on sampled-and-distorted toy replicas.
fn bias_variance_entry(inst: &ToyInstance, seed: u64) -> Result<BoundEntry> {
    let tree = RngSeedTree::new(seed);
    let w = ParamVector::new(vec![inst.w_prev])?;
    let grads = model::gradients(&w, inst.universe.candidates()[inst.truth].points())?;
    let noise = protection::NoiseSpec::new(inst.spec.noise_grid.last().copied().unwrap_or(0.0), 1)?;
    let reps = (0..BIAS_VARIANCE_REPLICAS)
        .map(|r| {
            let mut rng = tree.derive_indexed(SETUP_ROUND, SUITE_KEY, StreamTag::Sample, r as u64);
            let wr = sampling::sampled_update(&w, &grads, inst.spec.sample_prob, 1, &mut rng);
            let mut rng = tree.derive_indexed(SETUP_ROUND, SUITE_KEY, StreamTag::Noise, r as u64);
            protection::distort(&wr, &noise, &mut rng).map(|(x, _)| x)
        })
        .collect::<Result<Vec<_>>>()?;
    let bv = metrics::bias_variance_decomposition(&reps, &ParamVector::new(vec![inst.w_star])?)?;
    let err = (bv.gap - bv.variance - bv.bias_sq).abs();
    Ok(exact("bias_variance_identity", err, 1e-10 * bv.gap.max(f64::MIN_POSITIVE)))
}

/// Noise calibrated to each gap must reach that TV and bring leakage down to
/// `C1 - gap`.
fn calibration_entries(inst: &ToyInstance) -> Result<Vec<BoundEntry>> {
    let c1 = inst.evaluate(0.0)?.c1;
    let mut out = Vec::new();
    for (i, &gap) in CALIBRATION_GAPS.iter().enumerate() {
        let cal = protection::calibrate_noise_variance(inst.sampling_variance, 1, gap)?;
        let e = inst.evaluate(cal.variance)?;
        let note = format!("gap={gap}; sigma_eps_sq={:e}", cal.variance);
        let mut tv = BoundEntry::ge("calibration_tv", e.tv, gap, 0.0).with_note(note.clone());
        let mut leak = BoundEntry::le("calibration_leakage", e.eps_p, c1 - gap, 0.0).with_note(note);
        for en in [&mut tv, &mut leak] {
            en.round = Some(i);
            en.client = Some(0);
        }
        out.push(tv);
        out.push(leak);
    }
    Ok(out)
}

/// Runs every check on the configured toy instance.
pub fn verify_bounds(config: &ExperimentConfig) -> Result<BoundReport> {
    let inst = ToyInstance::generate(config.seed, &config.toy)?;
    let mut report = BoundReport::new();
    report.extend(moment_entries(&inst)?);
    report.push(bias_variance_entry(&inst, config.seed)?);
    report.extend(calibration_entries(&inst)?);
    report.append(inst.bound_report()?);
    Ok(report)
}

/// One row of a trade-off curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: f64,
    pub t: usize,
    pub tv: f64,
    pub tv_stderr: f64,
    pub eps_p: f64,
    pub eps_u: f64,
    pub eps_u_stderr: f64,
    pub c1: f64,
}

/// Exact trade-off on the toy instance, one row per noise variance.
pub fn sweep_noise(config: &ExperimentConfig, grid: &[f64]) -> Result<Vec<SweepRow>> {
    let inst = ToyInstance::generate(config.seed, &config.toy)?;
    grid.iter()
        .map(|&v| {
            let e = inst.evaluate(v)?;
            Ok(SweepRow {
                param: "noise",
                value: v,
                t: 0,
                tv: e.tv,
                tv_stderr: 0.0,
                eps_p: e.eps_p,
                eps_u: e.eps_u_literal,
                eps_u_stderr: 0.0,
                c1: e.c1,
            })
        })
        .collect()
}

/// Federated runs with a uniform budget per grid value; one row per value
/// and round, averaged over clients.
pub fn sweep_budget(config: &ExperimentConfig, grid: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &tau in grid {
        let mut c = config.clone();
        c.privacy.budget = Some(tau);
        c.privacy.budgets = None;
        c.privacy.budget_gap = None;
        c.privacy.sampling_probability = None;
        let (state, _) = Federation::new(c)?.run_experiment()?;
        for t in 0..state.round {
            let ms: Vec<_> = state.metrics.iter().filter(|m| m.round == t).collect();
            let k = ms.len() as f64;
            let avg = |f: &dyn Fn(&crate::federation::ClientMetrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / k;
            let rms = |f: &dyn Fn(&crate::federation::ClientMetrics) -> f64| {
                (ms.iter().map(|m| f(m).powi(2)).sum::<f64>()).sqrt() / k
            };
            rows.push(SweepRow {
                param: "budget",
                value: tau,
                t,
                tv: avg(&|m| m.tv.estimate),
                tv_stderr: rms(&|m| m.tv.stderr),
                eps_p: avg(&|m| m.eps_p),
                eps_u: avg(&|m| m.eps_u.literal),
                eps_u_stderr: rms(&|m| m.eps_u.stderr),
                c1: avg(&|m| m.c1_measured),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Status;

    fn toy_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.toy.delta = Some(1.0);
        c
    }

    #[test]
    fn suite_is_deterministic() {
        let a = verify_bounds(&toy_config()).unwrap();
        let b = verify_bounds(&toy_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_identities_pass() {
        let r = verify_bounds(&toy_config()).unwrap();
        for name in ["sampling_mean", "sampling_variance", "bias_variance_identity", "js_tv_bound", "leakage_lower"] {
            assert!(r.named(name).count() > 0, "{name} missing");
            assert!(r.named(name).all(|e| e.status == Status::Pass), "{name} failed");
        }
        assert_eq!(r.named("optimality_gap").count(), toy_config().toy.noise_grid.len());
    }

    #[test]
    fn noise_sweep_tv_is_monotone() {
        let rows = sweep_noise(&toy_config(), &[0.01, 0.05, 0.1, 0.25, 0.5]).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.windows(2).all(|w| w[1].tv > w[0].tv));
    }
}
