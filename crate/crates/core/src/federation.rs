//! Round orchestration: per-client calibration, local training, distortion
//! and weighted aggregation, with per-round bound evaluation.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{self, BeliefChannel, CandidateUniverse, LikelihoodModel, UpdateRule};
use crate::config::{BudgetSpec, DataConfig, ExperimentConfig};
use crate::divergence::{self, Binning, TvEstimate};
use crate::domain::{ClientShard, DataPoint, ParamVector, RoundRecord};
use crate::error::{Error, Result};
use crate::metrics::{
    self, BoundEntry, BoundReport, ConstantObservation, Constants, TradeoffInput, UtilityBoundInput, UtilityLoss,
};
use crate::model::{self, LinearModel, Optimum};
use crate::protection::{self, NoiseCalibration, NoiseRegime, NoiseSpec};
use crate::rng::{RngSeedTree, StreamTag, SETUP_ROUND};
use crate::sampling;

const BOOTSTRAP_RESAMPLES: usize = 100;

/// Client key for streams that belong to no client.
const GLOBAL_KEY: u64 = u64::MAX;

/// Synthetic linear-regression federation.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub w_true: ParamVector<f64>,
    pub shards: Vec<ClientShard<f64>>,
    /// Per client, the decoy datasets the adversary weighs against the real one.
    pub decoys: Vec<Vec<ClientShard<f64>>>,
    pub pooled: Vec<DataPoint<f64>>,
    pub optimum: Optimum,
}

fn ball_point<R: Rng + ?Sized>(d: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
            return g.into_iter().map(|x| x * r / n).collect();
        }
    }
}

fn perturbed<R: Rng + ?Sized>(w: &ParamVector<f64>, scale: f64, rng: &mut R) -> ParamVector<f64> {
    let d = w.dim() as f64;
    let shift: Vec<f64> = (0..w.dim()).map(|_| scale * rng.sample::<f64, _>(StandardNormal) / d.sqrt()).collect();
    w + &ParamVector::from_raw(shift)
}

fn make_shard<R: Rng + ?Sized>(
    w: &ParamVector<f64>,
    m: usize,
    data: &DataConfig,
    rng: &mut R,
) -> Result<ClientShard<f64>> {
    let points = (0..m)
        .map(|_| {
            let x = ParamVector::new(ball_point(w.dim(), data.feature_radius, rng))?;
            let y = x.dot(w) + data.label_noise * rng.sample::<f64, _>(StandardNormal);
            DataPoint::new(x, y)
        })
        .collect::<Result<Vec<_>>>()?;
    ClientShard::new(points, 1.0)
}

impl SyntheticData {
    pub fn generate(config: &ExperimentConfig) -> Result<Self> {
        let tree = RngSeedTree::new(config.seed);
        let d = config.federation.dim;
        let data = &config.data;
        let mut rng = tree.derive_indexed(SETUP_ROUND, GLOBAL_KEY, StreamTag::Oracle, 0);
        let w_true = ParamVector::new((0..d).map(|_| rng.sample(StandardNormal)).collect())?;

        let mut shards = Vec::new();
        let mut decoys = Vec::new();
        for (k, m) in config.shard_sizes().into_iter().enumerate() {
            let mut rng = tree.derive_indexed(SETUP_ROUND, k as u64, StreamTag::Oracle, 0);
            let w_k = perturbed(&w_true, data.heterogeneity, &mut rng);
            shards.push(make_shard(&w_k, m, data, &mut rng)?);
            let ds = (0..config.privacy.decoys)
                .map(|j| {
                    let mut rng = tree.derive_indexed(SETUP_ROUND, k as u64, StreamTag::Oracle, j as u64 + 1);
                    let w_j = perturbed(&w_true, data.heterogeneity.max(1.0), &mut rng);
                    make_shard(&w_j, m, data, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            decoys.push(ds);
        }
        let pooled: Vec<DataPoint<f64>> = shards.iter().flat_map(|s| s.points().iter().cloned()).collect();
        let optimum = model::solve_optimum(&pooled)?;
        Ok(Self { w_true, shards, decoys, pooled, optimum })
    }
}

/// One local step: `w - eta * mean(grad)` over a Bernoulli(p) batch. An empty
/// batch leaves `w` unchanged. Returns the new parameter and the batch.
pub fn client_training<R: Rng + ?Sized>(
    shard: &ClientShard<f64>,
    w_global: &ParamVector<f64>,
    p: f64,
    learning_rate: f64,
    rng: &mut R,
) -> Result<(ParamVector<f64>, Vec<usize>)> {
    let idx = sampling::draw_indices(shard.len(), p, rng);
    if idx.is_empty() {
        return Ok((w_global.clone(), idx));
    }
    let grads = idx.iter().map(|&i| model::gradient(w_global, &shard.points()[i])).collect::<Result<Vec<_>>>()?;
    let mean = ParamVector::mean(&grads)?;
    Ok((w_global.axpy(-learning_rate, &mean), idx))
}

/// `Σ_k weights_k * uploads_k`.
pub fn aggregate(uploads: &[ParamVector<f64>], weights: &[f64]) -> Result<ParamVector<f64>> {
    ParamVector::weighted_sum(uploads, weights)
}

/// Per-client, per-round measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub round: usize,
    pub client: usize,
    /// `C1_t` used for calibration.
    pub c1t: f64,
    pub tau: Option<f64>,
    pub p: f64,
    pub sampling_free: bool,
    pub c_target: f64,
    pub sigma_sq: f64,
    pub sigma_eps_sq: f64,
    pub noise_regime: NoiseRegime,
    pub tv: TvEstimate,
    pub eps_u: UtilityLoss,
    pub eps_p: f64,
    pub eps_p_stderr: f64,
    /// Unprotected leakage measured this round.
    pub c1_measured: f64,
    pub c1_measured_stderr: f64,
    pub xi: f64,
    pub c6: f64,
    pub expected_variance: f64,
}

/// State carried between rounds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GlobalState {
    /// Next round to run.
    pub round: usize,
    pub aggregate: ParamVector<f64>,
    pub c1t: f64,
    pub c6: f64,
    pub c6_estimate: Option<f64>,
    pub records: Vec<RoundRecord>,
    pub metrics: Vec<ClientMetrics>,
    pub observations: Vec<ConstantObservation>,
}

struct ClientOutcome {
    record: RoundRecord,
    metrics: ClientMetrics,
    entries: Vec<BoundEntry>,
    observation: ConstantObservation,
    constants: Constants,
}

pub struct Federation {
    config: ExperimentConfig,
    budget: BudgetSpec,
    tree: RngSeedTree,
    data: SyntheticData,
    weights: Vec<f64>,
}

impl Federation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = SyntheticData::generate(&config)?;
        Self::with_data(config, data)
    }

    pub fn with_data(config: ExperimentConfig, data: SyntheticData) -> Result<Self> {
        config.validate()?;
        if data.shards.len() != config.federation.clients || data.decoys.len() != data.shards.len() {
            return Err(Error::Config("data does not match federation.clients".into()));
        }
        let budget = config.privacy.budget_spec()?;
        let n: usize = data.shards.iter().map(|s| s.len()).sum();
        let weights = data.shards.iter().map(|s| s.len() as f64 / n as f64).collect();
        LinearModel::new(config.federation.dim, config.federation.gap_constant)?;
        Ok(Self { tree: RngSeedTree::new(config.seed), budget, data, weights, config })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn data(&self) -> &SyntheticData {
        &self.data
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn initial_state(&self) -> GlobalState {
        GlobalState {
            round: 0,
            aggregate: ParamVector::zeros(self.config.federation.dim),
            c1t: self.config.privacy.initial_c1,
            c6: self.config.privacy.c6.unwrap_or(self.config.privacy.c6_initial),
            c6_estimate: None,
            records: Vec::new(),
            metrics: Vec::new(),
            observations: Vec::new(),
        }
    }

    pub fn pooled_loss(&self, w: &ParamVector<f64>) -> Result<f64> {
        model::pooled_loss(w, &self.data.pooled)
    }

    /// Runs round `state.round`; the bound entries of the round are appended
    /// to `report`.
    pub fn run_round(&self, mut state: GlobalState, report: &mut BoundReport) -> Result<GlobalState> {
        let t = state.round;
        let outcomes = (0..self.config.federation.clients)
            .into_par_iter()
            .map(|k| self.client_round(t, k, &state))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        let uploads: Vec<ParamVector<f64>> = outcomes.iter().map(|o| o.record.w_distorted.clone()).collect();
        state.aggregate = aggregate(&uploads, &self.weights)?;
        let c1_next = outcomes.iter().map(|o| o.metrics.c1_measured).sum::<f64>() / outcomes.len() as f64;
        for o in outcomes {
            report.extend(o.entries);
            report.record_constants(Some(t), Some(o.record.client), o.constants);
            state.records.push(o.record);
            state.metrics.push(o.metrics);
            state.observations.push(o.observation);
        }
        state.c1t = c1_next;
        if self.config.privacy.c6.is_none() {
            let est = metrics::estimate_assumption_constants(&state.observations)?.c6;
            state.c6_estimate = est;
            // Keep the previous value when the estimate is missing or degenerate.
            if let Some(c6) = est.filter(|c| *c > 0.0 && c.is_finite()) {
                state.c6 = c6;
            }
        }
        state.round += 1;
        Ok(state)
    }

    /// Runs all configured rounds.
    pub fn run_experiment(&self) -> Result<(GlobalState, BoundReport)> {
        let mut state = self.initial_state();
        let mut report = BoundReport::new();
        for _ in 0..self.config.federation.rounds {
            state = self.run_round(state, &mut report)?;
        }
        Ok((state, report))
    }

    fn client_round(&self, t: usize, k: usize, state: &GlobalState) -> Result<ClientOutcome> {
        let fed = &self.config.federation;
        let privacy = &self.config.privacy;
        let d = fed.dim;
        let shard = &self.data.shards[k];
        let w = &state.aggregate;
        let (rt, rk) = (t as u64, k as u64);

        // Sampling probability.
        let tau = self.budget.tau(t, k, state.c1t);
        let gap = tau.map(|tau| state.c1t - tau);
        let grads = model::gradients(w, shard.points())?;
        let sq = sampling::gradient_sq_sum(&grads);
        let (p, free, c_target) = match (&self.budget, gap) {
            (BudgetSpec::Unprotected { p }, _) => (*p, true, 0.0),
            (_, Some(g)) if g > 0.0 => {
                let c_target = sampling::sampling_target(state.c6, g, sq, fed.sampling_rounds);
                let cal = sampling::calibrate_sampling_probability(c_target).map_err(|e| e.at(t, k))?;
                if cal.free {
                    (privacy.free_sampling_probability, true, c_target)
                } else {
                    (cal.p, false, c_target)
                }
            }
            (_, g) => (privacy.free_sampling_probability, true, g.unwrap_or(0.0)),
        };

        // Replicas of this round's local training, run before the actual
        // upload so the noise can be calibrated to their spread.
        let replicas = (0..fed.replicas)
            .into_par_iter()
            .map(|r| {
                let mut rng = self.tree.derive_indexed(rt, rk, StreamTag::Sample, r as u64 + 1);
                client_training(shard, w, p, fed.learning_rate, &mut rng).map(|(wr, _)| wr)
            })
            .collect::<Result<Vec<_>>>()?;
        let sigma_sq = protection::estimate_model_param_variance(&replicas)?;
        let noise = match gap {
            Some(g) if g > 0.0 => protection::calibrate_noise_variance(sigma_sq, d, g)?,
            _ => NoiseCalibration { variance: 0.0, regime: NoiseRegime::NoProtectionNeeded },
        };
        let spec = NoiseSpec::new(noise.variance, d)?;

        // Actual upload.
        let (w_local, sampled) = client_training(
            shard,
            w,
            p,
            fed.learning_rate,
            &mut self.tree.derive_indexed(rt, rk, StreamTag::Sample, 0),
        )?;
        let (w_distorted, noise_vec) =
            protection::distort(&w_local, &spec, &mut self.tree.derive_indexed(rt, rk, StreamTag::Noise, 0))?;
        let record = RoundRecord {
            round: t,
            client: k,
            sample_prob: p,
            w_before: w.clone(),
            w_local,
            w_distorted,
            sampled_indices: sampled,
            noise: noise_vec,
            noise_var: noise.variance,
        };

        // Protected replicas.
        let protected = replicas
            .par_iter()
            .enumerate()
            .map(|(r, wr)| {
                let mut rng = self.tree.derive_indexed(rt, rk, StreamTag::Noise, r as u64 + 1);
                protection::distort(wr, &spec, &mut rng).map(|(x, _)| x)
            })
            .collect::<Result<Vec<_>>>()?;

        let tv = divergence::tv_monte_carlo(
            &replicas,
            &protected,
            Binning::FreedmanDiaconis,
            &mut self.tree.derive_indexed(rt, rk, StreamTag::Oracle, 0),
        )?;
        let w_star = &self.data.optimum.w;
        let eps_u = metrics::utility_loss(&replicas, &protected, w_star, fed.gap_constant)?;

        // Adversary beliefs.
        let mut candidates = vec![shard.clone()];
        candidates.extend(self.data.decoys[k].iter().cloned());
        let universe = CandidateUniverse::uniform(candidates)?;
        let lik = LikelihoodModel::new(
            sigma_sq + privacy.channel_floor,
            UpdateRule::MeanBatch { learning_rate: fed.learning_rate },
        )?;
        let channel = BeliefChannel::new(&universe, &lik, w, p)?;
        let posts = replicas.iter().map(|x| channel.posterior(x)).collect::<Result<Vec<_>>>()?;
        let posts_tilde = protected.iter().map(|x| channel.posterior(x)).collect::<Result<Vec<_>>>()?;
        let prior = universe.prior();
        let f = adversary::mean_belief(&posts)?;
        let f_tilde = adversary::mean_belief(&posts_tilde)?;
        let c1_measured = adversary::privacy_leakage(&f, prior);
        let eps_p = adversary::privacy_leakage(&f_tilde, prior);
        let c1_se = adversary::leakage_bootstrap_stderr(
            &posts,
            prior,
            BOOTSTRAP_RESAMPLES,
            &mut self.tree.derive_indexed(rt, rk, StreamTag::Oracle, 1),
        )?;
        let eps_p_se = adversary::leakage_bootstrap_stderr(
            &posts_tilde,
            prior,
            BOOTSTRAP_RESAMPLES,
            &mut self.tree.derive_indexed(rt, rk, StreamTag::Oracle, 2),
        )?;
        let mut grid: Vec<ParamVector<f64>> = replicas.iter().chain(&protected).cloned().collect();
        grid.extend(channel.means().iter().cloned());
        let xi = adversary::compute_xi(&channel, &grid, None)?;

        let expected_variance =
            sampling::variance_from_gradients(&grads, p, fed.sampling_rounds)? + d as f64 * noise.variance;

        // Bounds.
        let mut entries = Vec::new();
        if let (Some(tau), Some(g)) = (tau, gap) {
            if g > 0.0 {
                entries.push(BoundEntry::ge("budget_tv", tv.estimate, g, tv.stderr));
                entries.push(BoundEntry::le("budget_leakage", eps_p, tau, eps_p_se));
            }
        }
        let lb = adversary::LeakageBounds::from_values(eps_p, eps_p_se, c1_measured, c1_se, tv, xi);
        entries.extend(lb.entries());
        entries.push(divergence::check_js_tv_bound(&f_tilde, &f, tv, xi));
        let c_d = privacy.delta.map(|delta| Constants::c_d_from(xi, privacy.gamma, delta));
        let mut utility_entries = metrics::check_utility_upper_bound(&UtilityBoundInput {
            eps_u: eps_u.literal,
            eps_u_stderr: eps_u.stderr,
            expected_variance,
            tv: tv.estimate,
            tv_stderr: tv.stderr,
            c6: state.c6,
        });
        utility_entries.extend(metrics::check_tradeoff_bounds(&TradeoffInput {
            eps_p,
            eps_p_stderr: eps_p_se,
            eps_u_literal: eps_u.literal,
            eps_u_stderr: eps_u.stderr,
            expected_variance,
            c1: c1_measured,
            c2: lb.c2,
            c6: state.c6,
            c_d,
            leakage_in_regime: lb.in_regime,
        }));
        if noise.variance == 0.0 {
            // The utility and trade-off results describe a distorted upload.
            for e in &mut utility_entries {
                if e.status == metrics::Status::Fail {
                    *e = e.clone().out_of_regime("no distortion applied");
                }
            }
        }
        entries.extend(utility_entries);
        let entries = entries.into_iter().map(|e| e.at(t, k)).collect();

        let max_norm = replicas.iter().chain(&protected).map(|x| x.norm()).fold(0.0, f64::max);
        let bias = ParamVector::mean(&replicas)?.distance_sq(w_star).sqrt();
        let observation = ConstantObservation { max_norm, bias, tv: tv.estimate };
        let constants = Constants {
            c: fed.gap_constant,
            c1t: state.c1t,
            c2: lb.c2,
            c3: metrics::CONSTANT_MARGIN * max_norm,
            c4: metrics::CONSTANT_MARGIN * bias,
            c5: None,
            c6: state.c6,
            c6_estimate: state.c6_estimate,
            c6_fixed: privacy.c6.is_some(),
            c_d,
            xi,
            gamma: privacy.gamma,
            delta: privacy.delta,
        };
        let metrics = ClientMetrics {
            round: t,
            client: k,
            c1t: state.c1t,
            tau,
            p,
            sampling_free: free,
            c_target,
            sigma_sq,
            sigma_eps_sq: noise.variance,
            noise_regime: noise.regime,
            tv,
            eps_u,
            eps_p,
            eps_p_stderr: eps_p_se,
            c1_measured,
            c1_measured_stderr: c1_se,
            xi,
            c6: state.c6,
            expected_variance,
        };
        Ok(ClientOutcome { record, metrics, entries, observation, constants })
    }
}

/// Convenience wrapper: build the federation and run every round.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(GlobalState, BoundReport)> {
    Federation::new(config.clone())?.run_experiment()
}
