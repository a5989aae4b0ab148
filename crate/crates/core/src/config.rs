//! Experiment configuration: a TOML file with `[federation]`, `[privacy]`,
//! `[data]` and `[toy]` sections. Every section and key is optional; unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling;
use crate::toy::ToySpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Must fit in 63 bits so the file stays valid TOML.
    pub seed: u64,
    pub federation: FederationConfig,
    pub privacy: PrivacyConfig,
    pub data: DataConfig,
    pub toy: ToySpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            federation: FederationConfig::default(),
            privacy: PrivacyConfig::default(),
            data: DataConfig::default(),
            toy: ToySpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub dim: usize,
    /// Points per client, used when `shard_sizes` is absent.
    pub shard_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shard_sizes: Option<Vec<usize>>,
    pub learning_rate: f64,
    /// `N` in the sampling-variance formula.
    pub sampling_rounds: usize,
    /// Replica runs per client and round for variance and TV estimates.
    pub replicas: usize,
    /// `C` in `GAP = C ||w - w*||^2`.
    pub gap_constant: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 2,
            rounds: 20,
            dim: 2,
            shard_size: 8,
            shard_sizes: None,
            learning_rate: 0.8,
            sampling_rounds: 1,
            replicas: 30,
            gap_constant: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    /// Fixed sampling probability for runs without a budget.
    #[serde(alias = "p", skip_serializing_if = "Option::is_none")]
    pub sampling_probability: Option<f64>,
    /// Uniform budget `tau` for every client and round.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    /// Per-round rows of per-client budgets.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budgets: Option<Vec<Vec<f64>>>,
    /// Budget set to `C1_t - budget_gap` each round.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_gap: Option<f64>,
    /// `C1` for round 0.
    pub initial_c1: f64,
    /// Fixed `C6`. When absent it is estimated from earlier rounds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c6: Option<f64>,
    /// `C6` used before any estimate is available.
    pub c6_initial: f64,
    /// Probability used when the budget does not constrain sampling.
    pub free_sampling_probability: f64,
    /// Floor added to the adversary's channel variance.
    pub channel_floor: f64,
    /// Decoy datasets per client in the adversary's candidate set.
    pub decoys: usize,
    pub gamma: f64,
    /// Assumption constant for the no-free-lunch bound; the bound is skipped
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            sampling_probability: None,
            budget: None,
            budgets: None,
            budget_gap: None,
            initial_c1: 0.05,
            c6: None,
            c6_initial: 1.0,
            free_sampling_probability: 1.0,
            channel_floor: 1e-6,
            decoys: 3,
            gamma: 1.0,
            delta: None,
        }
    }
}

/// Resolved budget rule.
#[derive(Clone, Debug, PartialEq)]
pub enum BudgetSpec {
    /// No privacy budget: no noise, sampling with the fixed probability.
    Unprotected {
        p: f64,
    },
    Uniform(f64),
    PerRound(Vec<Vec<f64>>),
    GapBelowC1(f64),
}

impl BudgetSpec {
    /// `tau` for round `t`, client `k`, given the current `C1_t`.
    pub fn tau(&self, t: usize, k: usize, c1t: f64) -> Option<f64> {
        match self {
            BudgetSpec::Unprotected { .. } => None,
            BudgetSpec::Uniform(tau) => Some(*tau),
            BudgetSpec::PerRound(rows) => Some(rows[t][k]),
            BudgetSpec::GapBelowC1(g) => Some((c1t - g).max(0.0)),
        }
    }
}

impl PrivacyConfig {
    pub fn budget_spec(&self) -> Result<BudgetSpec> {
        let set =
            [self.budget.is_some(), self.budgets.is_some(), self.budget_gap.is_some()].iter().filter(|&&b| b).count();
        if set > 1 {
            return Err(Error::Config("privacy: set at most one of budget, budgets, budget_gap".into()));
        }
        if set == 1 && self.sampling_probability.is_some() {
            return Err(Error::Config(
                "privacy.sampling_probability conflicts with a privacy budget: \
                 with a budget the sampling probability is calibrated, so remove one of them"
                    .into(),
            ));
        }
        Ok(if let Some(tau) = self.budget {
            BudgetSpec::Uniform(tau)
        } else if let Some(rows) = &self.budgets {
            BudgetSpec::PerRound(rows.clone())
        } else if let Some(g) = self.budget_gap {
            BudgetSpec::GapBelowC1(g)
        } else {
            BudgetSpec::Unprotected { p: self.sampling_probability.unwrap_or(1.0) }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Feature radius; features are uniform in this ball.
    pub feature_radius: f64,
    /// Standard deviation of label noise.
    pub label_noise: f64,
    /// Scale of per-client perturbations of the true weights.
    pub heterogeneity: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { feature_radius: 1.0, label_noise: 0.1, heterogeneity: 0.3 }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(name, format!("must be a finite value > 0, got {v}")))
    }
}

fn nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(name, format!("must be a finite value >= 0, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn shard_sizes(&self) -> Vec<usize> {
        self.federation.shard_sizes.clone().unwrap_or_else(|| vec![self.federation.shard_size; self.federation.clients])
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        if self.seed > i64::MAX as u64 {
            return Err(field("seed", "must be below 2^63"));
        }
        if f.clients == 0 {
            return Err(field("federation.clients", "must be >= 1"));
        }
        if f.dim == 0 {
            return Err(field("federation.dim", "must be >= 1"));
        }
        let sizes = self.shard_sizes();
        if sizes.len() != f.clients {
            return Err(field(
                "federation.shard_sizes",
                format!("has {} entries for {} clients", sizes.len(), f.clients),
            ));
        }
        if sizes.contains(&0) {
            return Err(field("federation.shard_sizes", "every shard needs at least one point"));
        }
        positive("federation.learning_rate", f.learning_rate)?;
        if f.sampling_rounds == 0 {
            return Err(field("federation.sampling_rounds", "must be >= 1"));
        }
        if f.replicas < crate::metrics::MIN_REPLICAS {
            return Err(field("federation.replicas", format!("must be >= {}", crate::metrics::MIN_REPLICAS)));
        }
        positive("federation.gap_constant", f.gap_constant)?;

        let p = &self.privacy;
        let spec = p.budget_spec()?;
        match &spec {
            BudgetSpec::Unprotected { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(field("privacy.sampling_probability", "must lie in [0, 1]"));
                }
            }
            BudgetSpec::Uniform(tau) => nonneg("privacy.budget", *tau)?,
            BudgetSpec::PerRound(rows) => {
                if rows.len() != f.rounds {
                    return Err(field("privacy.budgets", format!("has {} rows for {} rounds", rows.len(), f.rounds)));
                }
                for row in rows {
                    if row.len() != f.clients {
                        return Err(field(
                            "privacy.budgets",
                            format!("row of length {} for {} clients", row.len(), f.clients),
                        ));
                    }
                    for &tau in row {
                        nonneg("privacy.budgets", tau)?;
                    }
                }
            }
            BudgetSpec::GapBelowC1(g) => nonneg("privacy.budget_gap", *g)?,
        }
        nonneg("privacy.initial_c1", p.initial_c1)?;
        if let Some(c6) = p.c6 {
            positive("privacy.c6", c6)?;
        }
        positive("privacy.c6_initial", p.c6_initial)?;
        if !(0.0..=1.0).contains(&p.free_sampling_probability) {
            return Err(field("privacy.free_sampling_probability", "must lie in [0, 1]"));
        }
        positive("privacy.channel_floor", p.channel_floor)?;
        if p.decoys == 0 || p.decoys + 1 > crate::adversary::MAX_CANDIDATES {
            return Err(field("privacy.decoys", format!("must lie in 1..={}", crate::adversary::MAX_CANDIDATES - 1)));
        }
        positive("privacy.gamma", p.gamma)?;
        if let Some(delta) = p.delta {
            positive("privacy.delta", delta)?;
        }

        let d = &self.data;
        positive("data.feature_radius", d.feature_radius)?;
        nonneg("data.label_noise", d.label_noise)?;
        nonneg("data.heterogeneity", d.heterogeneity)?;

        self.toy.validate()
    }

    /// Non-fatal problems worth recording in the run manifest.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let p = &self.privacy;
        let Ok(spec) = p.budget_spec() else { return out };
        let gap0 = spec.tau(0, 0, p.initial_c1).map(|tau| p.initial_c1 - tau);
        if let Some(gap) = gap0 {
            if gap >= crate::protection::CALIBRATION_GAP_LIMIT {
                out.push(format!(
                    "initial C1 - tau = {gap} is outside the noise calibration regime (0, {})",
                    crate::protection::CALIBRATION_GAP_LIMIT
                ));
            }
            // Worst case for the sampling target: unit-ball features and
            // parameters of unit size give squared gradients of order one
            // per point.
            let m = self.shard_sizes().into_iter().min().unwrap_or(1) as f64;
            let c6 = p.c6.unwrap_or(p.c6_initial);
            let c = sampling::sampling_target(c6, gap, m, self.federation.sampling_rounds);
            if c > 0.25 {
                out.push(format!(
                    "sampling target {c} for round 0 exceeds 1/4 at unit gradient scale; \
                     the budget is likely infeasible"
                ));
            }
        }
        if p.delta.is_none() {
            out.push("privacy.delta unset: the no-free-lunch bound is skipped".into());
        }
        out
    }

    /// Warnings relevant to the toy instance used by `verify-bounds` and the
    /// noise sweep.
    pub fn toy_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.toy.delta.is_none() {
            out.push("toy.delta unset: the no-free-lunch bound is skipped".into());
        }
        out
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Reads, parses and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path.as_ref())?;
    ExperimentConfig::from_toml_str(&text)
}

pub fn write_config(config: &ExperimentConfig, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, config.to_toml_string()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn minimal_config_is_valid() {
        let c = ExperimentConfig::from_toml_str("[federation]\nclients = 1\nrounds = 1\ndim = 1\n").unwrap();
        assert_eq!(c.federation.clients, 1);
        assert_eq!(c.federation.replicas, 30);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ExperimentConfig::from_toml_str("[federation]\nclinets = 2\n").unwrap_err();
        assert!(e.to_string().contains("clinets"), "{e}");
        assert!(ExperimentConfig::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn zero_clients_names_the_field() {
        let e = ExperimentConfig::from_toml_str("[federation]\nclients = 0\n").unwrap_err();
        assert!(e.to_string().contains("federation.clients"), "{e}");
    }

    #[test]
    fn p_and_budget_conflict() {
        let e = ExperimentConfig::from_toml_str("[privacy]\np = 0.5\nbudget_gap = 0.005\n").unwrap_err();
        assert!(e.to_string().contains("conflicts"), "{e}");
        let e = ExperimentConfig::from_toml_str("[privacy]\nbudget = 0.01\nbudget_gap = 0.002\n").unwrap_err();
        assert!(e.to_string().contains("at most one"), "{e}");
    }

    #[test]
    fn fixed_p_without_budget() {
        let c = ExperimentConfig::from_toml_str("[privacy]\np = 0.5\n").unwrap();
        assert_eq!(c.privacy.budget_spec().unwrap(), BudgetSpec::Unprotected { p: 0.5 });
    }

    #[test]
    fn infeasible_budget_is_a_warning() {
        let mut c = ExperimentConfig::default();
        c.privacy.budget = Some(0.0);
        c.privacy.initial_c1 = 0.5;
        c.privacy.c6 = Some(100.0);
        c.validate().unwrap();
        let w = c.warnings();
        assert!(w.iter().any(|s| s.contains("infeasible")), "{w:?}");
    }

    #[test]
    fn budget_rows_checked() {
        let mut c = ExperimentConfig::default();
        c.federation.rounds = 2;
        c.privacy.budgets = Some(vec![vec![0.01, 0.01]]);
        assert!(c.validate().unwrap_err().to_string().contains("privacy.budgets"));
        c.privacy.budgets = Some(vec![vec![0.01, 0.01], vec![0.02, 0.03]]);
        c.validate().unwrap();
        assert_eq!(c.privacy.budget_spec().unwrap().tau(1, 1, 0.0), Some(0.03));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        let mut c = ExperimentConfig::default();
        c.privacy.c6 = Some(2.5);
        c.federation.shard_sizes = Some(vec![3, 5]);
        write_config(&c, &path).unwrap();
        assert_eq!(load_config(&path).unwrap(), c);
        assert!(matches!(load_config(dir.path().join("missing.toml")), Err(Error::Io(_))));
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        (
            0u64..=i64::MAX as u64,
            1usize..5,
            1usize..30,
            1usize..6,
            1e-3f64..2.0,
            prop::option::of(1e-3f64..100.0),
            0.0f64..0.01,
            prop::option::of(0.1f64..5.0),
            proptest::collection::vec(1e-4f64..1.0, 1..6),
        )
            .prop_map(|(seed, clients, rounds, dim, lr, c6, gap, delta, grid)| {
                let mut c = ExperimentConfig { seed, ..Default::default() };
                c.federation.clients = clients;
                c.federation.rounds = rounds;
                c.federation.dim = dim;
                c.federation.learning_rate = lr;
                c.privacy.c6 = c6;
                c.privacy.budget_gap = Some(gap);
                c.privacy.delta = delta;
                c.toy.noise_grid = grid;
                c
            })
    }

    proptest! {
        #[test]
        fn toml_round_trip(c in arb_config()) {
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
