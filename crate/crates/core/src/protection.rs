use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{ParamVector, RoundRecord};
use crate::error::{Error, Result};

/// Isotropic Gaussian distortion with per-coordinate variance `variance`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub variance: f64,
    pub dim: usize,
}

impl NoiseSpec {
    pub fn new(variance: f64, dim: usize) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::Config(format!("noise variance must be finite and >= 0, got {variance}")));
        }
        if dim == 0 {
            return Err(Error::Config("noise dimension must be positive".into()));
        }
        Ok(Self { variance, dim })
    }
}

/// Adds `N(0, variance I)` noise; returns the distorted vector and the noise.
pub fn distort<R: Rng + ?Sized>(
    w: &ParamVector<f64>,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<(ParamVector<f64>, ParamVector<f64>)> {
    if w.dim() != spec.dim {
        return Err(Error::shape(spec.dim, w.dim()));
    }
    if spec.variance == 0.0 {
        return Ok((w.clone(), ParamVector::zeros(spec.dim)));
    }
    let sd = spec.variance.sqrt();
    let noise: Vec<f64> = (0..spec.dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let noise = ParamVector::new(noise)?;
    Ok((w + &noise, noise))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseRegime {
    /// `0 < C1 - tau < 0.01`.
    InRegime,
    /// The budget is already met; no noise is added.
    NoProtectionNeeded,
    /// `C1 - tau >= 0.01`; the value is still computed.
    OutOfRegime,
    /// The calibrated variance fell below the normal range and was zeroed.
    Underflow,
    /// Model parameters showed no variance, so the formula yields zero noise.
    DegenerateModelVariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub variance: f64,
    pub regime: NoiseRegime,
}

/// Upper end of the leakage gap for which the calibration is guaranteed.
pub const CALIBRATION_GAP_LIMIT: f64 = 0.01;

/// `sigma_eps^2 = 100 sigma^2 (C1 - tau) / sqrt(d)`.
pub fn calibrate_noise_variance(sigma_sq_model: f64, d: usize, c1_minus_tau: f64) -> Result<NoiseCalibration> {
    if !(sigma_sq_model >= 0.0 && sigma_sq_model.is_finite()) {
        return Err(Error::Validation(format!("model variance must be finite and >= 0, got {sigma_sq_model}")));
    }
    if d == 0 {
        return Err(Error::Validation("dimension must be positive".into()));
    }
    if c1_minus_tau.is_nan() {
        return Err(Error::Validation("leakage gap is NaN".into()));
    }
    if c1_minus_tau <= 0.0 {
        return Ok(NoiseCalibration { variance: 0.0, regime: NoiseRegime::NoProtectionNeeded });
    }
    if sigma_sq_model == 0.0 {
        return Ok(NoiseCalibration { variance: 0.0, regime: NoiseRegime::DegenerateModelVariance });
    }
    let variance = 100.0 * sigma_sq_model * c1_minus_tau / (d as f64).sqrt();
    if variance < f64::MIN_POSITIVE {
        return Ok(NoiseCalibration { variance: 0.0, regime: NoiseRegime::Underflow });
    }
    let regime = if c1_minus_tau >= CALIBRATION_GAP_LIMIT { NoiseRegime::OutOfRegime } else { NoiseRegime::InRegime };
    Ok(NoiseCalibration { variance, regime })
}

/// Lower and upper TV limits `(r/100, 3r/2)` with `r = min(1, sigma_eps^2 sqrt(d) / sigma^2)`.
pub fn tv_sandwich(sigma_sq_model: f64, sigma_eps_sq: f64, d: usize) -> (f64, f64) {
    let r = (sigma_eps_sq * (d as f64).sqrt() / sigma_sq_model).min(1.0);
    (r / 100.0, 1.5 * r)
}

/// Mean over coordinates of the unbiased per-coordinate sample variance.
pub fn estimate_model_param_variance(replicas: &[ParamVector<f64>]) -> Result<f64> {
    if replicas.len() < 2 {
        return Err(Error::Estimation(format!("variance needs at least 2 replicas, got {}", replicas.len())));
    }
    let d = replicas[0].dim();
    if let Some(bad) = replicas.iter().find(|w| w.dim() != d) {
        return Err(Error::shape(d, bad.dim()));
    }
    // Deviations are taken from the first replica so identical replicas give
    // exactly zero instead of rounding noise from the mean.
    let n = replicas.len() as f64;
    let origin = replicas[0].as_slice();
    let mut total = 0.0;
    for j in 0..d {
        let (mut s, mut s2) = (0.0, 0.0);
        for w in replicas {
            let x = w.as_slice()[j] - origin[j];
            s += x;
            s2 += x * x;
        }
        total += (s2 - s * s / n).max(0.0);
    }
    Ok(total / (n - 1.0) / d as f64)
}

/// Variance of the unprotected uploads of `client` at `round` across replica records.
pub fn estimate_from_records(records: &[RoundRecord], round: usize, client: usize) -> Result<f64> {
    let ws: Vec<_> =
        records.iter().filter(|r| r.round == round && r.client == client).map(|r| r.w_local.clone()).collect();
    estimate_model_param_variance(&ws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngSeedTree, StreamTag};

    #[test]
    fn identical_replicas_have_zero_variance() {
        let w = ParamVector::from_f64(&[0.1, -0.7, 1.0 / 3.0]).unwrap();
        assert_eq!(estimate_model_param_variance(&vec![w; 30]).unwrap(), 0.0);
    }

    fn pv(v: &[f64]) -> ParamVector<f64> {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut rng = RngSeedTree::new(1).derive_stream(0, 0, StreamTag::Noise);
        let w = pv(&[0.1, -3.0]);
        let (wt, n) = distort(&w, &NoiseSpec::new(0.0, 2).unwrap(), &mut rng).unwrap();
        assert_eq!(wt, w);
        assert_eq!(n, ParamVector::zeros(2));
    }

    #[test]
    fn negative_variance_rejected() {
        assert!(matches!(NoiseSpec::new(-1.0, 2), Err(Error::Config(_))));
    }

    #[test]
    fn noise_variance_and_mean() {
        let mut rng = RngSeedTree::new(2).derive_stream(0, 0, StreamTag::Noise);
        let spec = NoiseSpec::new(1.0, 3).unwrap();
        let w = pv(&[1.0, 2.0, 3.0]);
        let n = 100_000;
        let mut sums = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let (wt, noise) = distort(&w, &spec, &mut rng).unwrap();
            for j in 0..3 {
                sums[j] += wt.get(j);
                sq[j] += noise.get(j).powi(2);
            }
        }
        for j in 0..3 {
            let mean = sums[j] / n as f64;
            assert!((mean - w.get(j)).abs() <= 5.0 / (n as f64).sqrt());
            // Chi-squared: var of the sample second moment is 2/n.
            let v = sq[j] / n as f64;
            assert!((v - 1.0).abs() <= 5.0 * (2.0 / n as f64).sqrt() && (0.99..=1.01).contains(&v));
        }
    }

    #[test]
    fn fixed_seed_repeats() {
        let t = RngSeedTree::new(3);
        let spec = NoiseSpec::new(0.5, 2).unwrap();
        let w = pv(&[0.0, 0.0]);
        let a = distort(&w, &spec, &mut t.derive_stream(4, 1, StreamTag::Noise)).unwrap();
        let b = distort(&w, &spec, &mut t.derive_stream(4, 1, StreamTag::Noise)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibration_examples() {
        let c = calibrate_noise_variance(1.0, 4, 0.005).unwrap();
        assert!((c.variance - 0.25).abs() < 1e-15);
        assert_eq!(c.regime, NoiseRegime::InRegime);
        let c = calibrate_noise_variance(1.0, 4, 0.0).unwrap();
        assert_eq!((c.variance, c.regime), (0.0, NoiseRegime::NoProtectionNeeded));
        let c = calibrate_noise_variance(2.0, 1, 0.004).unwrap();
        assert!((c.variance - 0.8).abs() < 1e-15);
        assert_eq!(calibrate_noise_variance(1.0, 1, 0.02).unwrap().regime, NoiseRegime::OutOfRegime);
        assert_eq!(calibrate_noise_variance(1e-300, 1, 1e-12).unwrap().regime, NoiseRegime::Underflow);
        assert_eq!(calibrate_noise_variance(0.0, 1, 0.005).unwrap().regime, NoiseRegime::DegenerateModelVariance);
        assert!(calibrate_noise_variance(-1.0, 1, 0.005).is_err());
    }

    #[test]
    fn variance_estimation_examples() {
        let w = pv(&[0.3, 0.3]);
        assert_eq!(estimate_model_param_variance(&[w.clone(), w.clone(), w]).unwrap(), 0.0);
        assert_eq!(estimate_model_param_variance(&[pv(&[0.0, 0.0]), pv(&[2.0, 2.0])]).unwrap(), 2.0);
        assert!(estimate_model_param_variance(&[pv(&[0.0])]).is_err());
    }

    #[test]
    fn variance_estimation_gaussian() {
        use rand_distr::StandardNormal;
        let mut rng = RngSeedTree::new(5).derive_stream(0, 0, StreamTag::Oracle);
        let xs: Vec<_> = (0..10_000).map(|_| pv(&[rng.sample(StandardNormal), rng.sample(StandardNormal)])).collect();
        let v = estimate_model_param_variance(&xs).unwrap();
        assert!((v - 1.0).abs() <= 0.05);
    }
}
