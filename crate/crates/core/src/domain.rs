use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fixed-length, finite parameter vector. Also used for features, gradients
/// and noise draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<T>", into = "Vec<T>", bound = "T: Scalar + Serialize + for<'a> Deserialize<'a>")]
pub struct ParamVector<T: Scalar> {
    values: Vec<T>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("parameter vector must have dimension >= 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn zeros(d: usize) -> Self {
        assert!(d >= 1, "dimension must be positive");
        Self { values: vec![T::zero(); d] }
    }

    pub fn filled(d: usize, v: T) -> Self {
        assert!(d >= 1 && v.is_finite());
        Self { values: vec![v; d] }
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::lit(v)).collect())
    }

    // Results of arithmetic on finite inputs; overflow is checked by callers
    // that care via `is_finite`.
    pub(crate) fn from_raw(values: Vec<T>) -> Self {
        debug_assert!(!values.is_empty());
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn get(&self, i: usize) -> T {
        self.values[i]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim() == other.dim() {
            Ok(())
        } else {
            Err(Error::shape(self.dim(), other.dim()))
        }
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    pub fn checked_dot(&self, other: &Self) -> Result<T> {
        self.check_dim(other)?;
        Ok(self.dot(other))
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        Self::from_raw(self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn scale(&self, c: T) -> Self {
        Self::from_raw(self.values.iter().map(|&v| v * c).collect())
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: T, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + c * b)
    }

    pub fn dot(&self, other: &Self) -> T {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        self.values.iter().zip(&other.values).map(|(&a, &b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    pub fn norm(&self) -> T {
        // Scaled to avoid overflow for large entries.
        let m = self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if m == T::zero() {
            return T::zero();
        }
        let s: T = self.values.iter().map(|&v| (v / m) * (v / m)).sum();
        m * s.sqrt()
    }

    pub fn distance_sq(&self, other: &Self) -> T {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        self.values.iter().zip(&other.values).map(|(&a, &b)| (a - b) * (a - b)).sum()
    }

    /// Arithmetic mean of equally sized vectors.
    pub fn mean(vectors: &[Self]) -> Result<Self> {
        let first = vectors.first().ok_or_else(|| Error::Estimation("mean of an empty set of vectors".into()))?;
        let mut acc = vec![T::zero(); first.dim()];
        for v in vectors {
            first.check_dim(v)?;
            for (a, &x) in acc.iter_mut().zip(&v.values) {
                *a = *a + x;
            }
        }
        let n = T::lit(vectors.len() as f64);
        Ok(Self::from_raw(acc.into_iter().map(|a| a / n).collect()))
    }

    /// Weighted sum `Σ w_i v_i`.
    pub fn weighted_sum(vectors: &[Self], weights: &[T]) -> Result<Self> {
        if vectors.len() != weights.len() {
            return Err(Error::shape(vectors.len(), weights.len()));
        }
        let first = vectors.first().ok_or_else(|| Error::Validation("weighted sum of no vectors".into()))?;
        let mut acc = vec![T::zero(); first.dim()];
        for (v, &w) in vectors.iter().zip(weights) {
            first.check_dim(v)?;
            for (a, &x) in acc.iter_mut().zip(&v.values) {
                *a = *a + w * x;
            }
        }
        Ok(Self::from_raw(acc))
    }

    pub fn to_f64(&self) -> ParamVector<f64> {
        ParamVector::from_raw(self.values.iter().map(|v| v.to_f64_lossy()).collect())
    }
}

impl<T: Scalar> TryFrom<Vec<T>> for ParamVector<T> {
    type Error = Error;
    fn try_from(v: Vec<T>) -> Result<Self> {
        Self::new(v)
    }
}

impl<T: Scalar> From<ParamVector<T>> for Vec<T> {
    fn from(p: ParamVector<T>) -> Vec<T> {
        p.values
    }
}

impl<T: Scalar> Add for &ParamVector<T> {
    type Output = ParamVector<T>;
    fn add(self, rhs: Self) -> ParamVector<T> {
        self.zip_with(rhs, |a, b| a + b)
    }
}

impl<T: Scalar> Sub for &ParamVector<T> {
    type Output = ParamVector<T>;
    fn sub(self, rhs: Self) -> ParamVector<T> {
        self.zip_with(rhs, |a, b| a - b)
    }
}

impl<T: Scalar> Mul<T> for &ParamVector<T> {
    type Output = ParamVector<T>;
    fn mul(self, c: T) -> ParamVector<T> {
        self.scale(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + for<'a> Deserialize<'a>")]
pub struct DataPoint<T: Scalar> {
    pub feature: ParamVector<T>,
    pub label: T,
}

impl<T: Scalar> DataPoint<T> {
    pub fn new(feature: ParamVector<T>, label: T) -> Result<Self> {
        if !label.is_finite() {
            return Err(Error::Validation("label must be finite".into()));
        }
        Ok(Self { feature, label })
    }
}

/// One client's local dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + for<'a> Deserialize<'a>")]
pub struct ClientShard<T: Scalar> {
    points: Vec<DataPoint<T>>,
    sample_prob: f64,
}

impl<T: Scalar> ClientShard<T> {
    pub fn new(points: Vec<DataPoint<T>>, sample_prob: f64) -> Result<Self> {
        let first =
            points.first().ok_or_else(|| Error::Validation("client shard must hold at least one point".into()))?;
        let d = first.feature.dim();
        if let Some(bad) = points.iter().find(|p| p.feature.dim() != d) {
            return Err(Error::shape(d, bad.feature.dim()));
        }
        check_probability(sample_prob)?;
        Ok(Self { points, sample_prob })
    }

    pub fn points(&self) -> &[DataPoint<T>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points[0].feature.dim()
    }

    pub fn sample_prob(&self) -> f64 {
        self.sample_prob
    }

    pub fn with_sample_prob(&self, p: f64) -> Result<Self> {
        check_probability(p)?;
        Ok(Self { points: self.points.clone(), sample_prob: p })
    }
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Validation(format!("probability {p} outside [0, 1]")))
    }
}

/// Per-round, per-client log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client: usize,
    pub sample_prob: f64,
    pub w_before: ParamVector<f64>,
    pub w_local: ParamVector<f64>,
    pub w_distorted: ParamVector<f64>,
    pub sampled_indices: Vec<usize>,
    pub noise: ParamVector<f64>,
    pub noise_var: f64,
}

impl RoundRecord {
    /// Checks that the distorted upload is the local parameter plus the logged noise.
    pub fn noise_consistent(&self) -> bool {
        self.w_distorted.as_slice().iter().zip(self.w_local.as_slice()).zip(self.noise.as_slice()).all(
            |((&wd, &wl), &n)| {
                let tol = f64::EPSILON * (wd.abs().max(wl.abs()).max(n.abs()).max(1.0)) * 2.0;
                ((wd - wl) - n).abs() <= tol
            },
        )
    }
}
