use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::domain::ParamVector;
use crate::error::{Error, Result};
use crate::metrics::BoundEntry;
use crate::scalar::Scalar;

/// Probability mass function over outcomes `0..len`. Outcomes beyond the
/// stored length have mass zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + for<'a> Deserialize<'a>")]
pub struct DiscreteDist<T: Scalar> {
    masses: Vec<T>,
}

impl<T: Scalar> DiscreteDist<T> {
    pub fn new(masses: Vec<T>) -> Result<Self> {
        if masses.is_empty() {
            return Err(Error::Validation("distribution needs at least one outcome".into()));
        }
        if let Some(i) = masses.iter().position(|m| !(m.is_finite() && *m >= T::zero())) {
            return Err(Error::Validation(format!("mass at outcome {i} is negative or non-finite")));
        }
        let total: T = masses.iter().copied().sum();
        if (total - T::one()).abs() > T::mass_tolerance(masses.len()) {
            return Err(Error::Validation(format!("masses sum to {total}, not 1")));
        }
        Ok(Self { masses })
    }

    /// Normalises nonnegative weights.
    pub fn from_weights(weights: Vec<T>) -> Result<Self> {
        let total: T = weights.iter().copied().sum();
        if !(total > T::zero() && total.is_finite()) || weights.iter().any(|w| *w < T::zero()) {
            return Err(Error::Validation("weights must be nonnegative with a positive finite sum".into()));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1);
        let m = T::one() / T::lit(n as f64);
        Self { masses: vec![m; n] }
    }

    pub fn point(n: usize, at: usize) -> Self {
        assert!(at < n);
        let mut masses = vec![T::zero(); n];
        masses[at] = T::one();
        Self { masses }
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mass(&self, i: usize) -> T {
        self.masses.get(i).copied().unwrap_or_else(T::zero)
    }

    pub fn masses(&self) -> &[T] {
        &self.masses
    }

    /// `lambda * self + (1 - lambda) * other`.
    pub fn mix(&self, other: &Self, lambda: T) -> Self {
        let n = self.len().max(other.len());
        let masses = (0..n).map(|i| lambda * self.mass(i) + (T::one() - lambda) * other.mass(i)).collect();
        Self { masses }
    }

    /// Mixture `Σ w_j d_j` of distributions with weights summing to one.
    pub fn mixture(dists: &[Self], weights: &[T]) -> Result<Self> {
        if dists.is_empty() || dists.len() != weights.len() {
            return Err(Error::shape(dists.len(), weights.len()));
        }
        let n = dists.iter().map(|d| d.len()).max().unwrap_or(1);
        let mut masses = vec![T::zero(); n];
        for (d, &w) in dists.iter().zip(weights) {
            for (i, m) in masses.iter_mut().enumerate() {
                *m = *m + w * d.mass(i);
            }
        }
        Self::new(masses)
    }

    pub fn to_f64(&self) -> DiscreteDist<f64> {
        DiscreteDist { masses: self.masses.iter().map(|m| m.to_f64_lossy()).collect() }
    }
}

fn union_len<T: Scalar>(a: &DiscreteDist<T>, b: &DiscreteDist<T>) -> usize {
    a.len().max(b.len())
}

/// `½ Σ |a_i - b_i|`.
pub fn tv_discrete<T: Scalar>(a: &DiscreteDist<T>, b: &DiscreteDist<T>) -> T {
    let s: T = (0..union_len(a, b)).map(|i| (a.mass(i) - b.mass(i)).abs()).sum();
    (s * T::lit(0.5)).min(T::one())
}

/// `Σ a_i ln(a_i / b_i)` in nats; +inf when `a` is not absolutely continuous
/// with respect to `b`.
pub fn kl_discrete<T: Scalar>(a: &DiscreteDist<T>, b: &DiscreteDist<T>) -> T {
    let mut s = T::zero();
    for i in 0..union_len(a, b) {
        let (p, q) = (a.mass(i), b.mass(i));
        if p > T::zero() {
            if q == T::zero() {
                return T::infinity();
            }
            s = s + p * (p / q).ln();
        }
    }
    s.max(T::zero())
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn js_discrete<T: Scalar>(a: &DiscreteDist<T>, b: &DiscreteDist<T>) -> T {
    let half = T::lit(0.5);
    let mut s = T::zero();
    for i in 0..union_len(a, b) {
        let (p, q) = (a.mass(i), b.mass(i));
        let m = half * (p + q);
        if p > T::zero() {
            s = s + half * p * (p / m).ln();
        }
        if q > T::zero() {
            s = s + half * q * (q / m).ln();
        }
    }
    s.max(T::zero()).min(T::lit(std::f64::consts::LN_2))
}

pub fn check_sqrt_js_triangle<T: Scalar>(a: &DiscreteDist<T>, b: &DiscreteDist<T>, c: &DiscreteDist<T>) -> bool {
    let tol = T::lit(1e-12).max(T::epsilon() * T::lit(16.0));
    js_discrete(a, c).sqrt() <= js_discrete(a, b).sqrt() + js_discrete(b, c).sqrt() + tol
}

/// Estimated total variation with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Set when the estimate is a projection-based lower bound.
    pub lower_bound: bool,
}

impl TvEstimate {
    pub fn exact(tv: f64) -> Self {
        Self { estimate: tv, stderr: 0.0, lower_bound: false }
    }
}

/// The JS/TV inequality `JS(F~ || F) <= ¼ (e^{2ξ} - 1)^2 TV^2`, where both
/// beliefs come from one likelihood kernel applied to the parameter
/// distributions whose TV is given.
pub fn check_js_tv_bound(f_tilde: &DiscreteDist<f64>, f: &DiscreteDist<f64>, tv: TvEstimate, xi: f64) -> BoundEntry {
    let c2 = 0.5 * (2.0 * xi).exp_m1();
    let lhs = js_discrete(f_tilde, f);
    // Products go through c2_times_tv so an overflowing C2 with zero TV stays 0.
    let shift = crate::adversary::c2_times_tv(c2, tv.estimate);
    let rhs = shift * shift;
    let se = if shift == 0.0 { 0.0 } else { 2.0 * shift * crate::adversary::c2_times_tv(c2, tv.stderr) };
    BoundEntry::le("js_tv_bound", lhs, rhs, se)
}

/// Isotropic Gaussian `N(mean, variance I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDist {
    pub mean: ParamVector<f64>,
    pub variance: f64,
}

impl GaussianDist {
    pub fn new(mean: ParamVector<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Validation(format!("Gaussian variance must be > 0, got {variance}")));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let r2: f64 = x.iter().zip(self.mean.as_slice()).map(|(a, m)| (a - m) * (a - m)).sum();
        -0.5 * (d * (2.0 * std::f64::consts::PI * self.variance).ln() + r2 / self.variance)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let sd = self.variance.sqrt();
        self.mean.as_slice().iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

/// Exact TV between one-dimensional Gaussians: closed form for a pure mean
/// shift, adaptive Simpson quadrature otherwise.
pub fn tv_gaussian_1d(a: &GaussianDist, b: &GaussianDist) -> Result<f64> {
    if a.dim() != 1 {
        return Err(Error::shape(1, a.dim()));
    }
    if b.dim() != 1 {
        return Err(Error::shape(1, b.dim()));
    }
    let (ma, mb) = (a.mean.get(0), b.mean.get(0));
    if a.variance == b.variance {
        let z = (ma - mb).abs() / (2.0 * a.variance.sqrt());
        return Ok(erf(z / std::f64::consts::SQRT_2));
    }
    let pdf = |g: &GaussianDist, m: f64, x: f64| {
        (-(x - m) * (x - m) / (2.0 * g.variance)).exp() / (2.0 * std::f64::consts::PI * g.variance).sqrt()
    };
    let f = |x: f64| 0.5 * (pdf(a, ma, x) - pdf(b, mb, x)).abs();
    let s = a.variance.sqrt().max(b.variance.sqrt());
    let lo = ma.min(mb) - 14.0 * s;
    let hi = ma.max(mb) + 14.0 * s;
    Ok(integrate(&f, lo, hi, 1e-13).clamp(0.0, 1.0))
}

/// Adaptive Simpson quadrature over `[lo, hi]` with a target absolute error.
pub fn integrate(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    const PANELS: usize = 256;
    let h = (hi - lo) / PANELS as f64;
    (0..PANELS)
        .map(|i| {
            let a = lo + i as f64 * h;
            let b = a + h;
            let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
            let whole = h / 6.0 * (fa + 4.0 * fm + fb);
            simpson(f, a, b, fa, fm, fb, whole, tol / PANELS as f64, 40)
        })
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Unbiased density-ratio estimate `TV = E_{x~a}[(1 - f_b(x)/f_a(x))_+]`
/// from `n` draws of `a`.
pub fn tv_gaussian_monte_carlo<R: Rng + ?Sized>(
    a: &GaussianDist,
    b: &GaussianDist,
    n: usize,
    rng: &mut R,
) -> Result<TvEstimate> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    if n < 2 {
        return Err(Error::Estimation("density-ratio TV needs at least 2 draws".into()));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let x = a.sample(rng);
        let h = (-(b.log_density(&x) - a.log_density(&x)).exp_m1()).max(0.0);
        sum += h;
        sum_sq += h * h;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    Ok(TvEstimate { estimate: mean, stderr: (var / nf).sqrt(), lower_bound: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Binning {
    /// Fixed number of bins per coordinate (or per projection).
    Fixed(usize),
    /// Freedman-Diaconis width, clipped to `[MIN_BINS, MAX_BINS]` bins.
    FreedmanDiaconis,
}

pub const MIN_BINS: usize = 16;
pub const MAX_BINS: usize = 256;
pub const PROJECTIONS: usize = 32;
pub const BOOTSTRAP_RESAMPLES: usize = 100;

struct Axis {
    lo: f64,
    width: f64,
    bins: usize,
}

impl Axis {
    fn new(values: &[f64], binning: Binning) -> Self {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let bins = match binning {
            Binning::Fixed(b) => b,
            Binning::FreedmanDiaconis => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                let iqr = quantile(&v, 0.75) - quantile(&v, 0.25);
                let h = 2.0 * iqr / (v.len() as f64).cbrt();
                let raw = if h > 0.0 { (range / h).ceil() } else { MAX_BINS as f64 };
                (raw as usize).clamp(MIN_BINS, MAX_BINS)
            }
        };
        let width = if range > 0.0 { range / bins as f64 } else { 1.0 };
        Self { lo, width, bins }
    }

    fn index(&self, x: f64) -> u64 {
        (((x - self.lo) / self.width) as usize).min(self.bins - 1) as u64
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

fn histogram_tv(
    cells_a: &[u64],
    idx_a: &mut dyn Iterator<Item = usize>,
    cells_b: &[u64],
    idx_b: &mut dyn Iterator<Item = usize>,
) -> f64 {
    // Ordered map so the summation order, and hence the last bits, is reproducible.
    let mut counts: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in idx_a {
        counts.entry(cells_a[i]).or_default().0 += 1.0;
        na += 1.0;
    }
    for i in idx_b {
        counts.entry(cells_b[i]).or_default().1 += 1.0;
        nb += 1.0;
    }
    let s: f64 = counts.values().map(|(ca, cb)| (ca / na - cb / nb).abs()).sum();
    (0.5 * s).min(1.0)
}

/// Histogram TV between two parameter samples on a shared binning, with a
/// bootstrap standard error. For `d <= 3` cells are products of per-axis
/// bins; above that, the largest TV over random 1D projections is reported
/// and flagged as a lower bound.
pub fn tv_monte_carlo<R: Rng + ?Sized>(
    sample_a: &[ParamVector<f64>],
    sample_b: &[ParamVector<f64>],
    binning: Binning,
    rng: &mut R,
) -> Result<TvEstimate> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::Estimation("TV estimate needs two nonempty samples".into()));
    }
    if let Binning::Fixed(b) = binning {
        if !(2..=MAX_BINS * 256).contains(&b) {
            return Err(Error::Validation(format!("bin count {b} must be >= 2")));
        }
    }
    let d = sample_a[0].dim();
    if let Some(bad) = sample_a.iter().chain(sample_b).find(|w| w.dim() != d) {
        return Err(Error::shape(d, bad.dim()));
    }
    let (na, nb) = (sample_a.len(), sample_b.len());

    // Each "view" maps the samples to histogram cells; the estimate is the
    // maximum over views (one view when d <= 3).
    let views: Vec<(Vec<u64>, Vec<u64>)> = if d <= 3 {
        let axes: Vec<Axis> = (0..d)
            .map(|j| {
                let col: Vec<f64> = sample_a.iter().chain(sample_b).map(|w| w.get(j)).collect();
                Axis::new(&col, binning)
            })
            .collect();
        let cell = |w: &ParamVector<f64>| {
            axes.iter().enumerate().fold(0u64, |acc, (j, ax)| acc * (ax.bins as u64) + ax.index(w.get(j)))
        };
        vec![(sample_a.iter().map(cell).collect(), sample_b.iter().map(cell).collect())]
    } else {
        (0..PROJECTIONS)
            .map(|_| {
                let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|x| *x /= norm);
                let proj = |w: &ParamVector<f64>| w.as_slice().iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
                let pa: Vec<f64> = sample_a.iter().map(proj).collect();
                let pb: Vec<f64> = sample_b.iter().map(proj).collect();
                let all: Vec<f64> = pa.iter().chain(&pb).cloned().collect();
                let ax = Axis::new(&all, binning);
                (pa.iter().map(|&x| ax.index(x)).collect(), pb.iter().map(|&x| ax.index(x)).collect())
            })
            .collect()
    };

    let estimate_with = |ia: &[usize], ib: &[usize]| {
        views
            .iter()
            .map(|(ca, cb)| histogram_tv(ca, &mut ia.iter().copied(), cb, &mut ib.iter().copied()))
            .fold(0.0, f64::max)
    };
    let all_a: Vec<usize> = (0..na).collect();
    let all_b: Vec<usize> = (0..nb).collect();
    let estimate = estimate_with(&all_a, &all_b);

    let mut boots = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut ia = vec![0usize; na];
    let mut ib = vec![0usize; nb];
    for _ in 0..BOOTSTRAP_RESAMPLES {
        ia.iter_mut().for_each(|i| *i = rng.random_range(0..na));
        ib.iter_mut().for_each(|i| *i = rng.random_range(0..nb));
        boots.push(estimate_with(&ia, &ib));
    }
    let (_, var) = crate::metrics::mean_var(&boots);
    Ok(TvEstimate { estimate, stderr: var.sqrt(), lower_bound: d > 3 })
}
