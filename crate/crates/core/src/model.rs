use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{DataPoint, ParamVector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Linear predictor with squared loss and the surrogate `C * ||w - w*||^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub dim: usize,
    pub gap_constant: f64,
}

impl LinearModel {
    pub fn new(dim: usize, gap_constant: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("model dimension must be positive".into()));
        }
        if !(gap_constant > 0.0 && gap_constant.is_finite()) {
            return Err(Error::Validation(format!("gap constant must be > 0, got {gap_constant}")));
        }
        Ok(Self { dim, gap_constant })
    }
}

fn residual<T: Scalar>(w: &ParamVector<T>, point: &DataPoint<T>) -> Result<T> {
    Ok(point.feature.checked_dot(w)? - point.label)
}

/// `(x . w - y)^2`.
pub fn loss<T: Scalar>(w: &ParamVector<T>, point: &DataPoint<T>) -> Result<T> {
    let r = residual(w, point)?;
    Ok(r * r)
}

/// `2 (x . w - y) x`.
pub fn gradient<T: Scalar>(w: &ParamVector<T>, point: &DataPoint<T>) -> Result<ParamVector<T>> {
    let r = residual(w, point)?;
    Ok(point.feature.scale(T::lit(2.0) * r))
}

pub fn gradients<T: Scalar>(w: &ParamVector<T>, points: &[DataPoint<T>]) -> Result<Vec<ParamVector<T>>> {
    points.iter().map(|p| gradient(w, p)).collect()
}

pub fn gap<T: Scalar>(w: &ParamVector<T>, w_star: &ParamVector<T>, c: T) -> Result<T> {
    if w.dim() != w_star.dim() {
        return Err(Error::shape(w_star.dim(), w.dim()));
    }
    if !(c > T::zero()) {
        return Err(Error::Validation("gap constant must be > 0".into()));
    }
    Ok(c * w.distance_sq(w_star))
}

/// Mean loss over the pooled points.
pub fn pooled_loss<T: Scalar>(w: &ParamVector<T>, points: &[DataPoint<T>]) -> Result<T> {
    if points.is_empty() {
        return Err(Error::Validation("no data points".into()));
    }
    let mut s = T::zero();
    for p in points {
        s = s + loss(w, p)?;
    }
    Ok(s / T::lit(points.len() as f64))
}

pub fn pooled_gradient<T: Scalar>(w: &ParamVector<T>, points: &[DataPoint<T>]) -> Result<ParamVector<T>> {
    let g = gradients(w, points)?;
    ParamVector::mean(&g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimum {
    pub w: ParamVector<f64>,
    pub rank: usize,
    /// Set when the design matrix lacks full column rank; `w` is then the
    /// minimum-norm minimiser.
    pub rank_deficient: bool,
}

/// Least-squares minimiser of the pooled loss via SVD.
pub fn solve_optimum(points: &[DataPoint<f64>]) -> Result<Optimum> {
    let first = points.first().ok_or_else(|| Error::Validation("no data points".into()))?;
    let d = first.feature.dim();
    let n = points.len();
    let mut x = DMatrix::<f64>::zeros(n, d);
    let mut y = DVector::<f64>::zeros(n);
    for (i, p) in points.iter().enumerate() {
        if p.feature.dim() != d {
            return Err(Error::shape(d, p.feature.dim()));
        }
        for (j, &v) in p.feature.as_slice().iter().enumerate() {
            x[(i, j)] = v;
        }
        y[i] = p.label;
    }
    let svd = x.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * f64::EPSILON * (n.max(d) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let sol = if smax == 0.0 {
        DVector::zeros(d)
    } else {
        svd.solve(&y, eps).map_err(|e| Error::Estimation(e.to_string()))?
    };
    Ok(Optimum { w: ParamVector::new(sol.iter().cloned().collect())?, rank, rank_deficient: rank < d })
}

/// True iff every point, relabelled as `x . w*`, has loss at `w` no larger
/// than the surrogate gap. Holds whenever `||x||^2 <= C`.
pub fn check_gap_dominates_loss<T: Scalar>(
    w: &ParamVector<T>,
    w_star: &ParamVector<T>,
    points: &[DataPoint<T>],
    c: T,
) -> Result<bool> {
    let g = gap(w, w_star, c)?;
    for p in points {
        let realizable = DataPoint { feature: p.feature.clone(), label: p.feature.checked_dot(w_star)? };
        if loss(w, &realizable)? > g + T::lit(1e-9) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngSeedTree, StreamTag};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn pv(v: &[f64]) -> ParamVector<f64> {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn pt(x: &[f64], y: f64) -> DataPoint<f64> {
        DataPoint::new(pv(x), y).unwrap()
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&pv(&[0.0, 0.0]), &pt(&[1.0, 1.0], 0.0)).unwrap(), 0.0);
        assert_eq!(loss(&pv(&[1.0, 2.0]), &pt(&[1.0, 1.0], 0.0)).unwrap(), 9.0);
        assert_eq!(loss(&pv(&[1.0, 2.0]), &pt(&[2.0, 0.0], 1.0)).unwrap(), 1.0);
        assert!(matches!(loss(&pv(&[1.0]), &pt(&[1.0, 1.0], 0.0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(gradient(&pv(&[0.0, 0.0]), &pt(&[1.0, 0.0], 0.0)).unwrap(), pv(&[0.0, 0.0]));
        assert_eq!(gradient(&pv(&[1.0, 0.0]), &pt(&[1.0, 0.0], 0.0)).unwrap(), pv(&[2.0, 0.0]));
        assert!(gradient(&pv(&[1.0]), &pt(&[1.0, 0.0], 0.0)).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = RngSeedTree::new(11).derive_stream(0, 0, StreamTag::Oracle);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let d = rng.random_range(1..6);
            let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let y: f64 = rng.sample(StandardNormal);
            let p = pt(&x, y);
            let g = gradient(&pv(&w), &p).unwrap();
            for j in 0..d {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                let fd = (loss(&pv(&wp), &p).unwrap() - loss(&pv(&wm), &p).unwrap()) / (2.0 * h);
                let scale = g.norm().max(1.0);
                worst = worst.max((fd - g.get(j)).abs() / scale);
            }
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn gap_examples() {
        let w = pv(&[0.3, -1.2]);
        assert_eq!(gap(&w, &w, 5.0).unwrap(), 0.0);
        assert_eq!(gap(&pv(&[1.0, 1.0]), &pv(&[0.0, 0.0]), 1.0).unwrap(), 2.0);
        assert_eq!(gap(&pv(&[3.0, 4.0]), &pv(&[0.0, 0.0]), 2.0).unwrap(), 50.0);
        assert!(gap(&w, &w, 0.0).is_err());
    }

    #[test]
    fn gap_symmetric_and_quadratic() {
        let a = pv(&[0.7, -2.0, 1.5]);
        let b = pv(&[-0.1, 0.4, 0.0]);
        let z = ParamVector::zeros(3);
        assert_eq!(gap(&a, &b, 1.3).unwrap(), gap(&b, &a, 1.3).unwrap());
        let g2 = gap(&a.scale(2.0), &z, 1.3).unwrap();
        assert!((g2 - 4.0 * gap(&a, &z, 1.3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn optimum_examples() {
        let s = solve_optimum(&[pt(&[1.0, 0.0], 1.0), pt(&[0.0, 1.0], 2.0)]).unwrap();
        assert!((s.w.get(0) - 1.0).abs() < 1e-14 && (s.w.get(1) - 2.0).abs() < 1e-14);
        assert!(!s.rank_deficient);
        let z = solve_optimum(&[pt(&[1.0, 0.5], 0.0), pt(&[0.2, 1.0], 0.0), pt(&[3.0, 1.0], 0.0)]).unwrap();
        assert!(z.w.norm() < 1e-14);
    }

    #[test]
    fn rank_deficient_gives_minimum_norm() {
        // Second feature duplicates the first; minimum-norm split is even.
        let s = solve_optimum(&[pt(&[1.0, 1.0], 2.0), pt(&[2.0, 2.0], 4.0)]).unwrap();
        assert!(s.rank_deficient);
        assert_eq!(s.rank, 1);
        assert!((s.w.get(0) - 1.0).abs() < 1e-12 && (s.w.get(1) - 1.0).abs() < 1e-12);
    }

    // Independent oracle: Gaussian elimination with partial pivoting on the
    // normal equations.
    fn normal_equations(points: &[DataPoint<f64>]) -> Vec<f64> {
        let d = points[0].feature.dim();
        let mut a = vec![vec![0.0; d + 1]; d];
        for p in points {
            let x = p.feature.as_slice();
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += x[i] * x[j];
                }
                a[i][d] += x[i] * p.label;
            }
        }
        for col in 0..d {
            let piv = (col..d).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..d {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=d {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..d).map(|i| a[i][d] / a[i][i]).collect()
    }

    #[test]
    fn optimum_matches_normal_equations() {
        let mut rng = RngSeedTree::new(5).derive_stream(0, 0, StreamTag::Oracle);
        let points: Vec<_> = (0..20)
            .map(|_| {
                let x: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                let y: f64 = rng.sample(StandardNormal);
                pt(&x, y)
            })
            .collect();
        let s = solve_optimum(&points).unwrap();
        let oracle = normal_equations(&points);
        for j in 0..3 {
            assert!((s.w.get(j) - oracle[j]).abs() < 1e-8);
        }
        let g = pooled_gradient(&s.w, &points).unwrap();
        assert!(g.norm() <= 1e-8 * (1.0 + s.w.norm()));
        // Fixed point of full-batch gradient descent.
        let step = s.w.axpy(-0.1, &g);
        assert!(step.distance_sq(&s.w).sqrt() <= 1e-8);
    }

    #[test]
    fn gap_dominates_loss_on_unit_ball() {
        let w_star = pv(&[0.5, -0.25]);
        let w = pv(&[-1.0, 2.0]);
        assert!(check_gap_dominates_loss(&w_star, &w_star, &[pt(&[0.3, 0.1], 9.0)], 1.0).unwrap());
        let unit: Vec<_> = (0..16)
            .map(|i| {
                let a = i as f64 * std::f64::consts::PI / 8.0;
                pt(&[a.cos(), a.sin()], 0.0)
            })
            .collect();
        assert!(check_gap_dominates_loss(&w, &w_star, &unit, 1.0).unwrap());
        // Features with squared norm 4 break the bound when aligned with w - w*.
        let diff = (&w - &w_star).scale(1.0 / (&w - &w_star).norm());
        let big = pt(diff.scale(2.0).as_slice(), 0.0);
        assert!(!check_gap_dominates_loss(&w, &w_star, &[big], 1.0).unwrap());
    }

    #[test]
    fn generic_over_f32() {
        let w = ParamVector::<f32>::from_f64(&[1.0, 2.0]).unwrap();
        let p = DataPoint::new(ParamVector::<f32>::from_f64(&[1.0, 1.0]).unwrap(), 0.0f32).unwrap();
        assert_eq!(loss(&w, &p).unwrap(), 9.0f32);
    }
}
