//! Transformation matrices `B` and difference operators on coefficient vectors.
//!
//! B-spline bases use uniform knots that continue past both ends of the domain
//! (`degree` extra knots on each side), so every basis function is a shifted
//! copy of the same cardinal spline and extending the domain to the right only
//! appends columns that vanish on the original window.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TmmpError};

/// Basis family as written in a specification file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BasisSpec {
    Identity,
    BSpline { degree: usize, knot_spacing: f64 },
}

impl BasisSpec {
    pub fn cubic(knot_spacing: f64) -> Self {
        BasisSpec::BSpline {
            degree: 3,
            knot_spacing,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, BasisSpec::Identity)
    }
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisSpec::Identity => f.write_str("identity"),
            BasisSpec::BSpline {
                degree,
                knot_spacing,
            } => write!(f, "bspline(degree={degree}, knot_spacing={knot_spacing})"),
        }
    }
}

/// A basis family bound to a domain `[start, end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    spec: BasisSpec,
    start: f64,
    end: f64,
}

const KNOT_TOL: f64 = 1e-9;

impl Basis {
    pub fn new(spec: BasisSpec, start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || end < start {
            return Err(TmmpError::DegenerateDomain(format!("[{start}, {end}]")));
        }
        if let BasisSpec::BSpline {
            degree,
            knot_spacing,
        } = spec
        {
            if !(knot_spacing.is_finite() && knot_spacing > 0.0) {
                return Err(TmmpError::ParameterDomain(format!(
                    "knot_spacing must be > 0, got {knot_spacing}"
                )));
            }
            if degree > 10 {
                return Err(TmmpError::ParameterDomain(format!("spline degree {degree} is too large")));
            }
            if end - start < knot_spacing * (1.0 - KNOT_TOL) {
                return Err(TmmpError::DegenerateDomain(format!(
                    "domain [{start}, {end}] is shorter than one knot interval ({knot_spacing})"
                )));
            }
        }
        Ok(Basis { spec, start, end })
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    fn intervals(&self, spacing: f64) -> usize {
        ((self.end - self.start) / spacing - KNOT_TOL).ceil().max(1.0) as usize
    }

    /// Number of coefficients for a grid of `n_times` points.
    pub fn n_coefficients(&self, n_times: usize) -> usize {
        match self.spec {
            BasisSpec::Identity => n_times,
            BasisSpec::BSpline {
                degree,
                knot_spacing,
            } => self.intervals(knot_spacing) + degree,
        }
    }

    /// Full knot vector (B-spline bases only).
    pub fn knots(&self) -> Option<Vec<f64>> {
        match self.spec {
            BasisSpec::Identity => None,
            BasisSpec::BSpline {
                degree,
                knot_spacing,
            } => {
                let k = self.intervals(knot_spacing) + degree;
                Some(
                    (0..(k + degree + 1))
                        .map(|i| self.start + (i as f64 - degree as f64) * knot_spacing)
                        .collect(),
                )
            }
        }
    }

    /// `T x K` basis matrix evaluated at `times`.
    pub fn matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        check_increasing(times)?;
        match self.spec {
            BasisSpec::Identity => Ok(DMatrix::identity(times.len(), times.len())),
            BasisSpec::BSpline { degree, .. } => {
                let knots = self.knots().expect("bspline basis has knots");
                let k = knots.len() - degree - 1;
                let (lo, hi) = (knots[degree], knots[k]);
                let mut b = DMatrix::zeros(times.len(), k);
                for (i, &t) in times.iter().enumerate() {
                    if t < lo - KNOT_TOL || t > hi + KNOT_TOL {
                        return Err(TmmpError::Grid(format!(
                            "time {t} lies outside the spline span [{lo}, {hi}]"
                        )));
                    }
                    let (span, values) = basis_functions(&knots, degree, t.clamp(lo, hi));
                    for (j, v) in values.into_iter().enumerate() {
                        let col = span + j - degree;
                        if col < k {
                            b[(i, col)] = v;
                        }
                    }
                }
                Ok(b)
            }
        }
    }

    /// Positions of the coefficients on the axis used by the smoothing kernel.
    ///
    /// Identity coefficients sit at the grid times; spline coefficients at their
    /// index `0..K`.
    pub fn coefficient_positions(&self, times: &[f64]) -> Vec<f64> {
        match self.spec {
            BasisSpec::Identity => times.to_vec(),
            BasisSpec::BSpline { .. } => (0..self.n_coefficients(times.len())).map(|k| k as f64).collect(),
        }
    }

    /// The same family over a domain extended to the right.
    pub fn extended_to(&self, end: f64) -> Result<Basis> {
        Basis::new(self.spec, self.start, end.max(self.end))
    }
}

fn check_increasing(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(TmmpError::Grid("non-finite time point".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(TmmpError::Grid("time points must be strictly increasing".into()));
    }
    Ok(())
}

/// Nonzero basis functions at `t`: returns the knot span `s` and the values of
/// functions `s - degree ..= s`.
fn basis_functions(knots: &[f64], degree: usize, t: f64) -> (usize, Vec<f64>) {
    let n_funcs = knots.len() - degree - 1;
    let mut span = degree;
    while span + 1 < n_funcs && t >= knots[span + 1] {
        span += 1;
    }
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    (span, n)
}

/// Basis matrix for `spec` on `[start, end]` evaluated at `times`.
pub fn build_basis(spec: BasisSpec, domain: (f64, f64), times: &[f64]) -> Result<DMatrix<f64>> {
    Basis::new(spec, domain.0, domain.1)?.matrix(times)
}

/// Basis over observation and projection times together.
///
/// The first `times_obs.len()` rows and first `K` columns reproduce
/// [`build_basis`] on the observation window.
pub fn extend_basis(
    spec: BasisSpec,
    domain: (f64, f64),
    times_obs: &[f64],
    times_proj: &[f64],
) -> Result<DMatrix<f64>> {
    if let (Some(last), Some(first)) = (times_obs.last(), times_proj.first()) {
        if first <= last {
            return Err(TmmpError::Grid(format!(
                "projection grid starts at {first}, not after the last observation time {last}"
            )));
        }
    }
    let end = times_proj.last().copied().unwrap_or(domain.1).max(domain.1);
    let basis = Basis::new(spec, domain.0, end)?;
    let all: Vec<f64> = times_obs.iter().chain(times_proj).copied().collect();
    basis.matrix(&all)
}

/// Forward difference operator of order `d` on vectors of length `k`.
pub fn difference_matrix(k: usize, d: usize) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Ok(DMatrix::identity(k, k));
    }
    if k <= d {
        return Err(TmmpError::Size(format!("difference order {d} needs more than {d} coefficients, got {k}")));
    }
    let mut m = DMatrix::identity(k, k);
    for step in 0..d {
        let rows = k - step - 1;
        let mut d1 = DMatrix::zeros(rows, k - step);
        for i in 0..rows {
            d1[(i, i)] = -1.0;
            d1[(i, i + 1)] = 1.0;
        }
        m = d1 * m;
    }
    Ok(m)
}

/// Applies `difference_matrix(len, d)` without building it.
pub fn difference(v: &DVector<f64>, d: usize) -> DVector<f64> {
    let mut out = v.clone();
    for _ in 0..d {
        if out.len() == 0 {
            break;
        }
        out = DVector::from_iterator(out.len() - 1, out.as_slice().windows(2).map(|w| w[1] - w[0]));
    }
    out
}

/// Minimum-norm right inverse `P = D' (D D')^-1`.
pub fn constraint_projection(d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ddt = d * d.transpose();
    let chol = ddt.cholesky().ok_or_else(|| TmmpError::NumericalConditioning {
        context: format!("constraint projection of a {}x{} difference matrix", d.nrows(), d.ncols()),
    })?;
    Ok(chol.solve(&d.clone()).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_basis() {
        let b = build_basis(BasisSpec::Identity, (0.0, 4.0), &[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(b, DMatrix::identity(5, 5));
    }

    #[test]
    fn partition_of_unity() {
        let times: Vec<f64> = (0..=10).map(f64::from).collect();
        let b = build_basis(BasisSpec::cubic(2.5), (0.0, 10.0), &times).unwrap();
        assert_eq!(b.ncols(), 7);
        for i in 0..b.nrows() {
            assert!((b.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn knot_values_of_cubic_cardinal_spline() {
        // a uniform cubic B-spline takes 1/6, 2/3, 1/6 at its interior knots
        let b = build_basis(BasisSpec::cubic(1.0), (0.0, 3.0), &[0.0, 1.0]).unwrap();
        assert!((b[(0, 0)] - 1.0 / 6.0).abs() < 1e-14);
        assert!((b[(0, 1)] - 2.0 / 3.0).abs() < 1e-14);
        assert!((b[(0, 2)] - 1.0 / 6.0).abs() < 1e-14);
        assert_eq!(b[(0, 3)], 0.0);
    }

    #[test]
    fn short_domain_is_degenerate() {
        assert!(matches!(
            build_basis(BasisSpec::cubic(2.5), (0.0, 2.0), &[0.0, 1.0, 2.0]),
            Err(TmmpError::DegenerateDomain(_))
        ));
    }

    #[test]
    fn extension_adds_two_columns_for_five_years() {
        let obs: Vec<f64> = (0..=10).map(f64::from).collect();
        let proj: Vec<f64> = (11..=15).map(f64::from).collect();
        let b = build_basis(BasisSpec::cubic(2.5), (0.0, 10.0), &obs).unwrap();
        let bx = extend_basis(BasisSpec::cubic(2.5), (0.0, 10.0), &obs, &proj).unwrap();
        assert_eq!(bx.ncols(), b.ncols() + 2);
        assert_eq!(bx.view((0, 0), (obs.len(), b.ncols())).into_owned(), b);
        assert!(bx.view((0, b.ncols()), (obs.len(), 2)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn overlapping_projection_grid() {
        let r = extend_basis(BasisSpec::Identity, (0.0, 2.0), &[0.0, 1.0, 2.0], &[2.0, 3.0]);
        assert!(matches!(r, Err(TmmpError::Grid(_))));
    }

    #[test]
    fn differences() {
        let d = difference_matrix(4, 1).unwrap();
        assert_eq!(d * DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]), DVector::from_vec(vec![1.0, 1.0, 1.0]));
        let d2 = difference_matrix(5, 2).unwrap();
        for i in 0..3 {
            assert_eq!(d2.row(i).iter().copied().collect::<Vec<_>>()[i..i + 3], [1.0, -2.0, 1.0]);
        }
        assert!(difference_matrix(2, 2).is_err());
    }

    #[test]
    fn projection_first_order_k3() {
        let p = constraint_projection(&difference_matrix(3, 1).unwrap()).unwrap();
        let delta = p * DVector::from_vec(vec![1.0, 1.0]);
        for (a, b) in delta.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
