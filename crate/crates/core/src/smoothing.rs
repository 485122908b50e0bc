//! The smoothing component `eps = B delta` with `Delta_r delta ~ N(0, Sigma)`.
//!
//! For `r >= 1` the level (and slope, for `r = 2`) of `delta` is pinned by
//! constraint sets: set `d` requires the `d`-th differences labelled by the
//! listed indices to sum to zero. Labels are 1-based and the `d`-th difference
//! ending at coefficient `k` carries label `k`, so valid labels for set `d`
//! run from `d + 1` to `K`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{self, Basis, BasisSpec};
use crate::error::{Result, TmmpError};
use crate::kernels::KernelSpec;
use crate::linalg;

/// Absolute tolerance for constraint checks on supplied coefficient vectors.
pub const CONSTRAINT_TOL: f64 = 1e-8;

/// Index set of one constraint, with 1-based labels.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet {
    /// A single label: pins one difference (or level) to zero.
    Reference(usize),
    /// Inclusive label range.
    Range(usize, usize),
    List(Vec<usize>),
}

impl ConstraintSet {
    /// The full label range for difference order `d` with `k` coefficients.
    pub fn full(d: usize, k: usize) -> Self {
        ConstraintSet::Range(d + 1, k)
    }

    pub fn labels(&self) -> Vec<usize> {
        match self {
            ConstraintSet::Reference(i) => vec![*i],
            ConstraintSet::Range(a, b) => (*a..=*b).collect(),
            ConstraintSet::List(v) => v.clone(),
        }
    }

    /// Coefficient weights `c` such that the constraint reads `c' delta = 0`.
    fn weights(&self, d: usize, k: usize) -> Result<DVector<f64>> {
        let labels = self.labels();
        if labels.is_empty() {
            return Err(TmmpError::Spec(format!("constraint set {d} is empty")));
        }
        let mut ind = DVector::zeros(k - d);
        for &label in &labels {
            if label < d + 1 || label > k {
                return Err(TmmpError::Spec(format!(
                    "constraint set {d} references index {label}, valid range is {}..={k}",
                    d + 1
                )));
            }
            ind[label - d - 1] = 1.0;
        }
        Ok(basis::difference_matrix(k, d)?.transpose() * ind)
    }
}

/// A coefficient label as written in a specification file.
#[derive(Debug, Clone, PartialEq)]
pub enum IndexExpr {
    Literal(usize),
    /// The number of coefficients `K`.
    K,
    /// The central coefficient `ceil(K / 2)`.
    KStar,
    /// The coefficient at (identity basis) or centred nearest to (spline basis) a time.
    Year(f64),
}

impl fmt::Display for IndexExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexExpr::Literal(i) => write!(f, "{i}"),
            IndexExpr::K => f.write_str("K"),
            IndexExpr::KStar => f.write_str("k_star"),
            IndexExpr::Year(y) => write!(f, "year({y})"),
        }
    }
}

impl IndexExpr {
    pub fn resolve(&self, basis: &Basis, times: &[f64]) -> Result<usize> {
        let k = basis.n_coefficients(times.len());
        match *self {
            IndexExpr::Literal(i) => Ok(i),
            IndexExpr::K => Ok(k),
            IndexExpr::KStar => Ok(k.div_ceil(2)),
            IndexExpr::Year(y) => match basis.spec() {
                BasisSpec::Identity => times
                    .iter()
                    .position(|t| (t - y).abs() < 1e-9)
                    .map(|i| i + 1)
                    .ok_or_else(|| TmmpError::Grid(format!("reference time {y} is not on the grid"))),
                BasisSpec::BSpline {
                    degree,
                    knot_spacing,
                } => {
                    let (start, _) = basis.domain();
                    let half = (degree as f64 + 1.0) / 2.0;
                    let centre = |j: usize| start + (j as f64 - degree as f64 + half) * knot_spacing;
                    let best = (0..k)
                        .min_by(|a, b| {
                            (centre(*a) - y)
                                .abs()
                                .partial_cmp(&(centre(*b) - y).abs())
                                .expect("finite knot centres")
                        })
                        .expect("basis has coefficients");
                    Ok(best + 1)
                }
            },
        }
    }
}

/// A constraint set before `K`-dependent symbols are resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintExpr {
    Ref(IndexExpr),
    SumRange(IndexExpr, IndexExpr),
    List(Vec<IndexExpr>),
}

impl fmt::Display for ConstraintExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintExpr::Ref(i) => write!(f, "ref({i})"),
            ConstraintExpr::SumRange(a, b) => write!(f, "sum_range({a}, {b})"),
            ConstraintExpr::List(v) => {
                f.write_str("list(")?;
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{x}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl ConstraintExpr {
    pub fn resolve(&self, basis: &Basis, times: &[f64]) -> Result<ConstraintSet> {
        Ok(match self {
            ConstraintExpr::Ref(i) => ConstraintSet::Reference(i.resolve(basis, times)?),
            ConstraintExpr::SumRange(a, b) => ConstraintSet::Range(a.resolve(basis, times)?, b.resolve(basis, times)?),
            ConstraintExpr::List(v) => {
                ConstraintSet::List(v.iter().map(|i| i.resolve(basis, times)).collect::<Result<_>>()?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingModel {
    pub basis: Basis,
    pub kernel: KernelSpec,
    pub r: usize,
    pub constraints: Vec<ConstraintSet>,
}

/// Grid-dependent matrices of a smoother, independent of the kernel.
#[derive(Debug, Clone)]
pub struct SmootherLayout {
    pub times: Vec<f64>,
    /// `T x K` basis matrix.
    pub b: DMatrix<f64>,
    /// Positions of the `K` coefficients on the kernel axis.
    pub positions: Vec<f64>,
    /// Positions of the `K - r` differenced coefficients.
    pub diff_positions: Vec<f64>,
    /// `K x (K - r)` map from differenced coefficients to `delta`.
    pub reconstruction: DMatrix<f64>,
    /// `T x (K - r)` map from differenced coefficients to `eps`.
    pub design: DMatrix<f64>,
}

impl SmootherLayout {
    pub fn n_coefficients(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_free(&self) -> usize {
        self.reconstruction.ncols()
    }

    pub fn build(basis: &Basis, r: usize, constraints: &[ConstraintSet], times: &[f64]) -> Result<Self> {
        let b = basis.matrix(times)?;
        let k = b.ncols();
        if k < r + 1 {
            return Err(TmmpError::Size(format!(
                "differencing order {r} needs at least {} coefficients, got {k}",
                r + 1
            )));
        }
        let positions = basis.coefficient_positions(times);
        let diff_positions = positions[r..].to_vec();
        let reconstruction = reconstruction_matrix(k, r, constraints)?;
        let design = &b * &reconstruction;
        Ok(SmootherLayout {
            times: times.to_vec(),
            b,
            positions,
            diff_positions,
            reconstruction,
            design,
        })
    }
}

/// `K x (K - r)` matrix `R` with `D_r R = I` and every constraint holding for `R gamma`.
///
/// `R` is the leading block of the inverse of `D_r` stacked on the constraint rows.
pub fn reconstruction_matrix(k: usize, r: usize, constraints: &[ConstraintSet]) -> Result<DMatrix<f64>> {
    if constraints.len() != r {
        return Err(TmmpError::Spec(format!(
            "differencing order {r} needs {r} constraint sets, got {}",
            constraints.len()
        )));
    }
    if r == 0 {
        return Ok(DMatrix::identity(k, k));
    }
    let d = basis::difference_matrix(k, r)?;
    let mut m = DMatrix::zeros(k, k);
    m.view_mut((0, 0), (k - r, k)).copy_from(&d);
    for (i, set) in constraints.iter().enumerate() {
        let c = set.weights(i, k)?;
        m.row_mut(k - r + i).copy_from(&c.transpose());
    }
    let unidentified = || TmmpError::Spec("constraint sets do not identify the smoother's level".to_string());
    let inv = m.lu().try_inverse().ok_or_else(unidentified)?;
    let out = inv.columns(0, k - r).into_owned();
    if !out.iter().all(|v| v.is_finite()) {
        return Err(unidentified());
    }
    Ok(out)
}

impl SmoothingModel {
    pub fn new(basis: Basis, kernel: KernelSpec, r: usize, constraints: Vec<ConstraintSet>) -> Result<Self> {
        if constraints.len() != r {
            return Err(TmmpError::Spec(format!(
                "differencing order {r} needs {r} constraint sets, got {}",
                constraints.len()
            )));
        }
        Ok(SmoothingModel {
            basis,
            kernel,
            r,
            constraints,
        })
    }

    pub fn with_kernel(&self, kernel: KernelSpec) -> Self {
        SmoothingModel {
            kernel,
            ..self.clone()
        }
    }

    pub fn layout(&self, times: &[f64]) -> Result<SmootherLayout> {
        SmootherLayout::build(&self.basis, self.r, &self.constraints, times)
    }

    /// `K x (K - r)` matrix `R` with `D_r R = I` and every constraint holding for `R gamma`.
    pub fn reconstruction(&self, k: usize) -> Result<DMatrix<f64>> {
        reconstruction_matrix(k, self.r, &self.constraints)
    }

    /// Covariance of the differenced coefficients.
    pub fn diff_covariance(&self, layout: &SmootherLayout) -> Result<DMatrix<f64>> {
        self.kernel.gram_matrix(&layout.diff_positions)
    }

    /// Prior covariance of `delta` (degenerate when `r >= 1`).
    pub fn delta_covariance(&self, layout: &SmootherLayout) -> Result<DMatrix<f64>> {
        let s = self.diff_covariance(layout)?;
        let rr = &layout.reconstruction;
        let mut c = rr * s * rr.transpose();
        linalg::symmetrize(&mut c);
        Ok(c)
    }

    /// Residual of each constraint set for `delta`.
    pub fn constraint_residuals(&self, delta: &DVector<f64>) -> Result<Vec<f64>> {
        let k = delta.len();
        self.constraints
            .iter()
            .enumerate()
            .map(|(d, set)| Ok(set.weights(d, k)?.dot(delta)))
            .collect()
    }

    pub fn check_constraints(&self, delta: &DVector<f64>, tol: f64) -> Result<()> {
        for (set, residual) in self.constraint_residuals(delta)?.into_iter().enumerate() {
            if residual.abs() > tol || !residual.is_finite() {
                return Err(TmmpError::Constraint { set, residual });
            }
        }
        Ok(())
    }

    /// Draws `(eps, delta)` on `times` from a seeded generator.
    pub fn sample(&self, times: &[f64], seed: u64) -> Result<(DVector<f64>, DVector<f64>)> {
        let layout = self.layout(times)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factor = self.diff_factor(&layout)?;
        Ok(self.sample_with(&layout, &factor, &mut rng))
    }

    /// Lower factor of the differenced covariance, for repeated sampling.
    pub fn diff_factor(&self, layout: &SmootherLayout) -> Result<DMatrix<f64>> {
        let s = self.diff_covariance(layout)?;
        linalg::covariance_factor(&s, &self.kernel.describe(&layout.diff_positions))
    }

    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        layout: &SmootherLayout,
        factor: &DMatrix<f64>,
        rng: &mut R,
    ) -> (DVector<f64>, DVector<f64>) {
        let gamma = linalg::sample_correlated(factor, rng);
        let delta = &layout.reconstruction * gamma;
        let eps = &layout.b * &delta;
        (eps, delta)
    }

    /// Log-density of `delta`, defined on the differenced space.
    pub fn log_density(&self, times: &[f64], delta: &DVector<f64>) -> Result<f64> {
        let layout = self.layout(times)?;
        self.log_density_with(&layout, delta)
    }

    pub fn log_density_with(&self, layout: &SmootherLayout, delta: &DVector<f64>) -> Result<f64> {
        if delta.len() != layout.n_coefficients() {
            return Err(TmmpError::Size(format!(
                "delta has length {}, basis has {} coefficients",
                delta.len(),
                layout.n_coefficients()
            )));
        }
        self.check_constraints(delta, CONSTRAINT_TOL)?;
        let gamma = basis::difference(delta, self.r);
        let s = self.diff_covariance(layout)?;
        let chol = linalg::jittered_cholesky(&s, self.kernel.variance(), &self.kernel.describe(&layout.diff_positions))?;
        Ok(linalg::mvn_log_density(&gamma, &chol))
    }

    /// Conditional distribution of future coefficients given the first `n_obs`.
    ///
    /// `positions` lists kernel-axis positions for the observed coefficients
    /// followed by the future ones. For `r >= 1` the future differences are
    /// conditioned on the observed differences and integrated forward from the
    /// last `r` observed coefficients.
    pub fn conditional_projection(
        &self,
        delta_obs: &DVector<f64>,
        positions: &[f64],
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = delta_obs.len();
        if positions.len() < n {
            return Err(TmmpError::Size(format!(
                "{} positions for {n} observed coefficients",
                positions.len()
            )));
        }
        let h = positions.len() - n;
        if h == 0 {
            return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
        }
        let r = self.r;
        if n < r || (r > 0 && n == 0) {
            return Err(TmmpError::UnidentifiedLevel(format!(
                "differencing order {r} needs at least {r} observed coefficients, got {n}"
            )));
        }
        let diff_pos = &positions[r..];
        let joint = self.kernel.gram_matrix(diff_pos)?;
        let gamma_obs = basis::difference(delta_obs, r);
        let n_a = gamma_obs.len();
        let (m_gamma, c_gamma) = linalg::condition_zero_mean(
            &joint,
            n_a,
            &gamma_obs,
            self.kernel.variance(),
            &self.kernel.describe(diff_pos),
        )?;
        if r == 0 {
            return Ok((m_gamma, c_gamma));
        }
        let (a, l) = integration_maps(r, h);
        let last = delta_obs.rows(n - r, r).into_owned();
        let mean = &a * last + &l * m_gamma;
        let mut cov = &l * c_gamma * l.transpose();
        linalg::symmetrize(&mut cov);
        Ok((mean, cov))
    }
}

/// Binomial weights of the `r`-th difference: `Delta_r x_k = sum_j w_j x_{k-j}`.
pub fn difference_weights(r: usize) -> Vec<f64> {
    let mut w = vec![1.0];
    for _ in 0..r {
        let mut next = vec![0.0; w.len() + 1];
        for (j, v) in w.iter().enumerate() {
            next[j] += v;
            next[j + 1] -= v;
        }
        w = next;
    }
    w
}

/// Linear maps `(A, L)` with `future = A last_r + L gamma_future` for the
/// recursion `Delta_r delta_k = gamma_k`.
pub fn integration_maps(r: usize, h: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let w = difference_weights(r);
    // state columns: r seeds followed by h innovations
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(r + h);
    for i in 0..r {
        let mut e = DVector::zeros(r + h);
        e[i] = 1.0;
        rows.push(e);
    }
    for i in 0..h {
        let mut e = DVector::zeros(r + h);
        e[r + i] = 1.0;
        let idx = r + i;
        for j in 1..=r {
            e -= &rows[idx - j] * w[j];
        }
        rows.push(e);
    }
    let mut a = DMatrix::zeros(h, r);
    let mut l = DMatrix::zeros(h, h);
    for i in 0..h {
        let row = &rows[r + i];
        for j in 0..r {
            a[(i, j)] = row[j];
        }
        for j in 0..h {
            l[(i, j)] = row[r + j];
        }
    }
    (a, l)
}

/// Random-walk reparametrization of a coefficient path.
#[derive(Debug, Clone, PartialEq)]
pub struct RwReparam {
    /// `[alpha_0]` for `d = 1`, `[alpha_0, alpha_1]` for `d = 2`.
    pub alpha: Vec<f64>,
    pub gamma: DVector<f64>,
}

impl RwReparam {
    pub fn order(&self) -> usize {
        self.alpha.len()
    }

    /// Rebuilds the path as `alpha_0 + alpha_1 (k - kbar) + P gamma`.
    pub fn reconstruct(&self) -> Result<DVector<f64>> {
        let d = self.order();
        let k = self.gamma.len() + d;
        let p = basis::constraint_projection(&basis::difference_matrix(k, d)?)?;
        let mut out = p * &self.gamma;
        let kbar = (k as f64 - 1.0) / 2.0;
        for (i, v) in out.iter_mut().enumerate() {
            *v += self.alpha[0];
            if d == 2 {
                *v += self.alpha[1] * (i as f64 - kbar);
            }
        }
        Ok(out)
    }
}

/// Splits `delta` into a mean (and slope) plus its `d`-th differences.
pub fn reparametrize_rw(delta: &DVector<f64>, d: usize) -> Result<RwReparam> {
    if !(d == 1 || d == 2) {
        return Err(TmmpError::Argument(format!("random-walk order must be 1 or 2, got {d}")));
    }
    let k = delta.len();
    if k < d + 1 {
        return Err(TmmpError::Size(format!("path of length {k} is too short for order {d}")));
    }
    let mean = delta.mean();
    let mut alpha = vec![mean];
    if d == 2 {
        let kbar = (k as f64 - 1.0) / 2.0;
        let sxx: f64 = (0..k).map(|i| (i as f64 - kbar).powi(2)).sum();
        let sxy: f64 = delta.iter().enumerate().map(|(i, v)| (i as f64 - kbar) * v).sum();
        alpha.push(sxy / sxx);
    }
    Ok(RwReparam {
        alpha,
        gamma: basis::difference(delta, d),
    })
}
