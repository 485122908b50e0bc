//! Dense Gaussian helpers shared by the smoother, the samplers and the projections.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TmmpError};

/// Jitter ladder relative to the matrix scale: none first, then 1e-10 up to 1e-8.
const JITTER_STEPS: [f64; 4] = [0.0, 1e-10, 1e-9, 1e-8];

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Cholesky factorization with a bounded diagonal jitter.
///
/// `scale` is the reference variance the jitter is measured against (the kernel's
/// stationary variance for Gram matrices).
pub fn jittered_cholesky(
    m: &DMatrix<f64>,
    scale: f64,
    context: &str,
) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(TmmpError::Size(format!(
            "{context}: matrix is {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = if scale.is_finite() && scale > 0.0 {
        scale
    } else {
        1.0
    };
    for step in JITTER_STEPS {
        let mut a = m.clone();
        if step > 0.0 {
            for i in 0..a.nrows() {
                a[(i, i)] += step * scale;
            }
        }
        if let Some(chol) = Cholesky::new(a) {
            let l = chol.l_dirty();
            if (0..l.nrows()).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0) {
                return Ok(chol);
            }
        }
    }
    Err(TmmpError::NumericalConditioning {
        context: context.to_string(),
    })
}

/// Log-density of `N(x; 0, L L')` given the Cholesky factor.
pub fn mvn_log_density(x: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let n = x.len() as f64;
    let l = chol.l();
    let z = l
        .solve_lower_triangular(x)
        .expect("cholesky factor has positive diagonal");
    let log_det: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    -0.5 * (n * LN_2PI + log_det + z.norm_squared())
}

/// Draw `L z` with `z` standard normal.
pub fn sample_correlated<R: Rng + ?Sized>(l: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_iterator(l.ncols(), (0..l.ncols()).map(|_| rng.sample(StandardNormal)));
    l * z
}

/// Conditional distribution of `x_b` given `x_a = a` for a zero-mean joint Gaussian.
///
/// `cov` is the joint covariance ordered as `[a; b]` with `n_a` leading entries.
pub fn condition_zero_mean(
    cov: &DMatrix<f64>,
    n_a: usize,
    a: &DVector<f64>,
    scale: f64,
    context: &str,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = cov.nrows();
    let n_b = n - n_a;
    let s_bb = cov.view((n_a, n_a), (n_b, n_b)).into_owned();
    if n_a == 0 {
        return Ok((DVector::zeros(n_b), s_bb));
    }
    let s_aa = cov.view((0, 0), (n_a, n_a)).into_owned();
    let s_ab = cov.view((0, n_a), (n_a, n_b)).into_owned();
    let chol = jittered_cholesky(&s_aa, scale, context)?;
    let w = chol.solve(&s_ab);
    let mean = w.transpose() * a;
    let mut c = s_bb - s_ab.transpose() * &w;
    symmetrize(&mut c);
    Ok((mean, c))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Lower factor of a covariance that may be exactly zero or rank deficient.
///
/// Zero matrices map to a zero factor; otherwise a jittered Cholesky is used.
pub fn covariance_factor(cov: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let scale = (0..n).map(|i| cov[(i, i)]).fold(0.0_f64, f64::max);
    if n == 0 || scale <= 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    Ok(jittered_cholesky(cov, scale, context)?.l())
}
