//! Exact Gaussian conditioning of the smoother on observations.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{diagnose, stream_rng, FitConfig, FitMethod, FitResult, ScalarTrace};
use crate::datamodel::{DataModelSpec, Observation, ResolvedObservation};
use crate::error::{Result, TmmpError};
use crate::linalg;
use crate::params::ParamSet;
use crate::process::{FittedDraw, ProcessModel};
use crate::smoothing::SmootherLayout;

/// Posterior of one population's smoother and link-scale level.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationPosterior {
    pub gamma_mean: DVector<f64>,
    pub gamma_cov: DMatrix<f64>,
    pub delta_mean: DVector<f64>,
    pub delta_cov: DMatrix<f64>,
    /// Link-scale `g2 + g3 + a + eps` on the estimation grid.
    pub level_mean: DVector<f64>,
    pub level_cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConjugatePosterior {
    pub populations: Vec<PopulationPosterior>,
}

/// Conditions `gamma ~ N(0, s)` on `y_i ~ N(offset_i + (H gamma)_{t_i}, v_i)`.
pub(crate) fn condition_gamma(
    design: &DMatrix<f64>,
    s: &DMatrix<f64>,
    obs: &[(usize, f64, f64)],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = s.nrows();
    if obs.is_empty() {
        return Ok((DVector::zeros(m), s.clone()));
    }
    let n = obs.len();
    let mut h = DMatrix::zeros(n, m);
    let mut resid = DVector::zeros(n);
    for (i, (t, r, _)) in obs.iter().enumerate() {
        h.row_mut(i).copy_from(&design.row(*t));
        resid[i] = *r;
    }
    let sh = s * h.transpose();
    let mut a = &h * &sh;
    for (i, (_, _, v)) in obs.iter().enumerate() {
        a[(i, i)] += v;
    }
    linalg::symmetrize(&mut a);
    let scale = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    let chol = linalg::jittered_cholesky(&a, scale, "observation covariance")?;
    // gain' = A^{-1} H S
    let gain_t = chol.solve(&sh.transpose());
    let mean = gain_t.transpose() * resid;
    let mut cov = s - &sh * &gain_t;
    linalg::symmetrize(&mut cov);
    Ok((mean, cov))
}

/// Observations of population `c` as `(time index, residual, variance)` given
/// the link-scale mean.
pub(crate) fn residuals(resolved: &[ResolvedObservation], c: usize, mean_level: &[f64]) -> Vec<(usize, f64, f64)> {
    resolved
        .iter()
        .filter(|o| o.pop == c)
        .map(|o| (o.time, o.y - mean_level[o.time] - o.bias, o.variance))
        .collect()
}

pub(crate) fn require_link_scale(model: &ProcessModel, dm: &DataModelSpec) -> Result<()> {
    if dm.transformation != model.link {
        return Err(TmmpError::NotConjugate(format!(
            "data transformation {} differs from the link {}",
            dm.transformation, model.link
        )));
    }
    if model.systematic.is_recursive() {
        return Err(TmmpError::NotConjugate(format!(
            "systematic component {} depends on past eta",
            model.systematic.name()
        )));
    }
    Ok(())
}

pub(crate) fn population_posterior(
    model: &ProcessModel,
    layout: &SmootherLayout,
    params: &ParamSet,
    resolved: &[ResolvedObservation],
    c: usize,
) -> Result<PopulationPosterior> {
    let mean_level = model.mean_level(params, c, &model.grid.times)?;
    let sm = model.smoothing_for(params, c)?;
    let s = sm.diff_covariance(layout)?;
    let obs = residuals(resolved, c, &mean_level);
    let (gamma_mean, gamma_cov) = condition_gamma(&layout.design, &s, &obs)?;
    let r = &layout.reconstruction;
    let delta_mean = r * &gamma_mean;
    let mut delta_cov = r * &gamma_cov * r.transpose();
    linalg::symmetrize(&mut delta_cov);
    let level_mean = DVector::from_vec(mean_level) + &layout.design * &gamma_mean;
    let mut level_cov = &layout.design * &gamma_cov * layout.design.transpose();
    linalg::symmetrize(&mut level_cov);
    Ok(PopulationPosterior {
        gamma_mean,
        gamma_cov,
        delta_mean,
        delta_cov,
        level_mean,
        level_cov,
    })
}

/// Analytic posterior with every non-smoothing quantity fixed at `params`.
pub fn conjugate_posterior(
    model: &ProcessModel,
    dm: &DataModelSpec,
    observations: &[Observation],
    params: &ParamSet,
) -> Result<ConjugatePosterior> {
    require_link_scale(model, dm)?;
    let layout = model.layout()?;
    let resolved = dm.resolve(observations, &model.grid, params)?;
    let populations = (0..model.grid.n_populations())
        .map(|c| population_posterior(model, &layout, params, &resolved, c))
        .collect::<Result<_>>()?;
    Ok(ConjugatePosterior { populations })
}

/// Exact posterior plus `chains x iterations` independent draws.
pub fn fit_conjugate(
    model: &ProcessModel,
    dm: &DataModelSpec,
    observations: &[Observation],
    params: &ParamSet,
    config: &FitConfig,
) -> Result<FitResult> {
    config.check()?;
    let posterior = conjugate_posterior(model, dm, observations, params)?;
    let layout = model.layout()?;
    let factors: Vec<DMatrix<f64>> = posterior
        .populations
        .iter()
        .map(|p| linalg::covariance_factor(&p.gamma_cov, "posterior covariance"))
        .collect::<Result<_>>()?;
    let mut draws = Vec::with_capacity(config.chains * config.iterations);
    let mut eta = Vec::with_capacity(draws.capacity());
    for chain in 0..config.chains {
        let mut rng = stream_rng(config.seed, chain as u64);
        for _ in 0..config.iterations {
            let (deltas, eps) = draw_smoothers(&posterior, &factors, &layout, &mut rng);
            eta.push(model.evaluate_eta(params, &eps)?);
            draws.push(FittedDraw {
                params: params.clone(),
                deltas,
            });
        }
    }
    // every non-smoothing quantity is fixed, so there are no free scalars to trace
    let traces: Vec<ScalarTrace> = Vec::new();
    let diagnostics = diagnose(&traces, &BTreeMap::new());
    Ok(FitResult {
        method: FitMethod::Conjugate,
        config: config.clone(),
        populations: model.grid.populations.clone(),
        times: model.grid.times.clone(),
        draws,
        eta,
        traces,
        diagnostics,
        posterior: Some(posterior),
    })
}

fn draw_smoothers<R: Rng + ?Sized>(
    posterior: &ConjugatePosterior,
    factors: &[DMatrix<f64>],
    layout: &SmootherLayout,
    rng: &mut R,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    posterior
        .populations
        .iter()
        .zip(factors)
        .map(|(p, l)| {
            let gamma = &p.gamma_mean + linalg::sample_correlated(l, rng);
            let delta = &layout.reconstruction * &gamma;
            let eps = &layout.design * gamma;
            (delta, eps)
        })
        .unzip()
}
