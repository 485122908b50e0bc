//! Projections of `eta` beyond the estimation grid.
//!
//! Every strategy extends the basis to the projection window and supplies the
//! new smoothing coefficients; the driver rebuilds `eps` and evaluates the
//! process model over the extended grid, so fitted values are reproduced
//! exactly on the estimation window.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ProcessModel, Registry};
use crate::basis;
use crate::error::{Result, TmmpError};
use crate::linalg;
use crate::params::ParamSet;
use crate::smoothing::SmoothingModel;

/// One posterior (or prior) draw of the quantities a projection needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedDraw {
    pub params: ParamSet,
    /// Smoothing coefficients per population.
    pub deltas: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOptions {
    pub mode: String,
    pub w: Option<f64>,
    pub g: Option<f64>,
    pub v: Option<f64>,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            mode: "default".to_string(),
            w: None,
            g: None,
            v: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub populations: Vec<String>,
    pub times: Vec<f64>,
    /// One `populations x times` matrix per draw.
    pub draws: Vec<DMatrix<f64>>,
}

/// Inputs for drawing the coefficients of one population in one draw.
pub struct CoefficientContext<'a> {
    /// The estimation smoother with this draw's kernel.
    pub smoother: &'a SmoothingModel,
    /// Fitted coefficients on the estimation window.
    pub delta: &'a DVector<f64>,
    /// Kernel-axis positions of fitted then new coefficients.
    pub positions: &'a [f64],
    /// Median and variance of fitted second differences across populations.
    pub pooled: (f64, f64),
}

impl CoefficientContext<'_> {
    pub fn n_new(&self) -> usize {
        self.positions.len() - self.delta.len()
    }
}

pub trait ProjectionStrategy: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Rejects models the strategy cannot project.
    fn check(&self, model: &ProcessModel) -> Result<()> {
        let _ = model;
        Ok(())
    }

    /// Coefficients for the new basis columns.
    fn future_coefficients(&self, ctx: &CoefficientContext<'_>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>>;
}

pub type ProjectionBuilder = fn(&ProjectionOptions) -> Result<Box<dyn ProjectionStrategy>>;

pub fn projection_registry() -> Registry<ProjectionBuilder> {
    let mut r: Registry<ProjectionBuilder> = Registry::empty();
    r.register("default", |_| Ok(Box::new(DefaultProjection)));
    r.register("pooled", |o| Ok(Box::new(Pooled::new(o, PoolingAnchor::ModelMean)?)));
    r.register("pooled_lagged", |o| Ok(Box::new(Pooled::new(o, PoolingAnchor::LaggedDifference)?)));
    r
}

/// Continues the estimation smoother: new coefficients are drawn from their
/// conditional distribution given the fitted ones.
#[derive(Debug, Clone, Copy)]
pub struct DefaultProjection;

impl ProjectionStrategy for DefaultProjection {
    fn name(&self) -> &'static str {
        "default"
    }

    fn future_coefficients(&self, ctx: &CoefficientContext<'_>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        let (mean, cov) = ctx.smoother.conditional_projection(ctx.delta, ctx.positions)?;
        let l = linalg::covariance_factor(&cov, "conditional projection covariance")?;
        Ok(mean + linalg::sample_correlated(&l, rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingAnchor {
    /// Own-population term is the estimation model's predictive mean of the
    /// next second difference.
    ModelMean,
    /// Own-population term is the previous second difference.
    LaggedDifference,
}

/// Second differences drawn from `N(Gamma_k, Theta_k)` with
/// `Gamma_k = W G + (1 - W) m_k` and `Theta_k = W V + (1 - W) Theta_{k-1}`,
/// starting from the fitted variance.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub w: f64,
    pub g: Option<f64>,
    pub v: Option<f64>,
    pub anchor: PoolingAnchor,
}

impl Pooled {
    pub fn new(o: &ProjectionOptions, anchor: PoolingAnchor) -> Result<Self> {
        let w = o
            .w
            .ok_or_else(|| TmmpError::Argument("pooled projection needs a weight W".into()))?;
        if !(0.0..=1.0).contains(&w) {
            return Err(TmmpError::ParameterDomain(format!("W must lie in [0, 1], got {w}")));
        }
        if let Some(g) = o.g {
            if !g.is_finite() {
                return Err(TmmpError::ParameterDomain(format!("G must be finite, got {g}")));
            }
        }
        if let Some(v) = o.v {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TmmpError::ParameterDomain(format!("V must be finite and >= 0, got {v}")));
            }
        }
        Ok(Pooled {
            w,
            g: o.g,
            v: o.v,
            anchor,
        })
    }
}

impl ProjectionStrategy for Pooled {
    fn name(&self) -> &'static str {
        match self.anchor {
            PoolingAnchor::ModelMean => "pooled",
            PoolingAnchor::LaggedDifference => "pooled_lagged",
        }
    }

    fn check(&self, model: &ProcessModel) -> Result<()> {
        if model.smoother.r != 2 {
            return Err(TmmpError::NotApplicable(format!(
                "{} projection needs a second-order differenced smoother, model has r = {}",
                self.name(),
                model.smoother.r
            )));
        }
        Ok(())
    }

    fn future_coefficients(&self, ctx: &CoefficientContext<'_>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        let g = self.g.unwrap_or(ctx.pooled.0);
        let v = self.v.unwrap_or(ctx.pooled.1);
        let w = self.w;
        let delta = ctx.delta;
        let k = delta.len();
        let h = ctx.n_new();
        if k < 2 {
            return Err(TmmpError::UnidentifiedLevel(
                "pooled projection needs at least two fitted coefficients".into(),
            ));
        }
        let gamma_obs = basis::difference(delta, 2);
        let kernel = &ctx.smoother.kernel;
        let diff_pos = &ctx.positions[2..];
        let factor = linalg::covariance_factor(&kernel.gram_matrix(diff_pos)?, "pooled projection")?;
        // standardized innovations of the estimation model, for its predictive means
        let n_obs = gamma_obs.len();
        let mut z = Vec::with_capacity(n_obs + h);
        let predictive = |z: &[f64], j: usize| -> f64 { (0..j).map(|i| factor[(j, i)] * z[i]).sum() };
        let standardize = |x: f64, m: f64, j: usize| -> f64 {
            let d = factor[(j, j)];
            if d > 0.0 {
                (x - m) / d
            } else {
                0.0
            }
        };
        for j in 0..n_obs {
            let m = predictive(&z, j);
            z.push(standardize(gamma_obs[j], m, j));
        }
        let mut theta = kernel.variance();
        let mut prev_gamma = gamma_obs.iter().last().copied().unwrap_or(0.0);
        let (mut d1, mut d0) = (delta[k - 1], delta[k - 2]);
        let mut out = DVector::zeros(h);
        for s in 0..h {
            let j = n_obs + s;
            let m = predictive(&z, j);
            let own = match self.anchor {
                PoolingAnchor::ModelMean => m,
                PoolingAnchor::LaggedDifference => prev_gamma,
            };
            let mean = w * g + (1.0 - w) * own;
            theta = w * v + (1.0 - w) * theta;
            let xi: f64 = rng.sample(StandardNormal);
            let gamma = mean + theta.sqrt() * xi;
            z.push(standardize(gamma, m, j));
            let next = 2.0 * d1 - d0 + gamma;
            out[s] = next;
            d0 = d1;
            d1 = next;
            prev_gamma = gamma;
        }
        Ok(out)
    }
}

/// Median and variance of second differences of the draw-averaged coefficients.
pub fn pooling_statistics(fit: &[FittedDraw]) -> (f64, f64) {
    let Some(first) = fit.first() else {
        return (0.0, 0.0);
    };
    let mut diffs = Vec::new();
    for c in 0..first.deltas.len() {
        let mut mean = DVector::zeros(first.deltas[c].len());
        for d in fit {
            mean += &d.deltas[c];
        }
        mean /= fit.len() as f64;
        diffs.extend(basis::difference(&mean, 2).iter().copied());
    }
    if diffs.is_empty() {
        return (0.0, 0.0);
    }
    diffs.sort_by(|a, b| a.partial_cmp(b).expect("finite coefficients"));
    let n = diffs.len();
    let median = if n % 2 == 1 {
        diffs[n / 2]
    } else {
        0.5 * (diffs[n / 2 - 1] + diffs[n / 2])
    };
    let m = diffs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        diffs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };
    (median, var)
}

/// Projects `eta` to `t_end` with `n_draws` draws, cycling through `fit`.
///
/// Draw `i` uses its own random stream derived from `(seed, i)`.
pub fn project(
    model: &ProcessModel,
    strategy: &dyn ProjectionStrategy,
    fit: &[FittedDraw],
    t_end: f64,
    n_draws: usize,
    seed: u64,
) -> Result<ProjectionResult> {
    strategy.check(model)?;
    let grid = &model.grid;
    let proj_times = grid.projection_times(t_end)?;
    let populations = grid.populations.clone();
    if proj_times.is_empty() {
        return Ok(ProjectionResult {
            populations,
            times: proj_times,
            draws: vec![DMatrix::zeros(grid.n_populations(), 0); n_draws],
        });
    }
    if fit.is_empty() {
        return Err(TmmpError::Argument("no fitted draws to project from".into()));
    }
    let basis = model.basis()?;
    let sets = model.constraint_sets(&basis, &grid.times)?;
    let k = basis.n_coefficients(grid.n_times());
    let extended = basis.extended_to(*proj_times.last().expect("non-empty"))?;
    let all_times: Vec<f64> = grid.times.iter().chain(&proj_times).copied().collect();
    let b_ext = extended.matrix(&all_times)?;
    let positions = extended.coefficient_positions(&all_times);
    let pooled = pooling_statistics(fit);
    let n_t = grid.n_times();
    let p = proj_times.len();

    let mut draws = Vec::with_capacity(n_draws);
    for i in 0..n_draws {
        let fd = &fit[i % fit.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut eta = DMatrix::zeros(grid.n_populations(), p);
        for c in 0..grid.n_populations() {
            let delta = &fd.deltas[c];
            if delta.len() != k {
                return Err(TmmpError::Size(format!(
                    "fitted coefficients have length {}, basis has {k}",
                    delta.len()
                )));
            }
            let smoother = SmoothingModel::new(basis.clone(), model.kernel_for(&fd.params, c)?, model.smoother.r, sets.clone())?;
            let ctx = CoefficientContext {
                smoother: &smoother,
                delta,
                positions: &positions,
                pooled,
            };
            let new = strategy.future_coefficients(&ctx, &mut rng)?;
            let full = DVector::from_iterator(positions.len(), delta.iter().chain(new.iter()).copied());
            let eps = &b_ext * full;
            let (_, path) = model.eta_path(&fd.params, c, &all_times, eps.as_slice())?;
            for (j, v) in path[n_t..].iter().enumerate() {
                eta[(c, j)] = *v;
            }
        }
        draws.push(eta);
    }
    Ok(ProjectionResult {
        populations,
        times: proj_times,
        draws,
    })
}
