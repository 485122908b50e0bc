//! Fitting process models to observations.
//!
//! [`fit_conjugate`] conditions the smoother exactly when every other
//! parameter is fixed and the data model is Gaussian on the link scale;
//! [`fit_mcmc`] handles the general case with Metropolis-within-Gibbs.

pub mod conjugate;
pub mod diagnostics;
pub mod mcmc;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::DataModelSpec;
use crate::error::{Result, TmmpError};
use crate::hierarchy::{EstimationStrategy, GroupIndex, Groupings};
use crate::params::{Domain, ParamDecl, ParamSet, ParamValue, Scope};
use crate::process::{FittedDraw, Grid, ProcessModel};

pub use conjugate::{conjugate_posterior, fit_conjugate, ConjugatePosterior, PopulationPosterior};
pub use diagnostics::{effective_sample_size, quantiles, split_rhat};
pub use mcmc::fit_mcmc;

/// Estimation strategy for each parameter name.
pub type Bindings = BTreeMap<String, EstimationStrategy>;

/// Every parameter of the process and data models, once, in a stable order.
pub fn parameter_decls(model: &ProcessModel, dm: &DataModelSpec) -> Vec<ParamDecl> {
    let mut out = model.param_decls();
    let variances = dm.variance_symbols();
    for s in dm.symbols() {
        if out.iter().any(|d| d.name == s) {
            continue;
        }
        let domain = if variances.contains(&s) {
            Domain::Positive
        } else {
            Domain::Real
        };
        out.push(ParamDecl::new(s, domain));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FitConfig {
    pub chains: usize,
    /// Retained draws per chain.
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            chains: 4,
            iterations: 1000,
            warmup: 1000,
            seed: 1,
        }
    }
}

impl FitConfig {
    fn check(&self) -> Result<()> {
        if self.chains == 0 || self.iterations == 0 {
            return Err(TmmpError::Argument("chains and iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Generator for chain (or draw) `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    Conjugate,
    Mcmc,
}

impl FitMethod {
    pub fn name(&self) -> &'static str {
        match self {
            FitMethod::Conjugate => "conjugate",
            FitMethod::Mcmc => "mcmc",
        }
    }
}

/// Draws of one scalar, per chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarTrace {
    pub name: String,
    pub chains: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub name: String,
    pub rhat: f64,
    pub ess: f64,
    /// Post-warmup acceptance rate of the scalar's Metropolis updates.
    pub acceptance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: FitMethod,
    pub config: FitConfig,
    pub populations: Vec<String>,
    pub times: Vec<f64>,
    /// Chain-major: draw `i` belongs to chain `i / config.iterations`.
    pub draws: Vec<FittedDraw>,
    /// `eta` on the estimation grid for each draw.
    pub eta: Vec<DMatrix<f64>>,
    /// Free scalars and hyperparameters.
    pub traces: Vec<ScalarTrace>,
    pub diagnostics: Vec<Diagnostic>,
    pub posterior: Option<ConjugatePosterior>,
}

impl FitResult {
    pub fn max_rhat(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.rhat)
            .filter(|r| r.is_finite())
            .fold(1.0, f64::max)
    }
}

pub(crate) fn diagnose(traces: &[ScalarTrace], acceptance: &BTreeMap<String, f64>) -> Vec<Diagnostic> {
    traces
        .iter()
        .map(|t| Diagnostic {
            name: t.name.clone(),
            rhat: split_rhat(&t.chains),
            ess: effective_sample_size(&t.chains),
            acceptance: acceptance.get(&t.name).copied(),
        })
        .collect()
}

/// Quantiles of per-cell draws.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub quantiles: Vec<f64>,
    /// `(population, time, values)` in population-major order.
    pub rows: Vec<(String, f64, Vec<f64>)>,
}

/// Column label for a quantile level: `median` for 0.5, else `q<percent>`.
pub fn quantile_label(q: f64) -> String {
    if (q - 0.5).abs() < 1e-12 {
        "median".to_string()
    } else {
        let pct = (q * 1e6).round() / 1e4;
        format!("q{pct}")
    }
}

pub const DEFAULT_QUANTILES: [f64; 5] = [0.025, 0.1, 0.5, 0.9, 0.975];

pub fn summarize_cells(populations: &[String], times: &[f64], draws: &[DMatrix<f64>], qs: &[f64]) -> Result<CellSummary> {
    diagnostics::check_quantiles(qs)?;
    if draws.is_empty() {
        return Err(TmmpError::Argument("no draws to summarize".into()));
    }
    let mut rows = Vec::with_capacity(populations.len() * times.len());
    let mut buf = vec![0.0; draws.len()];
    for (c, pop) in populations.iter().enumerate() {
        for (t, time) in times.iter().enumerate() {
            for (slot, d) in buf.iter_mut().zip(draws) {
                *slot = d[(c, t)];
            }
            rows.push((pop.clone(), *time, quantiles(&buf, qs)?));
        }
    }
    Ok(CellSummary {
        quantiles: qs.to_vec(),
        rows,
    })
}

/// Per-cell `eta` quantiles of a fit.
pub fn summarize(result: &FitResult, qs: &[f64]) -> Result<CellSummary> {
    summarize_cells(&result.populations, &result.times, &result.eta, qs)
}

/// Mean, sd and quantiles of each traced scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub quantiles: Vec<f64>,
}

pub fn summarize_scalars(result: &FitResult, qs: &[f64]) -> Result<Vec<ScalarSummary>> {
    result
        .traces
        .iter()
        .map(|t| {
            let all: Vec<f64> = t.chains.iter().flatten().copied().collect();
            let n = all.len() as f64;
            let mean = all.iter().sum::<f64>() / n;
            let sd = if all.len() > 1 {
                (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Ok(ScalarSummary {
                name: t.name.clone(),
                mean,
                sd,
                quantiles: quantiles(&all, qs)?,
            })
        })
        .collect()
}

/// Display label of a scalar entry: `name`, `name[pop]` or `name[pop,time]`.
pub fn scalar_label(name: &str, grid: &Grid, pop: Option<usize>, time: Option<usize>) -> String {
    match (pop, time) {
        (Some(c), Some(t)) => format!("{name}[{},{}]", grid.populations[c], grid.times[t]),
        (Some(c), None) => format!("{name}[{}]", grid.populations[c]),
        _ => name.to_string(),
    }
}

/// Number of scalar entries a parameter has on `grid`.
pub fn scalar_count(scope: Scope, grid: &Grid) -> usize {
    match scope {
        Scope::Shared => 1,
        Scope::PerPopulation => grid.n_populations(),
        Scope::PerCell => grid.n_populations() * grid.n_times(),
    }
}

/// Packs flat values (population-major for cells) into a [`ParamValue`].
pub fn pack_values(scope: Scope, grid: &Grid, values: &[f64]) -> ParamValue {
    match scope {
        Scope::Shared => ParamValue::Shared(values[0]),
        Scope::PerPopulation => ParamValue::PerPopulation(values.to_vec()),
        Scope::PerCell => ParamValue::PerCell(values.chunks(grid.n_times()).map(|r| r.to_vec()).collect()),
    }
}

/// Group indices for every binding that needs them.
pub fn group_indices(bindings: &Bindings, grid: &Grid, groupings: Option<&Groupings>) -> Result<BTreeMap<String, GroupIndex>> {
    let mut out = BTreeMap::new();
    for (name, s) in bindings {
        let levels = s.grouping_levels();
        let gi = if levels == 0 {
            GroupIndex::default()
        } else {
            let g = groupings.ok_or_else(|| TmmpError::Grouping {
                population: String::new(),
                reason: format!("{name} is hierarchical but no grouping table was supplied"),
            })?;
            g.index(&grid.populations, levels)?
        };
        out.insert(name.clone(), gi);
    }
    Ok(out)
}

/// Checks one binding against its parameter's domain and scope.
pub fn check_binding(d: &ParamDecl, s: &EstimationStrategy) -> Result<()> {
    s.check(&d.name, d.domain)?;
    let misplaced = match s {
        EstimationStrategy::Hierarchical(_) => d.scope == Scope::Shared,
        EstimationStrategy::MultiplicativeTn(_) => d.scope != Scope::PerPopulation,
        _ => false,
    };
    if misplaced {
        let (what, needs) = match s {
            EstimationStrategy::Hierarchical(_) => ("hierarchical", "population-specific"),
            _ => ("multiplicative_tn", "indexed by population only"),
        };
        return Err(TmmpError::Spec(format!(
            "{} is not {needs} and cannot take a {what} binding",
            d.name
        )));
    }
    Ok(())
}

/// Checks that bindings cover exactly the model's parameters with fitting scopes.
pub fn check_bindings(decls: &[ParamDecl], bindings: &Bindings) -> Result<()> {
    for d in decls {
        let s = bindings
            .get(&d.name)
            .ok_or_else(|| TmmpError::Spec(format!("parameter {} has no estimation binding", d.name)))?;
        check_binding(d, s)?;
    }
    for name in bindings.keys() {
        if !decls.iter().any(|d| &d.name == name) {
            return Err(TmmpError::Spec(format!("binding for unknown parameter {name}")));
        }
    }
    Ok(())
}

/// Values for every parameter when all bindings are fixed.
pub fn fixed_params(model: &ProcessModel, dm: &DataModelSpec, bindings: &Bindings) -> Result<ParamSet> {
    let decls = parameter_decls(model, dm);
    check_bindings(&decls, bindings)?;
    let mut set = ParamSet::new();
    for d in &decls {
        match &bindings[&d.name] {
            EstimationStrategy::Fixed(v) => {
                let n = scalar_count(d.scope, &model.grid);
                set.insert(d.name.clone(), pack_values(d.scope, &model.grid, &vec![*v; n]));
            }
            _ => {
                return Err(TmmpError::NotConjugate(format!("parameter {} is not fixed", d.name)));
            }
        }
    }
    Ok(set)
}

/// Whether the conjugate path applies to this model and binding set.
pub fn is_conjugate(model: &ProcessModel, dm: &DataModelSpec, bindings: &Bindings) -> bool {
    dm.transformation == model.link
        && !model.systematic.is_recursive()
        && parameter_decls(model, dm)
            .iter()
            .all(|d| matches!(bindings.get(&d.name), Some(EstimationStrategy::Fixed(_))))
}

/// One joint draw from the prior.
#[derive(Debug, Clone)]
pub struct PriorDraw {
    pub params: ParamSet,
    pub hyper: BTreeMap<String, Vec<f64>>,
    pub deltas: Vec<DVector<f64>>,
    pub eps: Vec<DVector<f64>>,
    pub eta: DMatrix<f64>,
}

/// Draws parameters top-down through their strategies, then the smoother
/// coefficients and `eta`.
pub fn sample_prior(
    model: &ProcessModel,
    dm: &DataModelSpec,
    bindings: &Bindings,
    groupings: Option<&Groupings>,
    seed: u64,
) -> Result<PriorDraw> {
    let decls = parameter_decls(model, dm);
    check_bindings(&decls, bindings)?;
    let groups = group_indices(bindings, &model.grid, groupings)?;
    let mut rng = stream_rng(seed, 0);
    let mut params = ParamSet::new();
    let mut hyper = BTreeMap::new();
    for d in &decls {
        let n = scalar_count(d.scope, &model.grid);
        let (values, h) = bindings[&d.name].sample(&d.name, d.domain, n, &groups[&d.name], None, &mut rng)?;
        params.insert(d.name.clone(), pack_values(d.scope, &model.grid, &values));
        if !h.is_empty() {
            hyper.insert(d.name.clone(), h);
        }
    }
    let layout = model.layout()?;
    let mut deltas = Vec::new();
    let mut eps = Vec::new();
    for c in 0..model.grid.n_populations() {
        let sm = model.smoothing_for(&params, c)?;
        let factor = sm.diff_factor(&layout)?;
        let (e, d) = sm.sample_with(&layout, &factor, &mut rng);
        deltas.push(d);
        eps.push(e);
    }
    let eta = model.evaluate_eta(&params, &eps)?;
    Ok(PriorDraw {
        params,
        hyper,
        deltas,
        eps,
        eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_labels() {
        let labels: Vec<String> = DEFAULT_QUANTILES.iter().map(|q| quantile_label(*q)).collect();
        assert_eq!(labels, ["q2.5", "q10", "median", "q90", "q97.5"]);
    }
}
