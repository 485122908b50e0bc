//! Process models `g1(eta) = g2(X, beta) + g3(t, eta, alpha) + a + eps`.
//!
//! Covariate (`g2`), systematic (`g3`) and projection strategies are trait
//! objects registered by name; a specification file selects them by keyword.

pub mod covariate;
pub mod projection;
pub mod systematic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::{Basis, BasisSpec};
use crate::data::DataTable;
use crate::error::{Result, TmmpError};
use crate::kernels::{KernelRegistry, KernelSpec, KernelTemplate};
use crate::params::{CellParams, ParamDecl, ParamSet};
use crate::smoothing::{ConstraintExpr, ConstraintSet, SmootherLayout, SmoothingModel};

pub use covariate::{covariate_registry, CovariateComponent};
pub use projection::{project, projection_registry, FittedDraw, ProjectionOptions, ProjectionResult, ProjectionStrategy};
pub use systematic::{fpem_backward_step, fpem_transition_step, systematic_registry, SystematicComponent};

/// Lower clamp for proportions entering recursive logistic components.
pub const PROPORTION_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Log,
    Log10,
    Logit,
}

impl Link {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Link::Identity => x,
            Link::Log => x.ln(),
            Link::Log10 => x.log10(),
            Link::Logit => logit(x),
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        match self {
            Link::Identity => y,
            Link::Log => y.exp(),
            Link::Log10 => 10f64.powf(y),
            Link::Logit => logistic(y),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
            Link::Log10 => "log10",
            Link::Logit => "logit",
        }
    }

    /// Whether `x` lies in the link's domain.
    pub fn admits(&self, x: f64) -> bool {
        match self {
            Link::Identity => x.is_finite(),
            Link::Log | Link::Log10 => x.is_finite() && x > 0.0,
            Link::Logit => x > 0.0 && x < 1.0,
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Link {
    type Err = TmmpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(Link::Identity),
            "log" => Ok(Link::Log),
            "log10" => Ok(Link::Log10),
            "logit" => Ok(Link::Logit),
            other => Err(TmmpError::Argument(format!("unknown link '{other}'"))),
        }
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Populations crossed with an ordered time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub populations: Vec<String>,
    pub times: Vec<f64>,
}

impl Grid {
    pub fn new(populations: Vec<String>, times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(TmmpError::Grid("time grid is empty".into()));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TmmpError::Grid("time grid must be finite and strictly increasing".into()));
        }
        if populations.is_empty() {
            return Err(TmmpError::Grid("no populations".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &populations {
            if !seen.insert(p) {
                return Err(TmmpError::Grid(format!("duplicate population '{p}'")));
            }
        }
        Ok(Grid { populations, times })
    }

    /// `start, start + step, ..., end` (end included when on the lattice).
    pub fn regular(populations: Vec<String>, start: f64, end: f64, step: f64) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) || end < start {
            return Err(TmmpError::Grid(format!("invalid grid {start}..{end} by {step}")));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize + 1;
        Grid::new(populations, (0..n).map(|i| start + i as f64 * step).collect())
    }

    pub fn n_populations(&self) -> usize {
        self.populations.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("grid is non-empty")
    }

    /// Spacing of the last two grid points (1 for single-point grids).
    pub fn step(&self) -> f64 {
        match self.times.len() {
            0 | 1 => 1.0,
            n => self.times[n - 1] - self.times[n - 2],
        }
    }

    pub fn population_index(&self, name: &str) -> Option<usize> {
        self.populations.iter().position(|p| p == name)
    }

    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|x| (x - t).abs() < 1e-9)
    }

    /// Grid times continued after the last point up to `t_end`.
    pub fn projection_times(&self, t_end: f64) -> Result<Vec<f64>> {
        if t_end < self.end() - 1e-9 {
            return Err(TmmpError::Grid(format!(
                "projection end {t_end} precedes the last estimation time {}",
                self.end()
            )));
        }
        let step = self.step();
        let n = ((t_end - self.end()) / step + 1e-9).floor() as usize;
        Ok((1..=n).map(|i| self.end() + i as f64 * step).collect())
    }
}

/// Selection of a registered component with its options.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComponentConfig {
    pub variant: String,
    pub covariates: Vec<String>,
    pub options: BTreeMap<String, String>,
}

impl ComponentConfig {
    pub fn new(variant: impl Into<String>) -> Self {
        ComponentConfig {
            variant: variant.into(),
            ..Default::default()
        }
    }

    pub fn with_covariates(mut self, covariates: &[&str]) -> Self {
        self.covariates = covariates.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_option(mut self, key: &str, value: impl ToString) -> Self {
        self.options.insert(key.to_string(), value.to_string());
        self
    }
}

/// Builders registered by keyword.
#[derive(Debug, Clone)]
pub struct Registry<B> {
    entries: Vec<(&'static str, B)>,
}

impl<B> Registry<B> {
    pub fn empty() -> Self {
        Registry { entries: Vec::new() }
    }

    /// Adds or replaces an entry.
    pub fn register(&mut self, name: &'static str, builder: B) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, builder));
    }

    pub fn get(&self, name: &str) -> Option<&B> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, b)| b)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }
}

/// Smoother description shared by all populations; kernels may reference
/// per-population parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherTemplate {
    pub basis: BasisSpec,
    pub kernel: KernelTemplate,
    pub r: usize,
    pub constraints: Vec<ConstraintExpr>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offsets {
    pub name: String,
    pub table: DataTable,
}

#[derive(Debug, Clone)]
pub struct ProcessModel {
    pub grid: Grid,
    pub link: Link,
    pub covariate: Arc<dyn CovariateComponent>,
    pub systematic: Arc<dyn SystematicComponent>,
    pub covariate_data: DataTable,
    pub offsets: Option<Offsets>,
    pub smoother: SmootherTemplate,
    pub kernels: KernelRegistry,
}

impl ProcessModel {
    /// A model with no covariate, systematic or offset terms.
    pub fn smoother_only(grid: Grid, link: Link, smoother: SmootherTemplate) -> Result<Self> {
        Ok(ProcessModel {
            grid,
            link,
            covariate: Arc::new(covariate::NoCovariates),
            systematic: Arc::new(systematic::NoSystematic),
            covariate_data: DataTable::new(),
            offsets: None,
            smoother,
            kernels: KernelRegistry::builtin(),
        })
    }

    pub fn basis(&self) -> Result<Basis> {
        Basis::new(self.smoother.basis, self.grid.start(), self.grid.end())
    }

    pub fn constraint_sets(&self, basis: &Basis, times: &[f64]) -> Result<Vec<ConstraintSet>> {
        self.smoother
            .constraints
            .iter()
            .map(|c| c.resolve(basis, times))
            .collect()
    }

    /// Smoother matrices over the estimation grid.
    pub fn layout(&self) -> Result<SmootherLayout> {
        let basis = self.basis()?;
        let sets = self.constraint_sets(&basis, &self.grid.times)?;
        SmootherLayout::build(&basis, self.smoother.r, &sets, &self.grid.times)
    }

    pub fn kernel_for(&self, params: &ParamSet, pop: usize) -> Result<KernelSpec> {
        let lookup = CellParams {
            set: params,
            pop,
            time: None,
        };
        self.smoother.kernel.build(&self.kernels, &lookup)
    }

    pub fn smoothing_for(&self, params: &ParamSet, pop: usize) -> Result<SmoothingModel> {
        let basis = self.basis()?;
        let sets = self.constraint_sets(&basis, &self.grid.times)?;
        SmoothingModel::new(basis, self.kernel_for(params, pop)?, self.smoother.r, sets)
    }

    /// Every parameter referenced by a component, once, in component order.
    pub fn param_decls(&self) -> Vec<ParamDecl> {
        let mut out: Vec<ParamDecl> = Vec::new();
        let kernel = self
            .smoother
            .kernel
            .symbols(&self.kernels)
            .into_iter()
            .map(|(n, d)| ParamDecl::new(n, d));
        for decl in self
            .covariate
            .params()
            .into_iter()
            .chain(self.systematic.params())
            .chain(kernel)
        {
            if !out.iter().any(|d| d.name == decl.name) {
                out.push(decl);
            }
        }
        out
    }

    fn lookup<'a>(&self, params: &'a ParamSet, pop: usize, t: f64) -> CellParams<'a> {
        CellParams {
            set: params,
            pop,
            time: self.grid.time_index(t),
        }
    }

    /// `g2 + a` at each time for one population.
    pub fn fixed_part(&self, params: &ParamSet, pop: usize, times: &[f64]) -> Result<Vec<f64>> {
        let name = &self.grid.populations[pop];
        let covs = self.covariate.covariates();
        let mut x = vec![0.0; covs.len()];
        times
            .iter()
            .map(|&t| {
                for (slot, cov) in x.iter_mut().zip(covs) {
                    *slot = self.covariate_data.require(name, t, cov)?;
                }
                let g2 = self.covariate.evaluate(&self.lookup(params, pop, t), &x)?;
                let a = match &self.offsets {
                    Some(o) => o.table.require(name, t, &o.name)?,
                    None => 0.0,
                };
                Ok(g2 + a)
            })
            .collect()
    }

    /// Link-scale level `g2 + g3 + a + eps` and `eta` for one population.
    pub fn eta_path(&self, params: &ParamSet, pop: usize, times: &[f64], eps: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if eps.len() != times.len() {
            return Err(TmmpError::Size(format!(
                "smoothing term has length {}, grid has {} times",
                eps.len(),
                times.len()
            )));
        }
        let mut rest = self.fixed_part(params, pop, times)?;
        for (r, e) in rest.iter_mut().zip(eps) {
            *r += e;
        }
        let lookup = CellParams {
            set: params,
            pop,
            time: None,
        };
        let g3 = self.systematic.path(&lookup, times, &rest, self.link)?;
        let level: Vec<f64> = rest.iter().zip(&g3).map(|(r, g)| r + g).collect();
        let eta: Vec<f64> = level.iter().map(|l| self.link.inverse(*l)).collect();
        if let Some(i) = eta.iter().position(|v| !v.is_finite()) {
            return Err(TmmpError::NumericalConditioning {
                context: format!(
                    "eta for population {} at time {} is not finite",
                    self.grid.populations[pop], times[i]
                ),
            });
        }
        Ok((level, eta))
    }

    /// Link-scale mean `g2 + g3 + a` when `g3` does not depend on `eta`.
    pub fn mean_level(&self, params: &ParamSet, pop: usize, times: &[f64]) -> Result<Vec<f64>> {
        if self.systematic.is_recursive() {
            return Err(TmmpError::NotConjugate(format!(
                "systematic component {} depends on past eta",
                self.systematic.name()
            )));
        }
        let zeros = vec![0.0; times.len()];
        Ok(self.eta_path(params, pop, times, &zeros)?.0)
    }

    /// `eta` over the estimation grid (`populations x times`).
    pub fn evaluate_eta(&self, params: &ParamSet, eps: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        if eps.len() != self.grid.n_populations() {
            return Err(TmmpError::Size(format!(
                "{} smoothing vectors for {} populations",
                eps.len(),
                self.grid.n_populations()
            )));
        }
        let mut out = DMatrix::zeros(self.grid.n_populations(), self.grid.n_times());
        for (c, e) in eps.iter().enumerate() {
            let (_, eta) = self.eta_path(params, c, &self.grid.times, e.as_slice())?;
            for (t, v) in eta.into_iter().enumerate() {
                out[(c, t)] = v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamExpr;

    #[test]
    fn link_round_trip() {
        for link in [Link::Identity, Link::Log, Link::Log10, Link::Logit] {
            for x in [0.01, 0.3, 0.77] {
                assert!((link.inverse(link.apply(x)) - x).abs() < 1e-12, "{link}");
            }
        }
    }

    #[test]
    fn projection_times_follow_step() {
        let g = Grid::regular(vec!["A".into()], 2000.0, 2010.0, 1.0).unwrap();
        assert_eq!(g.projection_times(2013.0).unwrap(), vec![2011.0, 2012.0, 2013.0]);
        assert!(g.projection_times(2010.0).unwrap().is_empty());
    }

    #[test]
    fn empty_model_gives_zero_eta() {
        let grid = Grid::regular(vec!["A".into(), "B".into()], 0.0, 4.0, 1.0).unwrap();
        let smoother = SmootherTemplate {
            basis: BasisSpec::Identity,
            kernel: KernelTemplate::new("white_noise", vec![("sigma2".into(), ParamExpr::Value(1.0))]),
            r: 0,
            constraints: vec![],
        };
        let m = ProcessModel::smoother_only(grid, Link::Identity, smoother).unwrap();
        let eps = vec![DVector::zeros(5); 2];
        let eta = m.evaluate_eta(&ParamSet::new(), &eps).unwrap();
        assert!(eta.iter().all(|v| *v == 0.0));
    }
}
