//! Transformed-normal data model linking observations to `eta`.
//!
//! `f(y_i) ~ N(f(eta[c[i], t[i]]) + b_s, s_i^2 + omega_s^2)` where `s` is the
//! observation's source.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TmmpError};
use crate::linalg::LN_2PI;
use crate::params::{ParamExpr, ParamSet};
use crate::process::{Grid, Link};

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub population: String,
    pub time: f64,
    /// Indicator-scale value.
    pub value: f64,
    /// Sampling variance on the transformed scale.
    pub sampling_variance: f64,
    pub source: String,
}

/// Bias and non-sampling variance for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTerms {
    pub bias: ParamExpr,
    pub nonsampling_variance: ParamExpr,
}

impl Default for SourceTerms {
    fn default() -> Self {
        SourceTerms {
            bias: ParamExpr::Value(0.0),
            nonsampling_variance: ParamExpr::Value(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataModelSpec {
    pub transformation: Link,
    /// Terms for sources without their own entry.
    pub default: SourceTerms,
    pub sources: BTreeMap<String, SourceTerms>,
}

impl DataModelSpec {
    pub fn new(transformation: Link) -> Self {
        DataModelSpec {
            transformation,
            default: SourceTerms::default(),
            sources: BTreeMap::new(),
        }
    }

    pub fn terms(&self, source: &str) -> &SourceTerms {
        self.sources.get(source).unwrap_or(&self.default)
    }

    /// Parameter names referenced by bias or variance terms.
    pub fn symbols(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in std::iter::once(&self.default).chain(self.sources.values()) {
            for e in [&t.bias, &t.nonsampling_variance] {
                if let ParamExpr::Symbol(s) = e {
                    if !out.contains(s) {
                        out.push(s.clone());
                    }
                }
            }
        }
        out
    }

    /// Names of symbols that are non-sampling variances.
    pub fn variance_symbols(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in std::iter::once(&self.default).chain(self.sources.values()) {
            if let ParamExpr::Symbol(s) = &t.nonsampling_variance {
                if !out.contains(s) {
                    out.push(s.clone());
                }
            }
        }
        out
    }

    /// Binds observations to grid cells and evaluates their terms.
    pub fn resolve(&self, observations: &[Observation], grid: &Grid, params: &ParamSet) -> Result<Vec<ResolvedObservation>> {
        observations
            .iter()
            .map(|o| {
                let cell = locate(o, grid)?;
                if !self.transformation.admits(o.value) {
                    return Err(TmmpError::ParameterDomain(format!(
                        "observation {} for {} at {} is outside the {} transformation's domain",
                        o.value, o.population, o.time, self.transformation
                    )));
                }
                if !(o.sampling_variance >= 0.0 && o.sampling_variance.is_finite()) {
                    return Err(TmmpError::ParameterDomain(format!(
                        "sampling variance {} for {} at {} must be finite and >= 0",
                        o.sampling_variance, o.population, o.time
                    )));
                }
                let t = self.terms(&o.source);
                let bias = params.resolve(&t.bias, cell.0, None)?;
                let omega2 = params.resolve(&t.nonsampling_variance, cell.0, None)?;
                if !(omega2 >= 0.0) {
                    return Err(TmmpError::ParameterDomain(format!(
                        "non-sampling variance for source {} must be >= 0, got {omega2}",
                        o.source
                    )));
                }
                Ok(ResolvedObservation {
                    pop: cell.0,
                    time: cell.1,
                    y: self.transformation.apply(o.value),
                    bias,
                    variance: o.sampling_variance + omega2,
                })
            })
            .collect()
    }

    pub fn log_likelihood(&self, observations: &[Observation], eta: &DMatrix<f64>, grid: &Grid, params: &ParamSet) -> Result<f64> {
        let resolved = self.resolve(observations, grid, params)?;
        Ok(self.log_likelihood_resolved(&resolved, eta))
    }

    /// Log-likelihood of already bound observations.
    pub fn log_likelihood_resolved(&self, resolved: &[ResolvedObservation], eta: &DMatrix<f64>) -> f64 {
        resolved
            .iter()
            .map(|o| {
                let mean = self.transformation.apply(eta[(o.pop, o.time)]) + o.bias;
                gaussian_log_pdf(o.y, mean, o.variance)
            })
            .sum()
    }

    /// Draws an observation for each template, replacing its value.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        templates: &[Observation],
        eta: &DMatrix<f64>,
        grid: &Grid,
        params: &ParamSet,
        rng: &mut R,
    ) -> Result<Vec<Observation>> {
        templates
            .iter()
            .map(|o| {
                let (c, t) = locate(o, grid)?;
                let terms = self.terms(&o.source);
                let bias = params.resolve(&terms.bias, c, None)?;
                let var = o.sampling_variance + params.resolve(&terms.nonsampling_variance, c, None)?;
                let z: f64 = rng.sample(StandardNormal);
                let f = self.transformation.apply(eta[(c, t)]) + bias + var.max(0.0).sqrt() * z;
                Ok(Observation {
                    value: self.transformation.inverse(f),
                    ..o.clone()
                })
            })
            .collect()
    }
}

/// Observation bound to a grid cell, on the transformed scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedObservation {
    pub pop: usize,
    pub time: usize,
    pub y: f64,
    pub bias: f64,
    pub variance: f64,
}

fn locate(o: &Observation, grid: &Grid) -> Result<(usize, usize)> {
    let coverage = || TmmpError::DataCoverage {
        population: o.population.clone(),
        time: o.time,
        name: "observation".into(),
    };
    let c = grid.population_index(&o.population).ok_or_else(coverage)?;
    let t = grid.time_index(o.time).ok_or_else(coverage)?;
    Ok((c, t))
}

/// Normal log-density; a zero variance gives a point mass.
pub fn gaussian_log_pdf(y: f64, mean: f64, variance: f64) -> f64 {
    if variance <= 0.0 {
        return if y == mean { 0.0 } else { f64::NEG_INFINITY };
    }
    let r = y - mean;
    -0.5 * (LN_2PI + variance.ln() + r * r / variance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(pop: &str, time: f64, value: f64, var: f64, source: &str) -> Observation {
        Observation {
            population: pop.into(),
            time,
            value,
            sampling_variance: var,
            source: source.into(),
        }
    }

    #[test]
    fn zero_residual_contribution() {
        let grid = Grid::regular(vec!["A".into()], 0.0, 2.0, 1.0).unwrap();
        let mut dm = DataModelSpec::new(Link::Identity);
        dm.sources.insert(
            "dhs".into(),
            SourceTerms {
                bias: ParamExpr::Value(0.0),
                nonsampling_variance: ParamExpr::Symbol("omega2_dhs".into()),
            },
        );
        let mut p = ParamSet::new();
        p.set_shared("omega2_dhs", 0.3);
        let eta = DMatrix::from_row_slice(1, 3, &[0.5, 0.7, 0.9]);
        let ll = dm.log_likelihood(&[obs("A", 1.0, 0.7, 0.2, "dhs")], &eta, &grid, &p).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI * 0.5).ln()).abs() < 1e-12);
    }

    #[test]
    fn off_grid_observation_is_coverage_error() {
        let grid = Grid::regular(vec!["A".into()], 0.0, 2.0, 1.0).unwrap();
        let dm = DataModelSpec::new(Link::Logit);
        let eta = DMatrix::from_element(1, 3, 0.5);
        let r = dm.log_likelihood(&[obs("A", 5.0, 0.4, 0.1, "x")], &eta, &grid, &ParamSet::new());
        assert!(matches!(r, Err(TmmpError::DataCoverage { .. })));
    }
}
