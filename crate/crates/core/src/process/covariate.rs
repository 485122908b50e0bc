//! Covariate components `g2(X, beta)`.

use std::fmt;
use std::sync::Arc;

use super::{ComponentConfig, Grid, Registry};
use crate::error::{Result, TmmpError};
use crate::params::{Domain, ParamDecl, ParamLookup};

pub trait CovariateComponent: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Covariate names in the order `evaluate` expects them.
    fn covariates(&self) -> &[String];

    fn params(&self) -> Vec<ParamDecl>;

    fn evaluate(&self, p: &dyn ParamLookup, x: &[f64]) -> Result<f64>;
}

pub type CovariateBuilder = fn(&ComponentConfig, &Grid) -> Result<Arc<dyn CovariateComponent>>;

pub fn covariate_registry() -> Registry<CovariateBuilder> {
    let mut r: Registry<CovariateBuilder> = Registry::empty();
    r.register("none", |cfg, _| {
        expect_covariates(cfg, 0)?;
        Ok(Arc::new(NoCovariates))
    });
    r.register("linear", |cfg, _| {
        if cfg.covariates.is_empty() {
            return Err(TmmpError::Spec("linear covariate component needs covariates".into()));
        }
        Ok(Arc::new(Linear::new(cfg.covariates.clone())))
    });
    r.register("piecewise_log", |cfg, _| {
        expect_covariates(cfg, 1)?;
        Ok(Arc::new(PiecewiseLog {
            covariates: cfg.covariates.clone(),
        }))
    });
    r.register("gbd_nonlinear", |cfg, _| {
        expect_covariates(cfg, 3)?;
        Ok(Arc::new(GbdNonlinear {
            covariates: cfg.covariates.clone(),
        }))
    });
    r.register("pc_regression", |cfg, _| {
        if cfg.covariates.is_empty() {
            return Err(TmmpError::Spec("pc_regression needs covariates".into()));
        }
        Ok(Arc::new(PcRegression::new(cfg.covariates.clone())))
    });
    r
}

fn expect_covariates(cfg: &ComponentConfig, n: usize) -> Result<()> {
    if cfg.covariates.len() != n {
        return Err(TmmpError::Spec(format!(
            "covariate component {} takes {n} covariates, got {}",
            cfg.variant,
            cfg.covariates.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct NoCovariates;

impl CovariateComponent for NoCovariates {
    fn name(&self) -> &'static str {
        "none"
    }
    fn covariates(&self) -> &[String] {
        &[]
    }
    fn params(&self) -> Vec<ParamDecl> {
        Vec::new()
    }
    fn evaluate(&self, _: &dyn ParamLookup, _: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

/// `beta_0_c + sum_k X_k beta_<k>`.
#[derive(Debug, Clone)]
pub struct Linear {
    covariates: Vec<String>,
    names: Vec<String>,
}

impl Linear {
    pub fn new(covariates: Vec<String>) -> Self {
        let names = covariates.iter().map(|c| format!("beta_{c}")).collect();
        Linear { covariates, names }
    }
}

impl CovariateComponent for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn covariates(&self) -> &[String] {
        &self.covariates
    }
    fn params(&self) -> Vec<ParamDecl> {
        std::iter::once(ParamDecl::new("beta_0_c", Domain::Real))
            .chain(self.names.iter().map(|n| ParamDecl::new(n.clone(), Domain::Real)))
            .collect()
    }
    fn evaluate(&self, p: &dyn ParamLookup, x: &[f64]) -> Result<f64> {
        let mut v = p.param("beta_0_c")?;
        for (name, xk) in self.names.iter().zip(x) {
            v += p.param(name)? * xk;
        }
        Ok(v)
    }
}

/// `beta_0_c + beta_1 (log X - log beta_2) 1[X > beta_2]`.
#[derive(Debug, Clone)]
pub struct PiecewiseLog {
    covariates: Vec<String>,
}

impl CovariateComponent for PiecewiseLog {
    fn name(&self) -> &'static str {
        "piecewise_log"
    }
    fn covariates(&self) -> &[String] {
        &self.covariates
    }
    fn params(&self) -> Vec<ParamDecl> {
        vec![
            ParamDecl::new("beta_0_c", Domain::Real),
            ParamDecl::new("beta_1", Domain::Real),
            ParamDecl::new("beta_2", Domain::Positive),
        ]
    }
    fn evaluate(&self, p: &dyn ParamLookup, x: &[f64]) -> Result<f64> {
        let b0 = p.param("beta_0_c")?;
        let cutoff = p.param("beta_2")?;
        if !(cutoff > 0.0) {
            return Err(TmmpError::ParameterDomain(format!("beta_2 must be > 0, got {cutoff}")));
        }
        if x[0] > cutoff {
            Ok(b0 + p.param("beta_1")? * (x[0].ln() - cutoff.ln()))
        } else {
            Ok(b0)
        }
    }
}

/// `exp(beta_1_c log LDI + beta_2_c EDU + beta_3_c) + beta_4_c HIV`.
#[derive(Debug, Clone)]
pub struct GbdNonlinear {
    covariates: Vec<String>,
}

impl CovariateComponent for GbdNonlinear {
    fn name(&self) -> &'static str {
        "gbd_nonlinear"
    }
    fn covariates(&self) -> &[String] {
        &self.covariates
    }
    fn params(&self) -> Vec<ParamDecl> {
        (1..=4)
            .map(|i| ParamDecl::new(format!("beta_{i}_c"), Domain::Real))
            .collect()
    }
    fn evaluate(&self, p: &dyn ParamLookup, x: &[f64]) -> Result<f64> {
        let inner = p.param("beta_1_c")? * x[0].ln() + p.param("beta_2_c")? * x[1] + p.param("beta_3_c")?;
        Ok(inner.exp() + p.param("beta_4_c")? * x[2])
    }
}

/// `sum_k X_k beta_<k>_ct` with population- and time-specific coefficients.
#[derive(Debug, Clone)]
pub struct PcRegression {
    covariates: Vec<String>,
    names: Vec<String>,
}

impl PcRegression {
    pub fn new(covariates: Vec<String>) -> Self {
        let names = covariates.iter().map(|c| format!("beta_{c}_ct")).collect();
        PcRegression { covariates, names }
    }
}

impl CovariateComponent for PcRegression {
    fn name(&self) -> &'static str {
        "pc_regression"
    }
    fn covariates(&self) -> &[String] {
        &self.covariates
    }
    fn params(&self) -> Vec<ParamDecl> {
        self.names
            .iter()
            .map(|n| ParamDecl::new(n.clone(), Domain::Real))
            .collect()
    }
    fn evaluate(&self, p: &dyn ParamLookup, x: &[f64]) -> Result<f64> {
        let mut v = 0.0;
        for (name, xk) in self.names.iter().zip(x) {
            v += p.param(name)? * xk;
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn piecewise_log_is_flat_below_cutoff_and_continuous() {
        let c = PiecewiseLog {
            covariates: vec!["u5mr".into()],
        };
        let p = params(&[("beta_0_c", -1.0), ("beta_1", -0.4), ("beta_2", 0.05)]);
        assert_eq!(c.evaluate(&p, &[0.03]).unwrap(), -1.0);
        assert_eq!(c.evaluate(&p, &[0.05]).unwrap(), -1.0);
        let above = c.evaluate(&p, &[0.05 + 1e-12]).unwrap();
        assert!((above + 1.0).abs() < 1e-9);
        let v = c.evaluate(&p, &[0.1]).unwrap();
        assert!((v - (-1.0 - 0.4 * 2f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn gbd_formula() {
        let c = GbdNonlinear {
            covariates: vec!["ldi".into(), "edu".into(), "hiv".into()],
        };
        let p = params(&[("beta_1_c", -0.3), ("beta_2_c", -0.1), ("beta_3_c", 0.5), ("beta_4_c", 2.0)]);
        let want = (-0.3 * 8f64.ln() - 0.1 * 6.0 + 0.5).exp() + 2.0 * 0.01;
        assert!((c.evaluate(&p, &[8.0, 6.0, 0.01]).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn registry_rejects_wrong_arity() {
        let r = covariate_registry();
        let grid = Grid::regular(vec!["A".into()], 0.0, 1.0, 1.0).unwrap();
        let cfg = ComponentConfig::new("piecewise_log").with_covariates(&["a", "b"]);
        assert!((r.get("piecewise_log").unwrap())(&cfg, &grid).is_err());
    }
}
