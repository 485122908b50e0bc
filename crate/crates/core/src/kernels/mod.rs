//! Stationary autocovariance functions and their Gram matrices.
//!
//! Every kernel implements [`Kernel`] and is registered by keyword in a
//! [`KernelRegistry`], which is how specification files name them
//! (`matern(kappa2=0.05, nu=1.5, ell=3)`).

mod bessel;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, TmmpError};
use crate::linalg;
use crate::params::{Domain, ParamExpr, ParamLookup};

pub use bessel::bessel_k;

/// A stationary autocovariance `s*(|t1 - t2|)`.
pub trait Kernel: Send + Sync + fmt::Debug {
    /// Registry keyword.
    fn name(&self) -> &'static str;

    /// Covariance at a non-negative lag.
    fn at_lag(&self, lag: f64) -> f64;

    /// Parameter values keyed by their spec-file names, in declaration order.
    fn params(&self) -> Vec<(&'static str, f64)>;

    /// Lag-zero value.
    fn variance(&self) -> f64 {
        self.at_lag(0.0)
    }
}

/// Immutable handle to a kernel instance.
#[derive(Clone)]
pub struct KernelSpec(Arc<dyn Kernel>);

impl fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.0.name())?;
        for (i, (k, v)) in self.0.params().iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        f.write_str(")")
    }
}

impl PartialEq for KernelSpec {
    fn eq(&self, other: &Self) -> bool {
        self.0.name() == other.0.name() && self.0.params() == other.0.params()
    }
}

impl KernelSpec {
    pub fn new(kernel: impl Kernel + 'static) -> Self {
        KernelSpec(Arc::new(kernel))
    }

    pub fn from_arc(kernel: Arc<dyn Kernel>) -> Self {
        KernelSpec(kernel)
    }

    pub fn ar1(kappa2: f64, rho: f64) -> Result<Self> {
        Ok(Self::new(Ar1::new(kappa2, rho)?))
    }

    pub fn arma11(kappa2: f64, rho: f64, theta: f64) -> Result<Self> {
        Ok(Self::new(Arma11::new(kappa2, rho, theta)?))
    }

    pub fn squared_exponential(kappa2: f64, ell: f64) -> Result<Self> {
        Ok(Self::new(SquaredExponential::new(kappa2, ell)?))
    }

    pub fn matern(kappa2: f64, nu: f64, ell: f64) -> Result<Self> {
        Ok(Self::new(Matern::new(kappa2, nu, ell)?))
    }

    pub fn white_noise(sigma2: f64) -> Result<Self> {
        Ok(Self::new(WhiteNoise::new(sigma2)?))
    }

    pub fn name(&self) -> &'static str {
        self.0.name()
    }

    pub fn params(&self) -> Vec<(&'static str, f64)> {
        self.0.params()
    }

    pub fn variance(&self) -> f64 {
        self.0.variance()
    }

    pub fn evaluate(&self, t1: f64, t2: f64) -> f64 {
        self.0.at_lag((t1 - t2).abs())
    }

    /// Gram matrix over `times`, verified to factorize within the jitter budget.
    pub fn gram_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        check_times(times)?;
        let g = self.gram_unchecked(times);
        if self.variance() > 0.0 && !times.is_empty() {
            linalg::jittered_cholesky(&g, self.variance(), &self.describe(times))?;
        }
        Ok(g)
    }

    /// Gram matrix without the grid and factorization checks.
    pub fn gram_unchecked(&self, times: &[f64]) -> DMatrix<f64> {
        let n = times.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            g[(i, i)] = self.0.at_lag(0.0);
            for j in (i + 1)..n {
                let v = self.evaluate(times[i], times[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    pub(crate) fn describe(&self, times: &[f64]) -> String {
        let span = match (times.first(), times.last()) {
            (Some(a), Some(b)) => format!("{} points on [{a}, {b}]", times.len()),
            _ => "empty grid".to_string(),
        };
        format!("Gram matrix of {self:?} over {span}")
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(TmmpError::Grid("non-finite time point".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(TmmpError::Grid("time points must be strictly increasing".into()));
    }
    Ok(())
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(TmmpError::ParameterDomain(msg()))
    }
}

fn check_variance(name: &str, v: f64) -> Result<()> {
    check(v.is_finite() && v >= 0.0, || format!("{name} must be finite and >= 0, got {v}"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1 {
    kappa2: f64,
    rho: f64,
}

impl Ar1 {
    pub fn new(kappa2: f64, rho: f64) -> Result<Self> {
        check_variance("kappa2", kappa2)?;
        check((0.0..1.0).contains(&rho), || format!("ar1 rho must lie in [0, 1), got {rho}"))?;
        Ok(Ar1 { kappa2, rho })
    }
}

impl Kernel for Ar1 {
    fn name(&self) -> &'static str {
        "ar1"
    }
    fn at_lag(&self, lag: f64) -> f64 {
        if lag == 0.0 {
            self.kappa2
        } else {
            self.kappa2 * self.rho.powf(lag)
        }
    }
    fn params(&self) -> Vec<(&'static str, f64)> {
        vec![("kappa2", self.kappa2), ("rho", self.rho)]
    }
}

/// ARMA(1,1) autocovariance scaled so the lag-0 value is `kappa2`.
///
/// Lags are taken in grid steps and rounded to the nearest integer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arma11 {
    kappa2: f64,
    rho: f64,
    theta: f64,
    lag1_correlation: f64,
}

impl Arma11 {
    pub fn new(kappa2: f64, rho: f64, theta: f64) -> Result<Self> {
        check_variance("kappa2", kappa2)?;
        check((0.0..1.0).contains(&rho), || format!("arma11 rho must lie in [0, 1), got {rho}"))?;
        check((-1.0..=0.0).contains(&theta), || {
            format!("arma11 theta must lie in [-1, 0], got {theta}")
        })?;
        let lag1_correlation = (1.0 + rho * theta) * (rho + theta) / (1.0 + 2.0 * rho * theta + theta * theta);
        Ok(Arma11 {
            kappa2,
            rho,
            theta,
            lag1_correlation,
        })
    }

    /// Innovation variance implied by the stationary variance.
    pub fn innovation_variance(&self) -> f64 {
        self.kappa2 * (1.0 - self.rho * self.rho) / (1.0 + 2.0 * self.rho * self.theta + self.theta * self.theta)
    }
}

impl Kernel for Arma11 {
    fn name(&self) -> &'static str {
        "arma11"
    }
    fn at_lag(&self, lag: f64) -> f64 {
        let h = lag.round();
        if h == 0.0 {
            self.kappa2
        } else {
            self.kappa2 * self.lag1_correlation * self.rho.powf(h - 1.0)
        }
    }
    fn params(&self) -> Vec<(&'static str, f64)> {
        vec![("kappa2", self.kappa2), ("rho", self.rho), ("theta", self.theta)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquaredExponential {
    kappa2: f64,
    ell: f64,
}

impl SquaredExponential {
    pub fn new(kappa2: f64, ell: f64) -> Result<Self> {
        check_variance("kappa2", kappa2)?;
        check(ell.is_finite() && ell > 0.0, || format!("ell must be > 0, got {ell}"))?;
        Ok(SquaredExponential { kappa2, ell })
    }
}

impl Kernel for SquaredExponential {
    fn name(&self) -> &'static str {
        "squared_exponential"
    }
    fn at_lag(&self, lag: f64) -> f64 {
        self.kappa2 * (-(lag * lag) / (2.0 * self.ell * self.ell)).exp()
    }
    fn params(&self) -> Vec<(&'static str, f64)> {
        vec![("kappa2", self.kappa2), ("ell", self.ell)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Matern {
    kappa2: f64,
    nu: f64,
    ell: f64,
    log_norm: f64,
}

impl Matern {
    pub fn new(kappa2: f64, nu: f64, ell: f64) -> Result<Self> {
        check_variance("kappa2", kappa2)?;
        check(nu.is_finite() && nu > 0.0, || format!("nu must be > 0, got {nu}"))?;
        check(ell.is_finite() && ell > 0.0, || format!("ell must be > 0, got {ell}"))?;
        let log_norm = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu);
        Ok(Matern {
            kappa2,
            nu,
            ell,
            log_norm,
        })
    }

    /// General-order evaluation through the Bessel function, bypassing the
    /// half-integer closed forms.
    pub fn at_lag_bessel(&self, lag: f64) -> f64 {
        if lag == 0.0 {
            return self.kappa2;
        }
        let x = (2.0 * self.nu).sqrt() * lag / self.ell;
        let k = bessel_k(self.nu, x);
        if k == 0.0 {
            return 0.0;
        }
        self.kappa2 * (self.log_norm + self.nu * x.ln() + k.ln()).exp()
    }
}

impl Kernel for Matern {
    fn name(&self) -> &'static str {
        "matern"
    }
    fn at_lag(&self, lag: f64) -> f64 {
        if lag == 0.0 {
            return self.kappa2;
        }
        let d = lag / self.ell;
        if self.nu == 0.5 {
            self.kappa2 * (-d).exp()
        } else if self.nu == 1.5 {
            let z = 3f64.sqrt() * d;
            self.kappa2 * (1.0 + z) * (-z).exp()
        } else if self.nu == 2.5 {
            let z = 5f64.sqrt() * d;
            self.kappa2 * (1.0 + z + z * z / 3.0) * (-z).exp()
        } else {
            self.at_lag_bessel(lag)
        }
    }
    fn params(&self) -> Vec<(&'static str, f64)> {
        vec![("kappa2", self.kappa2), ("nu", self.nu), ("ell", self.ell)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhiteNoise {
    sigma2: f64,
}

impl WhiteNoise {
    pub fn new(sigma2: f64) -> Result<Self> {
        check_variance("sigma2", sigma2)?;
        Ok(WhiteNoise { sigma2 })
    }
}

impl Kernel for WhiteNoise {
    fn name(&self) -> &'static str {
        "white_noise"
    }
    fn at_lag(&self, lag: f64) -> f64 {
        if lag == 0.0 {
            self.sigma2
        } else {
            0.0
        }
    }
    fn params(&self) -> Vec<(&'static str, f64)> {
        vec![("sigma2", self.sigma2)]
    }
}

type KernelBuilder = fn(&BTreeMap<String, f64>) -> Result<KernelSpec>;

/// Registry metadata for one kernel family.
#[derive(Clone)]
pub struct KernelEntry {
    pub name: &'static str,
    pub aliases: &'static [&'static str],
    /// Label used in comparison tables.
    pub display: &'static str,
    pub params: &'static [(&'static str, Domain)],
    build: KernelBuilder,
}

impl fmt::Debug for KernelEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelEntry").field("name", &self.name).finish()
    }
}

impl KernelEntry {
    pub fn new(
        name: &'static str,
        aliases: &'static [&'static str],
        display: &'static str,
        params: &'static [(&'static str, Domain)],
        build: KernelBuilder,
    ) -> Self {
        KernelEntry {
            name,
            aliases,
            display,
            params,
            build,
        }
    }

    pub fn domain(&self, param: &str) -> Option<Domain> {
        self.params.iter().find(|(n, _)| *n == param).map(|(_, d)| *d)
    }
}

#[derive(Debug, Clone)]
pub struct KernelRegistry {
    entries: Vec<KernelEntry>,
}

const UNIT: Domain = Domain::Interval(0.0, 1.0);

impl Default for KernelRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl KernelRegistry {
    pub fn empty() -> Self {
        KernelRegistry { entries: Vec::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(KernelEntry::new(
            "ar1",
            &["ar"],
            "AR(1)",
            &[("kappa2", Domain::NonNegative), ("rho", UNIT)],
            |p| KernelSpec::ar1(req(p, "kappa2")?, req(p, "rho")?),
        ));
        r.register(KernelEntry::new(
            "arma11",
            &["arma"],
            "ARMA(1,1)",
            &[
                ("kappa2", Domain::NonNegative),
                ("rho", UNIT),
                ("theta", Domain::Interval(-1.0, 0.0)),
            ],
            |p| KernelSpec::arma11(req(p, "kappa2")?, req(p, "rho")?, req(p, "theta")?),
        ));
        r.register(KernelEntry::new(
            "squared_exponential",
            &["se"],
            "squared exponential",
            &[("kappa2", Domain::NonNegative), ("ell", Domain::Positive)],
            |p| KernelSpec::squared_exponential(req(p, "kappa2")?, req(p, "ell")?),
        ));
        r.register(KernelEntry::new(
            "matern",
            &[],
            "Matérn",
            &[
                ("kappa2", Domain::NonNegative),
                ("nu", Domain::Positive),
                ("ell", Domain::Positive),
            ],
            |p| KernelSpec::matern(req(p, "kappa2")?, req(p, "nu")?, req(p, "ell")?),
        ));
        r.register(KernelEntry::new(
            "white_noise",
            &["independent", "iid"],
            "independent",
            &[("sigma2", Domain::NonNegative)],
            |p| KernelSpec::white_noise(req(p, "sigma2")?),
        ));
        r
    }

    /// Adds or replaces an entry.
    pub fn register(&mut self, entry: KernelEntry) {
        self.entries.retain(|e| e.name != entry.name);
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&KernelEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name || e.aliases.contains(&name))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name).collect()
    }

    pub fn build(&self, name: &str, params: &BTreeMap<String, f64>) -> Result<KernelSpec> {
        let entry = self
            .get(name)
            .ok_or_else(|| TmmpError::Argument(format!("unknown kernel '{name}'")))?;
        for key in params.keys() {
            if entry.domain(key).is_none() {
                return Err(TmmpError::Argument(format!(
                    "kernel {} has no parameter '{key}'",
                    entry.name
                )));
            }
        }
        (entry.build)(params)
    }
}

/// A kernel whose parameters may name model parameters instead of literals.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTemplate {
    pub name: String,
    pub params: Vec<(String, ParamExpr)>,
}

impl fmt::Display for KernelTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        for (i, (k, v)) in self.params.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        f.write_str(")")
    }
}

impl KernelTemplate {
    pub fn new(name: impl Into<String>, params: Vec<(String, ParamExpr)>) -> Self {
        KernelTemplate {
            name: name.into(),
            params,
        }
    }

    pub fn fixed(kernel: &KernelSpec) -> Self {
        KernelTemplate {
            name: kernel.name().to_string(),
            params: kernel
                .params()
                .into_iter()
                .map(|(k, v)| (k.to_string(), ParamExpr::Value(v)))
                .collect(),
        }
    }

    /// Checks the family and parameter names against the registry, and the
    /// literal values against their domains.
    pub fn check(&self, registry: &KernelRegistry) -> Result<()> {
        let entry = registry
            .get(&self.name)
            .ok_or_else(|| TmmpError::Argument(format!("unknown kernel '{}'", self.name)))?;
        for (name, _) in entry.params {
            if !self.params.iter().any(|(k, _)| k == name) {
                return Err(TmmpError::Argument(format!(
                    "kernel {} is missing parameter '{name}'",
                    entry.name
                )));
            }
        }
        for (k, v) in &self.params {
            let domain = entry.domain(k).ok_or_else(|| {
                TmmpError::Argument(format!("kernel {} has no parameter '{k}'", entry.name))
            })?;
            if let ParamExpr::Value(x) = v {
                if !domain.contains(*x) {
                    return Err(TmmpError::ParameterDomain(format!("{}: {k}={x}", entry.name)));
                }
            }
        }
        Ok(())
    }

    /// Model parameters referenced by the template, with their domains.
    pub fn symbols(&self, registry: &KernelRegistry) -> Vec<(String, Domain)> {
        let entry = registry.get(&self.name);
        self.params
            .iter()
            .filter_map(|(k, v)| match v {
                ParamExpr::Symbol(s) => {
                    let domain = entry.and_then(|e| e.domain(k)).unwrap_or(Domain::Real);
                    Some((s.clone(), domain))
                }
                ParamExpr::Value(_) => None,
            })
            .collect()
    }

    pub fn build(&self, registry: &KernelRegistry, lookup: &dyn ParamLookup) -> Result<KernelSpec> {
        let mut values = BTreeMap::new();
        for (k, v) in &self.params {
            let x = match v {
                ParamExpr::Value(x) => *x,
                ParamExpr::Symbol(s) => lookup.param(s)?,
            };
            values.insert(k.clone(), x);
        }
        registry.build(&self.name, &values)
    }

    /// Label used in comparison tables.
    pub fn display_name(&self, registry: &KernelRegistry) -> String {
        registry
            .get(&self.name)
            .map(|e| e.display.to_string())
            .unwrap_or_else(|| self.name.clone())
    }
}

fn req(p: &BTreeMap<String, f64>, key: &str) -> Result<f64> {
    p.get(key)
        .copied()
        .ok_or_else(|| TmmpError::Argument(format!("missing kernel parameter '{key}'")))
}
