//! Estimation strategies: fixed values, vague and informative priors, and
//! nested hierarchical distributions over populations.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};
use statrs::function::erf::erfc;

use crate::error::{Result, TmmpError};
use crate::params::Domain;

/// Standard deviation of the vague normal prior on unbounded parameters.
pub const VAGUE_SD: f64 = 100.0;

/// Scale of the half-normal hyperprior on hierarchy standard deviations.
pub const HYPER_SD_SCALE: f64 = 1.0;

const DEGENERATE_TOL: f64 = 1e-12;

fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return if (x - mean).abs() <= DEGENERATE_TOL { 0.0 } else { f64::NEG_INFINITY };
    }
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * PI).ln()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_quantile(p: f64) -> f64 {
    StdNormal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

fn truncated_normal_log_pdf(x: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if !(x > lo && x < hi) {
        return f64::NEG_INFINITY;
    }
    if sd == 0.0 {
        return normal_log_pdf(x, mean, sd);
    }
    let mass = std_normal_cdf((hi - mean) / sd) - std_normal_cdf((lo - mean) / sd);
    normal_log_pdf(x, mean, sd) - mass.ln()
}

fn truncated_normal_quantile(p: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if sd == 0.0 {
        return mean.clamp(lo, hi);
    }
    let a = std_normal_cdf((lo - mean) / sd);
    let b = std_normal_cdf((hi - mean) / sd);
    (mean + sd * std_normal_quantile(a + p * (b - a))).clamp(lo, hi)
}

/// Proper and improper univariate priors.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Normal { mean: f64, sd: f64 },
    TruncatedNormal { mean: f64, sd: f64, lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    HalfNormal { scale: f64 },
    LogNormal { meanlog: f64, sdlog: f64 },
    /// Flat on the positive half-line; improper.
    FlatPositive,
}

impl Prior {
    pub fn check(&self) -> Result<()> {
        let ok = match *self {
            Prior::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            Prior::TruncatedNormal { mean, sd, lo, hi } => {
                mean.is_finite() && sd.is_finite() && sd >= 0.0 && lo < hi && !lo.is_nan() && !hi.is_nan()
            }
            Prior::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            Prior::HalfNormal { scale } => scale.is_finite() && scale > 0.0,
            Prior::LogNormal { meanlog, sdlog } => meanlog.is_finite() && sdlog.is_finite() && sdlog > 0.0,
            Prior::FlatPositive => true,
        };
        if ok {
            Ok(())
        } else {
            Err(TmmpError::ParameterDomain(format!("invalid prior {self}")))
        }
    }

    pub fn is_proper(&self) -> bool {
        !matches!(self, Prior::FlatPositive)
    }

    pub fn log_density(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NEG_INFINITY;
        }
        match *self {
            Prior::Normal { mean, sd } => normal_log_pdf(x, mean, sd),
            Prior::TruncatedNormal { mean, sd, lo, hi } => truncated_normal_log_pdf(x, mean, sd, lo, hi),
            Prior::Uniform { lo, hi } => {
                if x >= lo && x <= hi {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::HalfNormal { scale } => {
                if x >= 0.0 {
                    normal_log_pdf(x, 0.0, scale) + LN_2
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::LogNormal { meanlog, sdlog } => {
                if x > 0.0 {
                    normal_log_pdf(x.ln(), meanlog, sdlog) - x.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::FlatPositive => {
                if x > 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    /// Quantile function; the flat prior reports 1 for every level.
    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            Prior::Normal { mean, sd } => mean + sd * std_normal_quantile(p),
            Prior::TruncatedNormal { mean, sd, lo, hi } => truncated_normal_quantile(p, mean, sd, lo, hi),
            Prior::Uniform { lo, hi } => lo + p * (hi - lo),
            Prior::HalfNormal { scale } => scale * std_normal_quantile(0.5 + 0.5 * p),
            Prior::LogNormal { meanlog, sdlog } => (meanlog + sdlog * std_normal_quantile(p)).exp(),
            Prior::FlatPositive => 1.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, param: &str) -> Result<f64> {
        match *self {
            Prior::Normal { mean, sd } => {
                let z: f64 = rng.sample(StandardNormal);
                Ok(mean + sd * z)
            }
            Prior::FlatPositive => Err(TmmpError::RequiresBounds(param.to_string())),
            _ => {
                // open interval keeps inverse-cdf draws off the boundaries
                let u: f64 = rng.random_range(f64::EPSILON..1.0 - f64::EPSILON);
                Ok(self.quantile(u))
            }
        }
    }
}

impl fmt::Display for Prior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prior::Normal { mean, sd } => write!(f, "normal(mean={mean}, sd={sd})"),
            Prior::TruncatedNormal { mean, sd, lo, hi } => {
                write!(f, "truncated_normal(mean={mean}, sd={sd}, lo={lo}, hi={hi})")
            }
            Prior::Uniform { lo, hi } => write!(f, "uniform(lo={lo}, hi={hi})"),
            Prior::HalfNormal { scale } => write!(f, "half_normal(scale={scale})"),
            Prior::LogNormal { meanlog, sdlog } => write!(f, "lognormal(meanlog={meanlog}, sdlog={sdlog})"),
            Prior::FlatPositive => f.write_str("flat_positive"),
        }
    }
}

/// Concrete prior used for a `vague` binding.
pub fn vague_prior(domain: Domain, bounds: Option<(f64, f64)>) -> Prior {
    match (bounds, domain) {
        (Some((lo, hi)), _) => Prior::Uniform { lo, hi },
        (None, Domain::Interval(lo, hi)) => Prior::Uniform { lo, hi },
        (None, Domain::Real) => Prior::Normal {
            mean: 0.0,
            sd: VAGUE_SD,
        },
        (None, Domain::Positive | Domain::NonNegative) => Prior::FlatPositive,
    }
}

/// Distribution of population values around their group mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Normal,
    TruncatedNormal { lo: f64, hi: f64 },
}

impl Family {
    fn log_density(&self, x: f64, mean: f64, sd: f64) -> f64 {
        match *self {
            Family::Normal => normal_log_pdf(x, mean, sd),
            Family::TruncatedNormal { lo, hi } => truncated_normal_log_pdf(x, mean, sd, lo, hi),
        }
    }

    fn quantile(&self, p: f64, mean: f64, sd: f64) -> f64 {
        match *self {
            Family::Normal => mean + sd * std_normal_quantile(p),
            Family::TruncatedNormal { lo, hi } => truncated_normal_quantile(p, mean, sd, lo, hi),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Normal => f.write_str("normal"),
            Family::TruncatedNormal { lo, hi } => write!(f, "truncated_normal(lo={lo}, hi={hi})"),
        }
    }
}

/// Scale on which a hierarchy acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HierarchyScale {
    Identity,
    Log,
    Logit,
}

impl HierarchyScale {
    pub fn name(&self) -> &'static str {
        match self {
            HierarchyScale::Identity => "identity",
            HierarchyScale::Log => "log",
            HierarchyScale::Logit => "logit",
        }
    }

    fn forward(&self, x: f64) -> f64 {
        match self {
            HierarchyScale::Identity => x,
            HierarchyScale::Log => x.ln(),
            HierarchyScale::Logit => (x / (1.0 - x)).ln(),
        }
    }

    fn inverse(&self, w: f64) -> f64 {
        match self {
            HierarchyScale::Identity => w,
            HierarchyScale::Log => w.exp(),
            HierarchyScale::Logit => 1.0 / (1.0 + (-w).exp()),
        }
    }

    /// `log |d forward / dx|`.
    fn log_jacobian(&self, x: f64) -> f64 {
        match self {
            HierarchyScale::Identity => 0.0,
            HierarchyScale::Log => -x.ln(),
            HierarchyScale::Logit => -(x * (1.0 - x)).ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchySpec {
    pub family: Family,
    pub levels: usize,
    /// Free-text description or file reference for the grouping table.
    pub groupings: String,
    pub scale: HierarchyScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiplierScale {
    Variance,
    Sd,
}

/// `sigma_c = sigma_w (1 + lambda_c)` with `lambda_c ~ TN_(lo, hi)(0, sigma_lambda^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplicativeSpec {
    pub lo: f64,
    pub hi: f64,
    /// Whether the bound parameter is `sigma_c^2` or `sigma_c`.
    pub scale: MultiplierScale,
    pub sigma_w: Option<f64>,
    pub sigma_lambda: Option<f64>,
}

impl Default for MultiplicativeSpec {
    fn default() -> Self {
        MultiplicativeSpec {
            lo: -1.0,
            hi: 2.0,
            scale: MultiplierScale::Variance,
            sigma_w: None,
            sigma_lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EstimationStrategy {
    Fixed(f64),
    Vague(Option<(f64, f64)>),
    Informative(Prior),
    Hierarchical(HierarchySpec),
    MultiplicativeTn(MultiplicativeSpec),
}

impl fmt::Display for EstimationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimationStrategy::Fixed(v) => write!(f, "fixed({v})"),
            EstimationStrategy::Vague(None) => f.write_str("vague"),
            EstimationStrategy::Vague(Some((lo, hi))) => write!(f, "vague(lo={lo}, hi={hi})"),
            EstimationStrategy::Informative(p) => write!(f, "{p}"),
            EstimationStrategy::Hierarchical(h) => write!(
                f,
                "hierarchical(pi={}, levels={}, groupings={:?}, scale={})",
                h.family,
                h.levels,
                h.groupings,
                h.scale.name()
            ),
            EstimationStrategy::MultiplicativeTn(m) => {
                write!(
                    f,
                    "multiplicative_tn(lo={}, hi={}, scale={}",
                    m.lo,
                    m.hi,
                    match m.scale {
                        MultiplierScale::Variance => "variance",
                        MultiplierScale::Sd => "sd",
                    }
                )?;
                if let Some(s) = m.sigma_w {
                    write!(f, ", sigma_w={s}")?;
                }
                if let Some(s) = m.sigma_lambda {
                    write!(f, ", sigma_lambda={s}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Population-to-group table, one column per level above populations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Groupings {
    pub columns: Vec<String>,
    pub rows: BTreeMap<String, Vec<String>>,
}

impl Groupings {
    pub fn new(columns: Vec<String>) -> Self {
        Groupings {
            columns,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, population: &str, groups: Vec<String>) {
        self.rows.insert(population.to_string(), groups);
    }

    /// Indexes the first `n_levels` columns for `populations`, checking that
    /// the table is total and nested.
    pub fn index(&self, populations: &[String], n_levels: usize) -> Result<GroupIndex> {
        if n_levels > self.columns.len() {
            return Err(TmmpError::Grouping {
                population: populations.first().cloned().unwrap_or_default(),
                reason: format!("{n_levels} grouping levels needed, table has {}", self.columns.len()),
            });
        }
        let mut levels: Vec<GroupLevel> = Vec::with_capacity(n_levels);
        // child labels at the level below, starting with populations
        let mut child_names: Vec<String> = populations.to_vec();
        let mut child_witness: Vec<String> = populations.to_vec();
        for l in 0..n_levels {
            let mut names: Vec<String> = Vec::new();
            let mut parent = vec![usize::MAX; child_names.len()];
            let mut witness: Vec<String> = Vec::new();
            for (pop_idx, pop) in populations.iter().enumerate() {
                let row = self.rows.get(pop).ok_or_else(|| TmmpError::Grouping {
                    population: pop.clone(),
                    reason: "population missing from grouping table".into(),
                })?;
                let group = row.get(l).filter(|g| !g.is_empty()).ok_or_else(|| TmmpError::Grouping {
                    population: pop.clone(),
                    reason: format!("no group at level {}", l + 1),
                })?;
                let g = match names.iter().position(|n| n == group) {
                    Some(g) => g,
                    None => {
                        names.push(group.clone());
                        witness.push(pop.clone());
                        names.len() - 1
                    }
                };
                let child = if l == 0 {
                    pop_idx
                } else {
                    let below = &row[l - 1];
                    child_names.iter().position(|n| n == below).expect("indexed at previous level")
                };
                if parent[child] != usize::MAX && parent[child] != g {
                    return Err(TmmpError::Grouping {
                        population: pop.clone(),
                        reason: format!(
                            "group '{}' belongs to both '{}' and '{}' (also via {})",
                            child_names[child], names[parent[child]], group, child_witness[child]
                        ),
                    });
                }
                parent[child] = g;
            }
            levels.push(GroupLevel {
                names: names.clone(),
                parent,
            });
            child_names = names;
            child_witness = witness;
        }
        Ok(GroupIndex { levels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupLevel {
    pub names: Vec<String>,
    /// Group index of each member of the level below.
    pub parent: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupIndex {
    /// `levels[0]` groups populations; each further level groups the previous one.
    pub levels: Vec<GroupLevel>,
}

/// A hyperparameter introduced by a strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperDecl {
    pub name: String,
    pub domain: Domain,
    pub prior: Prior,
}

fn hyper_sd_prior() -> Prior {
    Prior::HalfNormal { scale: HYPER_SD_SCALE }
}

/// Hyperparameter layout of a hierarchy:
/// `[mu_world, top-level group means, ..., level-1 group means, sd_1, ..., sd_L]`.
fn hierarchy_offsets(levels: usize, groups: &GroupIndex) -> (Vec<usize>, usize) {
    // starting offset of each grouping level's means, indexed like `groups.levels`
    let mut starts = vec![0; levels - 1];
    let mut pos = 1;
    for l in (0..levels - 1).rev() {
        starts[l] = pos;
        pos += groups.levels[l].names.len();
    }
    (starts, pos)
}

/// Values per population when a hierarchical parameter also varies by time
/// (population-major layout).
fn values_per_population(n: usize, levels: usize, groups: &GroupIndex) -> usize {
    if levels == 1 {
        return 1;
    }
    (n / groups.levels[0].parent.len().max(1)).max(1)
}

impl EstimationStrategy {
    /// Number of grouping levels this strategy needs.
    pub fn grouping_levels(&self) -> usize {
        match self {
            EstimationStrategy::Hierarchical(h) => h.levels.saturating_sub(1),
            _ => 0,
        }
    }

    pub fn check(&self, param: &str, domain: Domain) -> Result<()> {
        match self {
            EstimationStrategy::Fixed(v) => {
                if !domain.contains(*v) {
                    return Err(TmmpError::ParameterDomain(format!("fixed value {v} outside the domain of {param}")));
                }
            }
            EstimationStrategy::Vague(Some((lo, hi))) => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(TmmpError::ParameterDomain(format!("vague bounds ({lo}, {hi}) for {param}")));
                }
            }
            EstimationStrategy::Vague(None) => {}
            EstimationStrategy::Informative(p) => p.check()?,
            EstimationStrategy::Hierarchical(h) => {
                if h.levels == 0 {
                    return Err(TmmpError::ParameterDomain(format!("{param}: hierarchy needs levels >= 1")));
                }
                let ok = match h.scale {
                    HierarchyScale::Identity => true,
                    HierarchyScale::Log => matches!(domain, Domain::Positive | Domain::NonNegative),
                    HierarchyScale::Logit => matches!(domain, Domain::Interval(lo, hi) if lo >= 0.0 && hi <= 1.0),
                };
                if !ok {
                    return Err(TmmpError::ParameterDomain(format!(
                        "{param}: scale={} does not fit its domain",
                        h.scale.name()
                    )));
                }
            }
            EstimationStrategy::MultiplicativeTn(m) => {
                if !(m.lo >= -1.0 && m.lo < m.hi) {
                    return Err(TmmpError::ParameterDomain(format!(
                        "{param}: multiplier bounds ({}, {}) must satisfy -1 <= lo < hi",
                        m.lo, m.hi
                    )));
                }
                for s in [m.sigma_w, m.sigma_lambda].into_iter().flatten() {
                    if !(s.is_finite() && s > 0.0) {
                        return Err(TmmpError::ParameterDomain(format!("{param}: scales must be > 0, got {s}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Hyperparameters in the order `log_prior` expects them.
    pub fn hyper_decls(&self, param: &str, groups: &GroupIndex) -> Result<Vec<HyperDecl>> {
        match self {
            EstimationStrategy::Hierarchical(h) => {
                if groups.levels.len() < h.levels - 1 {
                    return Err(TmmpError::Grouping {
                        population: String::new(),
                        reason: format!("{param} needs {} grouping levels", h.levels - 1),
                    });
                }
                let mut out = vec![HyperDecl {
                    name: format!("{param}:mu[world]"),
                    domain: Domain::Real,
                    prior: Prior::Normal {
                        mean: 0.0,
                        sd: VAGUE_SD,
                    },
                }];
                for l in (0..h.levels - 1).rev() {
                    for g in &groups.levels[l].names {
                        out.push(HyperDecl {
                            name: format!("{param}:mu[{g}]"),
                            domain: Domain::Real,
                            prior: Prior::Normal {
                                mean: 0.0,
                                sd: VAGUE_SD,
                            },
                        });
                    }
                }
                for l in 1..=h.levels {
                    out.push(HyperDecl {
                        name: format!("{param}:sd[{l}]"),
                        domain: Domain::Positive,
                        prior: hyper_sd_prior(),
                    });
                }
                Ok(out)
            }
            EstimationStrategy::MultiplicativeTn(m) => {
                let mut out = Vec::new();
                if m.sigma_w.is_none() {
                    out.push(HyperDecl {
                        name: format!("{param}:sigma_w"),
                        domain: Domain::Positive,
                        prior: hyper_sd_prior(),
                    });
                }
                if m.sigma_lambda.is_none() {
                    out.push(HyperDecl {
                        name: format!("{param}:sigma_lambda"),
                        domain: Domain::Positive,
                        prior: hyper_sd_prior(),
                    });
                }
                Ok(out)
            }
            _ => Ok(Vec::new()),
        }
    }

    /// Log-density of the hyperparameters under their own priors. Group means
    /// are covered by [`log_prior`](Self::log_prior) and excluded here.
    pub fn log_hyperprior(&self, param: &str, hyper: &[f64], groups: &GroupIndex) -> Result<f64> {
        let decls = self.hyper_decls(param, groups)?;
        Ok(decls
            .iter()
            .zip(hyper)
            .filter(|(d, _)| !is_group_mean(&d.name))
            .map(|(d, x)| d.prior.log_density(*x))
            .sum())
    }

    /// Joint log-density of `values` (one per population, or per cell for
    /// non-hierarchical strategies) and any group means in `hyper`.
    pub fn log_prior(
        &self,
        param: &str,
        domain: Domain,
        values: &[f64],
        hyper: &[f64],
        groups: &GroupIndex,
    ) -> Result<f64> {
        let outside = values.iter().any(|v| !domain.contains(*v));
        match self {
            EstimationStrategy::Fixed(v) => Ok(if values.iter().all(|x| (x - v).abs() <= DEGENERATE_TOL) {
                0.0
            } else {
                f64::NEG_INFINITY
            }),
            EstimationStrategy::Vague(bounds) => {
                if outside {
                    return Ok(f64::NEG_INFINITY);
                }
                let p = vague_prior(domain, *bounds);
                Ok(values.iter().map(|v| p.log_density(*v)).sum())
            }
            EstimationStrategy::Informative(p) => {
                if outside {
                    return Ok(f64::NEG_INFINITY);
                }
                Ok(values.iter().map(|v| p.log_density(*v)).sum())
            }
            EstimationStrategy::Hierarchical(h) => {
                if outside {
                    return Ok(f64::NEG_INFINITY);
                }
                let levels = h.levels;
                let n_hyper = self.hyper_decls(param, groups)?.len();
                if hyper.len() != n_hyper {
                    return Err(TmmpError::Size(format!(
                        "{param}: {} hyperparameters, expected {n_hyper}",
                        hyper.len()
                    )));
                }
                let (starts, sd_start) = hierarchy_offsets(levels, groups);
                let sds = &hyper[sd_start..];
                if sds.iter().any(|s| !(*s >= 0.0)) {
                    return Ok(f64::NEG_INFINITY);
                }
                let mean_of = |l: usize, g: usize| -> f64 {
                    // mean of group g at grouping level l; l == levels - 1 is the world
                    if l == levels - 1 {
                        hyper[0]
                    } else {
                        hyper[starts[l] + g]
                    }
                };
                let per = values_per_population(values.len(), levels, groups);
                let mut lp = 0.0;
                for (c, x) in values.iter().enumerate() {
                    let parent = if levels == 1 { 0 } else { groups.levels[0].parent[c / per] };
                    let w = h.scale.forward(*x);
                    lp += h.family.log_density(w, mean_of(0, parent), sds[0]) + h.scale.log_jacobian(*x);
                }
                for l in 0..levels - 1 {
                    for g in 0..groups.levels[l].names.len() {
                        let up = if l + 1 == levels - 1 { 0 } else { groups.levels[l + 1].parent[g] };
                        lp += normal_log_pdf(mean_of(l, g), mean_of(l + 1, up), sds[l + 1]);
                    }
                }
                Ok(lp)
            }
            EstimationStrategy::MultiplicativeTn(m) => {
                if outside || values.iter().any(|v| *v <= 0.0) {
                    return Ok(f64::NEG_INFINITY);
                }
                let (sigma_w, sigma_lambda) = multiplicative_scales(m, hyper);
                if !(sigma_w > 0.0 && sigma_lambda >= 0.0) {
                    return Ok(f64::NEG_INFINITY);
                }
                let mut lp = 0.0;
                for x in values {
                    let (s, log_ds) = match m.scale {
                        MultiplierScale::Variance => (x.sqrt(), -(2.0 * x.sqrt()).ln()),
                        MultiplierScale::Sd => (*x, 0.0),
                    };
                    let lambda = s / sigma_w - 1.0;
                    lp += truncated_normal_log_pdf(lambda, 0.0, sigma_lambda, m.lo, m.hi) - sigma_w.ln() + log_ds;
                }
                Ok(lp)
            }
        }
    }

    /// Draws `n` values (and the hyperparameters used) top-down through the
    /// strategy. Hyperparameters are drawn from their priors unless given.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        param: &str,
        domain: Domain,
        n: usize,
        groups: &GroupIndex,
        hyper: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            EstimationStrategy::Fixed(v) => Ok((vec![*v; n], Vec::new())),
            EstimationStrategy::Vague(bounds) => {
                let p = vague_prior(domain, *bounds);
                let values = (0..n).map(|_| p.sample(rng, param)).collect::<Result<_>>()?;
                Ok((values, Vec::new()))
            }
            EstimationStrategy::Informative(p) => {
                let values = (0..n).map(|_| p.sample(rng, param)).collect::<Result<_>>()?;
                Ok((values, Vec::new()))
            }
            EstimationStrategy::Hierarchical(h) => {
                let decls = self.hyper_decls(param, groups)?;
                let levels = h.levels;
                let (starts, sd_start) = hierarchy_offsets(levels, groups);
                let hyper = match hyper {
                    Some(x) => x.to_vec(),
                    None => {
                        let mut x = vec![0.0; decls.len()];
                        x[0] = decls[0].prior.sample(rng, param)?;
                        for l in sd_start..decls.len() {
                            x[l] = decls[l].prior.sample(rng, param)?;
                        }
                        for l in (0..levels - 1).rev() {
                            for g in 0..groups.levels[l].names.len() {
                                let parent = if l + 1 == levels - 1 {
                                    x[0]
                                } else {
                                    x[starts[l + 1] + groups.levels[l + 1].parent[g]]
                                };
                                let z: f64 = rng.sample(StandardNormal);
                                x[starts[l] + g] = parent + x[sd_start + l + 1] * z;
                            }
                        }
                        x
                    }
                };
                let sd = hyper[sd_start];
                let per = values_per_population(n, levels, groups);
                let values = (0..n)
                    .map(|c| {
                        let mean = if levels == 1 {
                            hyper[0]
                        } else {
                            hyper[starts[0] + groups.levels[0].parent[c / per]]
                        };
                        let u: f64 = rng.random_range(f64::EPSILON..1.0 - f64::EPSILON);
                        h.scale.inverse(h.family.quantile(u, mean, sd))
                    })
                    .collect();
                Ok((values, hyper))
            }
            EstimationStrategy::MultiplicativeTn(m) => {
                let decls = self.hyper_decls(param, groups)?;
                let hyper = match hyper {
                    Some(x) => x.to_vec(),
                    None => decls.iter().map(|d| d.prior.sample(rng, param)).collect::<Result<_>>()?,
                };
                let (sigma_w, sigma_lambda) = multiplicative_scales(m, &hyper);
                let values = (0..n)
                    .map(|_| {
                        let u: f64 = rng.random_range(f64::EPSILON..1.0 - f64::EPSILON);
                        let lambda = truncated_normal_quantile(u, 0.0, sigma_lambda, m.lo, m.hi);
                        let s = sigma_w * (1.0 + lambda);
                        match m.scale {
                            MultiplierScale::Variance => s * s,
                            MultiplierScale::Sd => s,
                        }
                    })
                    .collect();
                Ok((values, hyper))
            }
        }
    }

    /// Deterministic starting point at prior medians.
    pub fn initial(&self, param: &str, domain: Domain, n: usize, groups: &GroupIndex) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            EstimationStrategy::Fixed(v) => Ok((vec![*v; n], Vec::new())),
            EstimationStrategy::Vague(bounds) => Ok((vec![vague_prior(domain, *bounds).median(); n], Vec::new())),
            EstimationStrategy::Informative(p) => Ok((vec![p.median(); n], Vec::new())),
            EstimationStrategy::Hierarchical(h) => {
                let decls = self.hyper_decls(param, groups)?;
                let hyper: Vec<f64> = decls
                    .iter()
                    .map(|d| if is_group_mean(&d.name) { 0.0 } else { d.prior.median() })
                    .collect();
                let (_, sd_start) = hierarchy_offsets(h.levels, groups);
                let v = h.scale.inverse(h.family.quantile(0.5, 0.0, hyper[sd_start]));
                Ok((vec![v; n], hyper))
            }
            EstimationStrategy::MultiplicativeTn(m) => {
                let decls = self.hyper_decls(param, groups)?;
                let hyper: Vec<f64> = decls.iter().map(|d| d.prior.median()).collect();
                let (sigma_w, sigma_lambda) = multiplicative_scales(m, &hyper);
                let s = sigma_w * (1.0 + truncated_normal_quantile(0.5, 0.0, sigma_lambda, m.lo, m.hi));
                let v = match m.scale {
                    MultiplierScale::Variance => s * s,
                    MultiplierScale::Sd => s,
                };
                Ok((vec![v; n], hyper))
            }
        }
    }
}

fn is_group_mean(name: &str) -> bool {
    name.contains(":mu[") && !name.ends_with(":mu[world]")
}

fn multiplicative_scales(m: &MultiplicativeSpec, hyper: &[f64]) -> (f64, f64) {
    let mut it = hyper.iter().copied();
    let sigma_w = m.sigma_w.unwrap_or_else(|| it.next().unwrap_or(f64::NAN));
    let sigma_lambda = m.sigma_lambda.unwrap_or_else(|| it.next().unwrap_or(f64::NAN));
    (sigma_w, sigma_lambda)
}
