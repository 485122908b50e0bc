//! Adaptive Metropolis-within-Gibbs.
//!
//! Each iteration updates every free scalar (parameter entries and
//! hyperparameters) one at a time, then the smoother of every population.
//! When the data are Gaussian on the link scale and `g3` is not recursive the
//! smoother is integrated out of the scalar updates and then drawn exactly
//! from its Gaussian full conditional; otherwise smoother blocks take
//! prior-preconditioned random-walk steps. Scalars move by random walk on an
//! unconstrained scale. Step sizes adapt during warmup only.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::conjugate::condition_gamma;
use super::{
    check_bindings, diagnose, group_indices, pack_values, parameter_decls, scalar_count, scalar_label, stream_rng,
    Bindings, FitConfig, FitMethod, FitResult, ScalarTrace,
};
use crate::datamodel::{gaussian_log_pdf, DataModelSpec, Observation, SourceTerms};
use crate::error::{Result, TmmpError};
use crate::hierarchy::{EstimationStrategy, GroupIndex, Groupings};
use crate::linalg;
use crate::params::{Domain, ParamDecl, ParamSet, ParamValue, Scope};
use crate::process::{FittedDraw, ProcessModel};
use crate::smoothing::SmootherLayout;

const ADAPT_BATCH: usize = 25;
const TARGET_SCALAR: f64 = 0.44;
const TARGET_BLOCK: f64 = 0.23;

struct ParamInfo {
    decl: ParamDecl,
    strategy: EstimationStrategy,
    groups: GroupIndex,
    /// Only the smoother density depends on it.
    kernel: bool,
}

#[derive(Clone, Copy)]
enum Slot {
    Value(usize),
    Hyper(usize),
}

struct Scalar {
    info: usize,
    slot: Slot,
    label: String,
    domain: Domain,
}

struct PopObs {
    t: usize,
    y: f64,
    s2: f64,
    terms: SourceTerms,
}

struct Setup<'a> {
    model: &'a ProcessModel,
    dm: &'a DataModelSpec,
    layout: SmootherLayout,
    infos: Vec<ParamInfo>,
    scalars: Vec<Scalar>,
    obs: Vec<Vec<PopObs>>,
    collapsed: bool,
    link_scale: bool,
}

/// Unconstrained working value of `x`.
fn to_working(domain: Domain, x: f64) -> f64 {
    match domain {
        Domain::Real => x,
        Domain::Positive | Domain::NonNegative => x.ln(),
        Domain::Interval(lo, hi) => {
            let p = (x - lo) / (hi - lo);
            (p / (1.0 - p)).ln()
        }
    }
}

fn from_working(domain: Domain, u: f64) -> f64 {
    match domain {
        Domain::Real => u,
        Domain::Positive | Domain::NonNegative => u.exp(),
        Domain::Interval(lo, hi) => lo + (hi - lo) / (1.0 + (-u).exp()),
    }
}

/// `log |dx/du|` at `x`.
fn log_jacobian(domain: Domain, x: f64) -> f64 {
    match domain {
        Domain::Real => 0.0,
        Domain::Positive | Domain::NonNegative => x.ln(),
        Domain::Interval(lo, hi) => {
            let p = (x - lo) / (hi - lo);
            (hi - lo).ln() + p.ln() + (1.0 - p).ln()
        }
    }
}

fn flat_values(params: &ParamSet, name: &str) -> Vec<f64> {
    match params.value(name) {
        Some(ParamValue::Shared(v)) => vec![*v],
        Some(ParamValue::PerPopulation(v)) => v.clone(),
        Some(ParamValue::PerCell(rows)) => rows.iter().flatten().copied().collect(),
        None => Vec::new(),
    }
}

fn set_value(params: &mut ParamSet, name: &str, j: usize, x: f64) {
    match params.value_mut(name) {
        Some(ParamValue::Shared(v)) => *v = x,
        Some(ParamValue::PerPopulation(v)) => v[j] = x,
        Some(ParamValue::PerCell(rows)) => {
            let n_t = rows[0].len();
            rows[j / n_t][j % n_t] = x;
        }
        None => {}
    }
}

impl Setup<'_> {
    fn n_pops(&self) -> usize {
        self.model.grid.n_populations()
    }

    fn affected(&self, scope: Scope, j: usize) -> Vec<usize> {
        match scope {
            Scope::Shared => (0..self.n_pops()).collect(),
            Scope::PerPopulation => vec![j],
            Scope::PerCell => vec![j / self.model.grid.n_times()],
        }
    }

    fn prior_term(&self, i: usize, params: &ParamSet, hyper: &[f64]) -> Result<f64> {
        let info = &self.infos[i];
        let name = &info.decl.name;
        let values = flat_values(params, name);
        let lp = info.strategy.log_prior(name, info.decl.domain, &values, hyper, &info.groups)?;
        let lh = info.strategy.log_hyperprior(name, hyper, &info.groups)?;
        Ok(lp + lh)
    }

    fn pop_lik(&self, params: &ParamSet, c: usize, gamma: &DVector<f64>) -> Result<f64> {
        let eps = &self.layout.design * gamma;
        let (level, eta) = self.model.eta_path(params, c, &self.model.grid.times, eps.as_slice())?;
        let mut ll = 0.0;
        for o in &self.obs[c] {
            let mean = if self.link_scale {
                level[o.t]
            } else {
                self.dm.transformation.apply(eta[o.t])
            };
            let b = params.resolve(&o.terms.bias, c, None)?;
            let w = params.resolve(&o.terms.nonsampling_variance, c, None)?;
            ll += gaussian_log_pdf(o.y, mean + b, o.s2 + w);
        }
        Ok(ll)
    }

    fn diff_cov(&self, params: &ParamSet, c: usize) -> Result<nalgebra::DMatrix<f64>> {
        let kernel = self.model.kernel_for(params, c)?;
        kernel.gram_matrix(&self.layout.diff_positions)
    }

    fn pop_smooth(&self, params: &ParamSet, c: usize, gamma: &DVector<f64>) -> Result<f64> {
        let kernel = self.model.kernel_for(params, c)?;
        let s = kernel.gram_matrix(&self.layout.diff_positions)?;
        let chol = linalg::jittered_cholesky(&s, kernel.variance(), "smoother covariance")?;
        Ok(linalg::mvn_log_density(gamma, &chol))
    }

    /// `log p(y_c | params)` with `gamma_c` integrated out.
    fn pop_marginal(&self, params: &ParamSet, c: usize) -> Result<f64> {
        let obs = &self.obs[c];
        if obs.is_empty() {
            return Ok(0.0);
        }
        let mean_level = self.model.mean_level(params, c, &self.model.grid.times)?;
        let s = self.diff_cov(params, c)?;
        let h = nalgebra::DMatrix::from_fn(obs.len(), self.layout.n_free(), |i, k| self.layout.design[(obs[i].t, k)]);
        let mut a = &h * s * h.transpose();
        let mut resid = DVector::zeros(obs.len());
        for (i, o) in obs.iter().enumerate() {
            let b = params.resolve(&o.terms.bias, c, None)?;
            let w = params.resolve(&o.terms.nonsampling_variance, c, None)?;
            resid[i] = o.y - mean_level[o.t] - b;
            a[(i, i)] += o.s2 + w;
        }
        let scale = a.diagonal().mean();
        let chol = linalg::jittered_cholesky(&a, scale, "marginal covariance")?;
        Ok(linalg::mvn_log_density(&resid, &chol))
    }

    /// Exact draw of `gamma_c` from its Gaussian full conditional.
    fn gibbs_gamma(&self, params: &ParamSet, c: usize, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        let mean_level = self.model.mean_level(params, c, &self.model.grid.times)?;
        let mut obs = Vec::with_capacity(self.obs[c].len());
        for o in &self.obs[c] {
            let b = params.resolve(&o.terms.bias, c, None)?;
            let w = params.resolve(&o.terms.nonsampling_variance, c, None)?;
            obs.push((o.t, o.y - mean_level[o.t] - b, o.s2 + w));
        }
        let s = self.diff_cov(params, c)?;
        let (mean, cov) = condition_gamma(&self.layout.design, &s, &obs)?;
        let l = linalg::covariance_factor(&cov, "smoother full conditional")?;
        Ok(mean + linalg::sample_correlated(&l, rng))
    }
}

struct Adapter {
    log_step: f64,
    tried: usize,
    accepted: usize,
    batches: usize,
    post_tried: usize,
    post_accepted: usize,
}

impl Adapter {
    fn new(step: f64) -> Self {
        Adapter {
            log_step: step.ln(),
            tried: 0,
            accepted: 0,
            batches: 0,
            post_tried: 0,
            post_accepted: 0,
        }
    }

    fn step(&self) -> f64 {
        self.log_step.exp()
    }

    fn record(&mut self, accepted: bool, warmup: bool) {
        if warmup {
            self.tried += 1;
            self.accepted += accepted as usize;
        } else {
            self.post_tried += 1;
            self.post_accepted += accepted as usize;
        }
    }

    fn adapt(&mut self, target: f64) {
        if self.tried == 0 {
            return;
        }
        self.batches += 1;
        let rate = self.accepted as f64 / self.tried as f64;
        self.log_step += (rate - target) * 3.0 / (self.batches as f64).sqrt();
        self.log_step = self.log_step.clamp(-20.0, 5.0);
        self.tried = 0;
        self.accepted = 0;
    }

    fn acceptance(&self) -> f64 {
        if self.post_tried == 0 {
            f64::NAN
        } else {
            self.post_accepted as f64 / self.post_tried as f64
        }
    }
}

struct ChainOutput {
    traces: Vec<Vec<f64>>,
    draws: Vec<FittedDraw>,
    eta: Vec<nalgebra::DMatrix<f64>>,
    acceptance: Vec<f64>,
}

struct ChainState {
    params: ParamSet,
    hyper: Vec<Vec<f64>>,
    gammas: Vec<DVector<f64>>,
    lik: Vec<f64>,
    smooth: Vec<f64>,
    prior: Vec<f64>,
}

fn accept(rng: &mut ChaCha8Rng, log_ratio: f64) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

fn initial_state(setup: &Setup<'_>) -> Result<ChainState> {
    let grid = &setup.model.grid;
    let mut params = ParamSet::new();
    let mut hyper = Vec::with_capacity(setup.infos.len());
    for info in &setup.infos {
        let n = scalar_count(info.decl.scope, grid);
        let (values, h) = info.strategy.initial(&info.decl.name, info.decl.domain, n, &info.groups)?;
        params.insert(info.decl.name.clone(), pack_values(info.decl.scope, grid, &values));
        hyper.push(h);
    }
    let k_free = setup.layout.n_free();
    let gammas = vec![DVector::zeros(k_free); setup.n_pops()];
    let mut prior = Vec::with_capacity(setup.infos.len());
    for (i, info) in setup.infos.iter().enumerate() {
        let lp = setup.prior_term(i, &params, &hyper[i])?;
        if !lp.is_finite() {
            return Err(TmmpError::Initialization(format!("prior of {}", info.decl.name)));
        }
        prior.push(lp);
    }
    let mut lik = Vec::with_capacity(setup.n_pops());
    let mut smooth = Vec::with_capacity(setup.n_pops());
    for c in 0..setup.n_pops() {
        let pop = &grid.populations[c];
        let l = if setup.collapsed {
            setup.pop_marginal(&params, c)
        } else {
            setup.pop_lik(&params, c, &gammas[c])
        }
            .map_err(|e| TmmpError::Initialization(format!("likelihood of population {pop}: {e}")))?;
        let s = setup
            .pop_smooth(&params, c, &gammas[c])
            .map_err(|e| TmmpError::Initialization(format!("smoother of population {pop}: {e}")))?;
        if !l.is_finite() {
            return Err(TmmpError::Initialization(format!("likelihood of population {pop}")));
        }
        if !s.is_finite() {
            return Err(TmmpError::Initialization(format!("smoother of population {pop}")));
        }
        lik.push(l);
        smooth.push(s);
    }
    Ok(ChainState {
        params,
        hyper,
        gammas,
        lik,
        smooth,
        prior,
    })
}

fn run_chain(setup: &Setup<'_>, chain: usize, config: &FitConfig) -> Result<ChainOutput> {
    let mut rng = stream_rng(config.seed, chain as u64);
    let mut st = initial_state(setup)?;
    let n_pops = setup.n_pops();
    let k_free = setup.layout.n_free().max(1);
    let mut block_adapt: Vec<Adapter> = (0..n_pops).map(|_| Adapter::new(2.38 / (k_free as f64).sqrt())).collect();
    let mut scalar_adapt: Vec<Adapter> = setup.scalars.iter().map(|_| Adapter::new(0.5)).collect();
    let mut traces = vec![Vec::with_capacity(config.iterations); setup.scalars.len()];
    let mut draws = Vec::with_capacity(config.iterations);
    let total = config.warmup + config.iterations;

    for it in 0..total {
        let warm = it < config.warmup;
        for (si, sc) in setup.scalars.iter().enumerate() {
            let ok = update_scalar(setup, &mut st, sc, scalar_adapt[si].step(), &mut rng);
            scalar_adapt[si].record(ok, warm);
        }

        for c in 0..n_pops {
            if setup.collapsed {
                st.gammas[c] = setup.gibbs_gamma(&st.params, c, &mut rng)?;
            } else {
                let s = setup.diff_cov(&st.params, c)?;
                let l = linalg::covariance_factor(&s, "smoother covariance")?;
                let prop = &st.gammas[c] + linalg::sample_correlated(&l, &mut rng) * block_adapt[c].step();
                let terms = setup
                    .pop_lik(&st.params, c, &prop)
                    .and_then(|l| Ok((l, setup.pop_smooth(&st.params, c, &prop)?)));
                let ok = match terms {
                    Ok((l, s)) => {
                        let ratio = l + s - st.lik[c] - st.smooth[c];
                        if accept(&mut rng, ratio) {
                            st.lik[c] = l;
                            st.smooth[c] = s;
                            st.gammas[c] = prop;
                            true
                        } else {
                            false
                        }
                    }
                    Err(_) => false,
                };
                block_adapt[c].record(ok, warm);
            }
        }

        if warm && (it + 1) % ADAPT_BATCH == 0 {
            for a in &mut block_adapt {
                a.adapt(TARGET_BLOCK);
            }
            for a in &mut scalar_adapt {
                a.adapt(TARGET_SCALAR);
            }
        }

        if !warm {
            for (si, sc) in setup.scalars.iter().enumerate() {
                let info = &setup.infos[sc.info];
                let v = match sc.slot {
                    Slot::Value(j) => flat_values(&st.params, &info.decl.name)[j],
                    Slot::Hyper(h) => st.hyper[sc.info][h],
                };
                traces[si].push(v);
            }
            let deltas = st.gammas.iter().map(|g| &setup.layout.reconstruction * g).collect();
            draws.push(FittedDraw {
                params: st.params.clone(),
                deltas,
            });
        }
    }

    let eta = draws
        .iter()
        .map(|d: &FittedDraw| {
            let eps: Vec<DVector<f64>> = d.deltas.iter().map(|delta| &setup.layout.b * delta).collect();
            setup.model.evaluate_eta(&d.params, &eps)
        })
        .collect::<Result<_>>()?;
    Ok(ChainOutput {
        traces,
        draws,
        eta,
        acceptance: scalar_adapt.iter().map(|a| a.acceptance()).collect(),
    })
}

/// One random-walk update of a scalar; returns whether it moved.
fn update_scalar(setup: &Setup<'_>, st: &mut ChainState, sc: &Scalar, step: f64, rng: &mut ChaCha8Rng) -> bool {
    let info = &setup.infos[sc.info];
    let name = &info.decl.name;
    let old = match sc.slot {
        Slot::Value(j) => flat_values(&st.params, name)[j],
        Slot::Hyper(h) => st.hyper[sc.info][h],
    };
    let z: f64 = rng.sample(StandardNormal);
    let new = from_working(sc.domain, to_working(sc.domain, old) + step * z);
    if !sc.domain.contains(new) {
        return false;
    }
    let jac = log_jacobian(sc.domain, new) - log_jacobian(sc.domain, old);
    match sc.slot {
        Slot::Hyper(h) => {
            st.hyper[sc.info][h] = new;
            let proposal = setup.prior_term(sc.info, &st.params, &st.hyper[sc.info]);
            match proposal {
                Ok(p) if accept(rng, p - st.prior[sc.info] + jac) => {
                    st.prior[sc.info] = p;
                    true
                }
                _ => {
                    st.hyper[sc.info][h] = old;
                    false
                }
            }
        }
        Slot::Value(j) => {
            set_value(&mut st.params, name, j, new);
            let pops = setup.affected(info.decl.scope, j);
            let evaluated = (|| -> Result<(f64, Vec<f64>)> {
                let p = setup.prior_term(sc.info, &st.params, &st.hyper[sc.info])?;
                let mut terms = Vec::with_capacity(pops.len());
                for &c in &pops {
                    terms.push(if setup.collapsed {
                        setup.pop_marginal(&st.params, c)?
                    } else if info.kernel {
                        setup.pop_smooth(&st.params, c, &st.gammas[c])?
                    } else {
                        setup.pop_lik(&st.params, c, &st.gammas[c])?
                    });
                }
                Ok((p, terms))
            })();
            let Ok((p, terms)) = evaluated else {
                set_value(&mut st.params, name, j, old);
                return false;
            };
            let current: f64 = pops
                .iter()
                .map(|&c| if info.kernel && !setup.collapsed { st.smooth[c] } else { st.lik[c] })
                .sum();
            let ratio = p - st.prior[sc.info] + terms.iter().sum::<f64>() - current + jac;
            if accept(rng, ratio) {
                st.prior[sc.info] = p;
                for (&c, v) in pops.iter().zip(terms) {
                    if info.kernel && !setup.collapsed {
                        st.smooth[c] = v;
                    } else {
                        st.lik[c] = v;
                    }
                }
                true
            } else {
                set_value(&mut st.params, name, j, old);
                false
            }
        }
    }
}

/// Samples the joint posterior of parameters and smoothers.
pub fn fit_mcmc(
    model: &ProcessModel,
    dm: &DataModelSpec,
    observations: &[Observation],
    bindings: &Bindings,
    groupings: Option<&Groupings>,
    config: &FitConfig,
) -> Result<FitResult> {
    config.check()?;
    let grid = &model.grid;
    let decls = parameter_decls(model, dm);
    check_bindings(&decls, bindings)?;
    let groups = group_indices(bindings, grid, groupings)?;
    let kernel_symbols: Vec<String> = model
        .smoother
        .kernel
        .symbols(&model.kernels)
        .into_iter()
        .map(|(n, _)| n)
        .collect();

    let mut infos = Vec::with_capacity(decls.len());
    let mut scalars = Vec::new();
    for d in decls {
        let strategy = bindings[&d.name].clone();
        let gi = groups[&d.name].clone();
        let hyper = strategy.hyper_decls(&d.name, &gi)?;
        let i = infos.len();
        if !matches!(strategy, EstimationStrategy::Fixed(_)) {
            let n = scalar_count(d.scope, grid);
            for j in 0..n {
                let (pop, time) = match d.scope {
                    Scope::Shared => (None, None),
                    Scope::PerPopulation => (Some(j), None),
                    Scope::PerCell => (Some(j / grid.n_times()), Some(j % grid.n_times())),
                };
                scalars.push(Scalar {
                    info: i,
                    slot: Slot::Value(j),
                    label: scalar_label(&d.name, grid, pop, time),
                    domain: d.domain,
                });
            }
            for (h, hd) in hyper.iter().enumerate() {
                scalars.push(Scalar {
                    info: i,
                    slot: Slot::Hyper(h),
                    label: hd.name.clone(),
                    domain: hd.domain,
                });
            }
        }
        infos.push(ParamInfo {
            kernel: kernel_symbols.contains(&d.name),
            decl: d,
            strategy,
            groups: gi,
        });
    }

    let mut obs: Vec<Vec<PopObs>> = (0..grid.n_populations()).map(|_| Vec::new()).collect();
    for o in observations {
        let coverage = || TmmpError::DataCoverage {
            population: o.population.clone(),
            time: o.time,
            name: "observation".into(),
        };
        let c = grid.population_index(&o.population).ok_or_else(coverage)?;
        let t = grid.time_index(o.time).ok_or_else(coverage)?;
        if !dm.transformation.admits(o.value) {
            return Err(TmmpError::ParameterDomain(format!(
                "observation {} for {} at {} is outside the {} transformation's domain",
                o.value, o.population, o.time, dm.transformation
            )));
        }
        obs[c].push(PopObs {
            t,
            y: dm.transformation.apply(o.value),
            s2: o.sampling_variance,
            terms: dm.terms(&o.source).clone(),
        });
    }

    let link_scale = dm.transformation == model.link;
    let setup = Setup {
        model,
        dm,
        layout: model.layout()?,
        infos,
        scalars,
        obs,
        collapsed: link_scale && !model.systematic.is_recursive(),
        link_scale,
    };

    let outputs: Vec<Result<ChainOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..config.chains)
            .map(|chain| {
                let setup = &setup;
                s.spawn(move || run_chain(setup, chain, config))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler thread panicked"))
            .collect()
    });
    let outputs: Vec<ChainOutput> = outputs.into_iter().collect::<Result<_>>()?;

    let mut traces: Vec<ScalarTrace> = setup
        .scalars
        .iter()
        .map(|s| ScalarTrace {
            name: s.label.clone(),
            chains: Vec::with_capacity(config.chains),
        })
        .collect();
    let mut acceptance: BTreeMap<String, f64> = BTreeMap::new();
    let mut draws = Vec::with_capacity(config.chains * config.iterations);
    let mut eta = Vec::with_capacity(draws.capacity());
    for out in outputs {
        for (si, t) in out.traces.into_iter().enumerate() {
            traces[si].chains.push(t);
            *acceptance.entry(setup.scalars[si].label.clone()).or_insert(0.0) += out.acceptance[si] / config.chains as f64;
        }
        draws.extend(out.draws);
        eta.extend(out.eta);
    }
    let diagnostics = diagnose(&traces, &acceptance);
    Ok(FitResult {
        method: FitMethod::Mcmc,
        config: config.clone(),
        populations: grid.populations.clone(),
        times: grid.times.clone(),
        draws,
        eta,
        traces,
        diagnostics,
        posterior: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn working_scale_round_trip() {
        for (d, x) in [
            (Domain::Real, -2.5),
            (Domain::Positive, 0.3),
            (Domain::Interval(0.0, 1.0), 0.8),
            (Domain::Interval(-1.0, 2.0), 1.5),
        ] {
            assert!((from_working(d, to_working(d, x)) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let d = Domain::Interval(-1.0, 2.0);
        let u = 0.4;
        let h = 1e-6;
        let fd = (from_working(d, u + h) - from_working(d, u - h)) / (2.0 * h);
        assert!((log_jacobian(d, from_working(d, u)) - fd.ln()).abs() < 1e-8);
    }
}
