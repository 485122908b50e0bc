//! Systematic components `g3(t, eta, alpha)`.

use std::fmt;
use std::sync::Arc;

use super::{logistic, logit, ComponentConfig, Grid, Link, Registry, PROPORTION_CLAMP};
use crate::error::{Result, TmmpError};
use crate::params::{Domain, ParamDecl, ParamLookup};

pub trait SystematicComponent: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn params(&self) -> Vec<ParamDecl>;

    /// True when `g3` at `t` depends on `eta` at other times.
    fn is_recursive(&self) -> bool {
        false
    }

    /// `g3` at a single time; recursive components return an error.
    fn value(&self, p: &dyn ParamLookup, t: f64) -> Result<f64>;

    /// `g3` along `times`, given the remaining link-scale terms `rest`
    /// (`g2 + a + eps`) at the same times.
    fn path(&self, p: &dyn ParamLookup, times: &[f64], rest: &[f64], link: Link) -> Result<Vec<f64>> {
        let _ = (rest, link);
        times.iter().map(|&t| self.value(p, t)).collect()
    }
}

pub type SystematicBuilder = fn(&ComponentConfig, &Grid) -> Result<Arc<dyn SystematicComponent>>;

pub fn systematic_registry() -> Registry<SystematicBuilder> {
    let mut r: Registry<SystematicBuilder> = Registry::empty();
    r.register("none", |_, _| Ok(Arc::new(NoSystematic)));
    r.register("linear_trend", |cfg, grid| {
        Ok(Arc::new(LinearTrend {
            t_star: reference_time(cfg, grid)?,
        }))
    });
    r.register("logistic_transition", |cfg, grid| {
        let t_star = reference_time(cfg, grid)?;
        if grid.time_index(t_star).is_none() {
            return Err(TmmpError::Spec(format!("t_star {t_star} is not a grid time")));
        }
        Ok(Arc::new(LogisticTransition { t_star }))
    });
    r.register("trapezoid", |_, _| Ok(Arc::new(Trapezoid)));
    r
}

/// Reads `t_star` as a number or `midpoint` (the grid's midpoint).
fn reference_time(cfg: &ComponentConfig, grid: &Grid) -> Result<f64> {
    match cfg.options.get("t_star").map(|s| s.trim()) {
        None | Some("midpoint") => Ok(0.5 * (grid.start() + grid.end())),
        Some(s) => s
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| TmmpError::Spec(format!("t_star must be a number or 'midpoint', got '{s}'"))),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NoSystematic;

impl SystematicComponent for NoSystematic {
    fn name(&self) -> &'static str {
        "none"
    }
    fn params(&self) -> Vec<ParamDecl> {
        Vec::new()
    }
    fn value(&self, _: &dyn ParamLookup, _: f64) -> Result<f64> {
        Ok(0.0)
    }
}

/// `alpha_0_c + alpha_1_c (t - t_star)`.
#[derive(Debug, Clone, Copy)]
pub struct LinearTrend {
    pub t_star: f64,
}

impl SystematicComponent for LinearTrend {
    fn name(&self) -> &'static str {
        "linear_trend"
    }
    fn params(&self) -> Vec<ParamDecl> {
        vec![
            ParamDecl::new("alpha_0_c", Domain::Real),
            ParamDecl::new("alpha_1_c", Domain::Real),
        ]
    }
    fn value(&self, p: &dyn ParamLookup, t: f64) -> Result<f64> {
        Ok(p.param("alpha_0_c")? + p.param("alpha_1_c")? * (t - self.t_star))
    }
}

/// Forward logistic-growth step on the logit scale.
///
/// Below the asymptote `p_tilde` the proportion grows along a logistic curve
/// scaled to `p_tilde`; at or above it the previous value is carried forward.
pub fn fpem_transition_step(eta_prev: f64, p_tilde: f64, omega: f64) -> Result<f64> {
    check_fpem(eta_prev, p_tilde, omega)?;
    Ok(logit(forward_map(eta_prev, p_tilde, omega)))
}

/// Inverse of [`fpem_transition_step`]: the logit of the proportion one step
/// earlier whose forward step lands on `eta_next`.
pub fn fpem_backward_step(eta_next: f64, p_tilde: f64, omega: f64) -> Result<f64> {
    check_fpem(eta_next, p_tilde, omega)?;
    Ok(logit(backward_map(eta_next, p_tilde, omega)))
}

fn check_fpem(eta: f64, p_tilde: f64, omega: f64) -> Result<()> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(TmmpError::ParameterDomain(format!("eta must lie in (0, 1), got {eta}")));
    }
    if !(p_tilde > 0.0 && p_tilde <= 1.0) {
        return Err(TmmpError::ParameterDomain(format!("p_tilde must lie in (0, 1], got {p_tilde}")));
    }
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(TmmpError::ParameterDomain(format!("omega must be >= 0, got {omega}")));
    }
    Ok(())
}

fn forward_map(eta: f64, p_tilde: f64, omega: f64) -> f64 {
    if eta < p_tilde && omega > 0.0 {
        p_tilde * logistic(logit(eta / p_tilde) + omega)
    } else {
        eta
    }
}

fn backward_map(eta: f64, p_tilde: f64, omega: f64) -> f64 {
    if eta < p_tilde && omega > 0.0 {
        p_tilde * logistic(logit(eta / p_tilde) - omega)
    } else {
        eta
    }
}

fn clamp_proportion(x: f64) -> f64 {
    x.clamp(PROPORTION_CLAMP, 1.0 - PROPORTION_CLAMP)
}

/// Logistic transition anchored at `Omega_c` in the reference year and
/// propagated forwards and backwards through `eta`.
#[derive(Debug, Clone, Copy)]
pub struct LogisticTransition {
    pub t_star: f64,
}

impl SystematicComponent for LogisticTransition {
    fn name(&self) -> &'static str {
        "logistic_transition"
    }
    fn params(&self) -> Vec<ParamDecl> {
        vec![
            ParamDecl::new("p_tilde_c", Domain::Interval(0.0, 1.0)),
            ParamDecl::new("omega_c", Domain::NonNegative),
            ParamDecl::new("Omega_c", Domain::Real),
        ]
    }
    fn is_recursive(&self) -> bool {
        true
    }
    fn value(&self, _: &dyn ParamLookup, _: f64) -> Result<f64> {
        Err(TmmpError::NotApplicable(
            "logistic_transition depends on eta at neighbouring times".into(),
        ))
    }
    fn path(&self, p: &dyn ParamLookup, times: &[f64], rest: &[f64], link: Link) -> Result<Vec<f64>> {
        if link != Link::Logit {
            return Err(TmmpError::Spec(format!(
                "logistic_transition requires the logit link, model uses {link}"
            )));
        }
        let star = times
            .iter()
            .position(|t| (t - self.t_star).abs() < 1e-9)
            .ok_or_else(|| TmmpError::Grid(format!("reference time {} is not on the grid", self.t_star)))?;
        let p_tilde = p.param("p_tilde_c")?;
        let omega = p.param("omega_c")?;
        let mut g3 = vec![0.0; times.len()];
        let mut eta = vec![0.0; times.len()];
        g3[star] = p.param("Omega_c")?;
        eta[star] = logistic(g3[star] + rest[star]);
        // carried-forward steps reuse the neighbouring level so flat paths stay exact
        let carries = |x: f64| omega == 0.0 || x >= p_tilde;
        for i in (star + 1)..times.len() {
            let prev = clamp_proportion(eta[i - 1]);
            check_fpem(prev, p_tilde, omega)?;
            g3[i] = if carries(prev) {
                g3[i - 1] + rest[i - 1]
            } else {
                logit(forward_map(prev, p_tilde, omega))
            };
            eta[i] = logistic(g3[i] + rest[i]);
        }
        for i in (0..star).rev() {
            let next = clamp_proportion(eta[i + 1]);
            check_fpem(next, p_tilde, omega)?;
            g3[i] = if carries(next) {
                g3[i + 1] + rest[i + 1]
            } else {
                logit(backward_map(next, p_tilde, omega))
            };
            eta[i] = logistic(g3[i] + rest[i]);
        }
        Ok(g3)
    }
}

/// Rise over `lambda_1_c`, plateau at `xi_c` for `lambda_2_c`, decline over `lambda_3_c`.
#[derive(Debug, Clone, Copy)]
pub struct Trapezoid;

impl SystematicComponent for Trapezoid {
    fn name(&self) -> &'static str {
        "trapezoid"
    }
    fn params(&self) -> Vec<ParamDecl> {
        vec![
            ParamDecl::new("xi_c", Domain::Real),
            ParamDecl::new("gamma_0_c", Domain::Real),
            ParamDecl::new("lambda_1_c", Domain::Positive),
            ParamDecl::new("lambda_2_c", Domain::Positive),
            ParamDecl::new("lambda_3_c", Domain::Positive),
        ]
    }
    fn value(&self, p: &dyn ParamLookup, t: f64) -> Result<f64> {
        let xi = p.param("xi_c")?;
        let g0 = p.param("gamma_0_c")?;
        let l1 = p.param("lambda_1_c")?;
        let l2 = p.param("lambda_2_c")?;
        let l3 = p.param("lambda_3_c")?;
        if !(l1 > 0.0 && l2 > 0.0 && l3 > 0.0) {
            return Err(TmmpError::ParameterDomain("trapezoid durations must be > 0".into()));
        }
        let g1 = g0 + l1;
        let g2 = g1 + l2;
        let g3 = g2 + l3;
        Ok(if t <= g0 || t >= g3 {
            0.0
        } else if t < g1 {
            xi * (t - g0) / l1
        } else if t <= g2 {
            xi
        } else {
            xi - xi * (t - g2) / l3
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn zero_rate_is_identity() {
        for eta in [0.01, 0.3, 0.8] {
            assert!((fpem_transition_step(eta, 0.9, 0.0).unwrap() - logit(eta)).abs() < 1e-12);
        }
    }

    #[test]
    fn step_at_half_asymptote() {
        let v = logistic(fpem_transition_step(0.5, 1.0, 0.1).unwrap());
        assert!((v - logistic(0.1)).abs() < 1e-14);
        assert!((v - 0.5250).abs() < 1e-4);
    }

    #[test]
    fn above_asymptote_carries_forward() {
        assert_eq!(fpem_transition_step(0.7, 0.6, 0.3).unwrap(), logit(0.7));
        assert!(fpem_transition_step(1.2, 0.6, 0.3).is_err());
    }

    #[test]
    fn backward_inverts_forward() {
        for eta in [0.05, 0.2, 0.55] {
            let fwd = logistic(fpem_transition_step(eta, 0.7, 0.25).unwrap());
            let back = logistic(fpem_backward_step(fwd, 0.7, 0.25).unwrap());
            assert!((back - eta).abs() < 1e-12);
        }
    }

    #[test]
    fn trapezoid_shape() {
        let p: BTreeMap<String, f64> = [
            ("xi_c", 2.0),
            ("gamma_0_c", 10.0),
            ("lambda_1_c", 4.0),
            ("lambda_2_c", 3.0),
            ("lambda_3_c", 5.0),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
        let t = Trapezoid;
        assert_eq!(t.value(&p, 9.0).unwrap(), 0.0);
        assert_eq!(t.value(&p, 12.0).unwrap(), 1.0);
        assert_eq!(t.value(&p, 15.0).unwrap(), 2.0);
        assert_eq!(t.value(&p, 19.5).unwrap(), 1.0);
        assert_eq!(t.value(&p, 23.0).unwrap(), 0.0);
    }
}
