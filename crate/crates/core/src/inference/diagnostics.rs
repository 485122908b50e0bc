//! Convergence diagnostics and empirical quantiles.

use crate::error::{Result, TmmpError};

/// Split potential-scale-reduction factor.
///
/// Each chain is halved and the halves treated as separate chains. Returns
/// 1 when every draw is identical and NaN when there are too few draws.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves = split_chains(chains);
    let m = halves.len();
    let n = halves.first().map_or(0, |h| h.len());
    if m < 2 || n < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let vars: Vec<f64> = halves.iter().zip(&means).map(|(h, mu)| variance(h, *mu)).collect();
    let grand = mean(&means);
    let b = n as f64 / (m as f64 - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = mean(&vars);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}

/// Effective sample size from chain-averaged autocorrelations, truncated with
/// Geyer's initial positive sequence.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let total = (m * n) as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let vars: Vec<f64> = chains.iter().zip(&means).map(|(c, mu)| variance(&c[..n], *mu)).collect();
    let w = mean(&vars);
    let grand = mean(&means);
    let b_over_n = if m > 1 {
        means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0)
    } else {
        0.0
    };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if var_plus <= 0.0 {
        return total;
    }
    let autocov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| (0..n - lag).map(|i| (c[i] - mu) * (c[i + lag] - mu)).sum::<f64>() / n as f64)
            .sum::<f64>()
            / m as f64
    };
    let rho = |lag: usize| 1.0 - (w - autocov(lag)) / var_plus;
    let mut sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = if t == 0 { 1.0 + rho(1) } else { rho(t) + rho(t + 1) };
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        sum += pair;
        prev_pair = pair;
        t += 2;
    }
    // sum of pairs starting at lag 0 counts rho_0 = 1 once
    let tau = 2.0 * sum - 1.0;
    (total / tau.max(1e-12)).min(total * (total.log10().max(1.0)))
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn check_quantiles(qs: &[f64]) -> Result<()> {
    for q in qs {
        if !(*q > 0.0 && *q < 1.0) {
            return Err(TmmpError::ParameterDomain(format!("quantile {q} must lie in (0, 1)")));
        }
    }
    Ok(())
}

/// Quantiles of unsorted draws.
pub fn quantiles(draws: &[f64], qs: &[f64]) -> Result<Vec<f64>> {
    check_quantiles(qs)?;
    if draws.is_empty() {
        return Err(TmmpError::Argument("no draws to summarize".into()));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(qs.iter().map(|q| quantile_sorted(&sorted, *q)).collect())
}

fn split_chains(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    chains
        .iter()
        .flat_map(|c| [&c[..n], &c[n..2 * n]])
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64], mu: f64) -> f64 {
    x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}
