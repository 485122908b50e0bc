use std::fmt::Write;

use super::{ModelSpec, ABSENT};
use crate::process::{ComponentConfig, ProjectionOptions};

fn or_absent(v: Option<&str>) -> &str {
    v.unwrap_or(ABSENT)
}

fn component(out: &mut String, header: &str, key: &str, cfg: &ComponentConfig, list_key: Option<&str>) {
    let _ = writeln!(out, "[{header}]");
    let variant = if cfg.variant == "none" { ABSENT } else { &cfg.variant };
    let _ = writeln!(out, "{key} = {variant}");
    if let Some(lk) = list_key {
        let list = cfg.covariates.join(", ");
        let _ = writeln!(out, "{lk} = {}", if list.is_empty() { ABSENT } else { &list });
    }
    for (k, v) in &cfg.options {
        let _ = writeln!(out, "{k} = {v}");
    }
    out.push('\n');
}

fn projection(p: &ProjectionOptions) -> String {
    let opts: Vec<String> = [("W", p.w), ("G", p.g), ("V", p.v)]
        .iter()
        .filter_map(|(k, v)| v.map(|v| format!("{k}={v}")))
        .collect();
    if opts.is_empty() {
        p.mode.clone()
    } else {
        format!("{}({})", p.mode, opts.join(", "))
    }
}

/// Writes a specification in canonical form; parsing the output gives back
/// an equal [`ModelSpec`].
pub fn emit_spec(spec: &ModelSpec) -> String {
    let mut out = String::new();
    out.push_str("[Process model formula]\n");
    let _ = writeln!(out, "citation = {}", or_absent(spec.citation.as_deref()));
    let _ = writeln!(out, "eta = {}", or_absent(spec.eta.as_deref()));
    let _ = writeln!(out, "g1 = {}", spec.link);
    let _ = writeln!(out, "formula = {}\n", spec.formula_rhs());

    if let Some(g) = &spec.grid {
        out.push_str("[Grid]\n");
        let _ = writeln!(out, "start = {}", g.start);
        let _ = writeln!(out, "end = {}", g.end);
        let _ = writeln!(out, "step = {}", g.step);
        let _ = writeln!(out, "populations = {}\n", g.populations.join(", "));
    }

    component(&mut out, "Covariate Component", "g2", &spec.covariate, Some("covariates"));
    component(&mut out, "Systematic Component", "g3", &spec.systematic, None);

    out.push_str("[Offsets]\n");
    let _ = writeln!(out, "a = {}\n", or_absent(spec.offsets.as_deref()));

    out.push_str("[Smoothing Component]\n");
    match &spec.smoother {
        Some(s) => {
            let _ = writeln!(out, "B = {}", s.basis);
            let _ = writeln!(out, "s = {}", s.kernel);
            let _ = writeln!(out, "r = {}", s.r);
            if s.constraints.is_empty() {
                let _ = writeln!(out, "K = {ABSENT}\n");
            } else {
                let k: Vec<String> = s.constraints.iter().map(|c| c.to_string()).collect();
                let _ = writeln!(out, "K = [{}]\n", k.join(", "));
            }
        }
        None => {
            let _ = writeln!(out, "{ABSENT}\n");
        }
    }

    out.push_str("[Projections]\n");
    let p = spec.projection.as_ref().map(projection);
    let _ = writeln!(out, "projection = {}\n", or_absent(p.as_deref()));

    out.push_str("[Parameter Estimation]\n");
    for b in &spec.bindings {
        let _ = writeln!(out, "{} = {}", b.name, b.strategy);
    }
    out.push('\n');

    let dm = &spec.data_model;
    out.push_str("[Data Model]\n");
    let _ = writeln!(out, "transformation = {}", dm.transformation);
    let _ = writeln!(out, "bias = {}", dm.default.bias);
    let _ = writeln!(out, "nonsampling_variance = {}", dm.default.nonsampling_variance);
    for (source, t) in &dm.sources {
        let _ = writeln!(out, "bias.{source} = {}", t.bias);
        let _ = writeln!(out, "nonsampling_variance.{source} = {}", t.nonsampling_variance);
    }
    out
}
