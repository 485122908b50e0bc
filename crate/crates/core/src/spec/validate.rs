use std::fmt;

use super::{build_process_model, ModelSpec, Term};
use crate::basis::Basis;
use crate::data::DataTable;
use crate::hierarchy::EstimationStrategy;
use crate::inference::{check_binding, parameter_decls};
use crate::kernels::KernelRegistry;
use crate::params::Domain;
use crate::process::{covariate_registry, projection_registry, systematic_registry, Grid};
use crate::smoothing::SmootherLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub severity: Severity,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        match self.line {
            Some(l) => write!(f, "{sev} (line {l}): {}", self.message),
            None => write!(f, "{sev}: {}", self.message),
        }
    }
}

struct Findings(Vec<Finding>);

impl Findings {
    fn error(&mut self, line: Option<usize>, message: impl Into<String>) {
        self.0.push(Finding {
            severity: Severity::Error,
            line,
            message: message.into(),
        });
    }

    fn warning(&mut self, line: Option<usize>, message: impl Into<String>) {
        self.0.push(Finding {
            severity: Severity::Warning,
            line,
            message: message.into(),
        });
    }
}

/// Structural checks beyond syntax. The specification is runnable when no
/// finding has [`Severity::Error`].
pub fn validate_spec(spec: &ModelSpec) -> Vec<Finding> {
    let mut out = Findings(Vec::new());
    let line = |section: &str, key: &str| spec.lines.get(section, key);

    let grid = match &spec.grid {
        None => {
            out.error(None, "missing section: Grid");
            None
        }
        Some(g) => match g.build() {
            Ok(grid) => Some(grid),
            Err(e) => {
                out.error(spec.lines.get("Grid", ""), e.to_string());
                None
            }
        },
    };
    // structural checks still run against a placeholder grid
    let check_grid = grid.clone().unwrap_or_else(|| {
        Grid::regular(vec!["population".into()], 0.0, 20.0, 1.0).expect("placeholder grid is valid")
    });

    // formula terms against the sections that provide them
    let formula_line = line("Process model formula", "formula");
    let provided = [
        (Term::Covariate, spec.covariate.variant != "none", "Covariate Component"),
        (Term::Systematic, spec.systematic.variant != "none", "Systematic Component"),
        (Term::Offset, spec.offsets.is_some(), "Offsets"),
        (Term::Smoothing, spec.smoother.is_some(), "Smoothing Component"),
    ];
    for (term, present, section) in provided {
        match (spec.has_term(term), present) {
            (true, false) => out.error(
                formula_line,
                format!("formula uses {term} but the {section} section is absent"),
            ),
            (false, true) => out.error(
                formula_line,
                format!("the {section} section is given but {term} is not in the formula"),
            ),
            _ => {}
        }
    }

    let cov_line = line("Covariate Component", "g2");
    match covariate_registry().get(&spec.covariate.variant) {
        None => out.error(
            cov_line,
            format!(
                "unknown covariate component '{}' (known: {})",
                spec.covariate.variant,
                covariate_registry().names().join(", ")
            ),
        ),
        Some(b) => {
            if let Err(e) = b(&spec.covariate, &check_grid) {
                out.error(cov_line, e.to_string());
            }
        }
    }
    let sys_line = line("Systematic Component", "g3");
    match systematic_registry().get(&spec.systematic.variant) {
        None => out.error(
            sys_line,
            format!(
                "unknown systematic component '{}' (known: {})",
                spec.systematic.variant,
                systematic_registry().names().join(", ")
            ),
        ),
        Some(b) => {
            if let Err(e) = b(&spec.systematic, &check_grid) {
                out.error(sys_line, e.to_string());
            }
        }
    }

    match &spec.smoother {
        None => out.error(None, "a smoothing component is required to simulate or fit"),
        Some(s) => {
            let kernels = KernelRegistry::builtin();
            if let Err(e) = s.kernel.check(&kernels) {
                out.error(line("Smoothing Component", "s"), e.to_string());
            }
            let k_line = line("Smoothing Component", "K");
            if s.r > 0 && s.constraints.is_empty() {
                out.error(
                    k_line.or(line("Smoothing Component", "r")),
                    format!("non-stationary smoother (r = {}) requires constraint sets K_0..K_{}", s.r, s.r - 1),
                );
            } else if s.constraints.len() != s.r {
                out.error(
                    k_line,
                    format!("r = {} needs {} constraint set(s), found {}", s.r, s.r, s.constraints.len()),
                );
            } else if grid.is_some() {
                let layout = Basis::new(s.basis, check_grid.start(), check_grid.end()).and_then(|basis| {
                    let sets = s
                        .constraints
                        .iter()
                        .map(|c| c.resolve(&basis, &check_grid.times))
                        .collect::<crate::Result<Vec<_>>>()?;
                    SmootherLayout::build(&basis, s.r, &sets, &check_grid.times)
                });
                if let Err(e) = layout {
                    out.error(k_line.or(line("Smoothing Component", "B")), e.to_string());
                }
            }
        }
    }

    if let Some(p) = &spec.projection {
        let p_line = line("Projections", "projection");
        match projection_registry().get(&p.mode) {
            None => out.error(
                p_line,
                format!(
                    "unknown projection mode '{}' (known: {})",
                    p.mode,
                    projection_registry().names().join(", ")
                ),
            ),
            Some(b) => {
                if let Err(e) = b(p) {
                    out.error(p_line, e.to_string());
                }
            }
        }
        if p.mode.starts_with("pooled") {
            match &spec.smoother {
                Some(s) if s.r != 2 => out.error(
                    p_line,
                    format!("pooled projection requires a spline smoother with r = 2, found r = {}", s.r),
                ),
                Some(s) if s.basis.is_identity() => out.warning(
                    p_line,
                    "pooled projection with an identity basis pools yearly differences",
                ),
                _ => {}
            }
        }
    }

    check_housing(spec, &check_grid, &mut out);
    out.0
}

/// Every parameter must be bound exactly once.
fn check_housing(spec: &ModelSpec, grid: &Grid, out: &mut Findings) {
    let Ok(model) = build_process_model(spec, grid.clone(), DataTable::new(), None) else {
        // component errors are already reported
        return;
    };
    let decls = parameter_decls(&model, &spec.data_model);
    for d in &decls {
        let bound: Vec<_> = spec.bindings.iter().filter(|b| b.name == d.name).collect();
        match bound.as_slice() {
            [] => out.error(
                None,
                format!("parameter {} has no binding in [Parameter Estimation]", d.name),
            ),
            [b] => {
                if let Err(e) = check_binding(d, &b.strategy) {
                    out.error(b.line.0, e.to_string());
                }
                let improper = matches!(b.strategy, EstimationStrategy::Vague(None))
                    && matches!(d.domain, Domain::Positive | Domain::NonNegative);
                if improper {
                    out.warning(
                        b.line.0,
                        format!("{} has an improper flat prior; simulation needs vague(lo=, hi=)", d.name),
                    );
                }
            }
            many => {
                let lines: Vec<String> = many.iter().filter_map(|b| b.line.0).map(|l| l.to_string()).collect();
                let kinds: Vec<String> = many.iter().map(|b| b.strategy.to_string()).collect();
                out.error(
                    many[1].line.0,
                    format!(
                        "double housing: parameter {} is bound {} times (lines {}: {})",
                        d.name,
                        many.len(),
                        lines.join(", "),
                        kinds.join(" and ")
                    ),
                );
            }
        }
    }
    for b in &spec.bindings {
        if !decls.iter().any(|d| d.name == b.name) {
            let known: Vec<&str> = decls.iter().map(|d| d.name.as_str()).collect();
            out.error(
                b.line.0,
                format!(
                    "binding for unknown parameter {} (model parameters: {})",
                    b.name,
                    known.join(", ")
                ),
            );
        }
    }
}
