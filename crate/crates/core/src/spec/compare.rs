use super::{ModelSpec, ABSENT};
use crate::basis::BasisSpec;
use crate::hierarchy::EstimationStrategy;
use crate::kernels::KernelRegistry;
use crate::process::{systematic_registry, Grid};

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub cells: Vec<String>,
}

/// Side-by-side summary of specifications, one column per model.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub models: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let width = |s: &str| s.chars().count();
        let mut widths = vec![self.rows.iter().map(|r| width(&r.label)).max().unwrap_or(0)];
        for (j, m) in self.models.iter().enumerate() {
            let w = self.rows.iter().map(|r| width(&r.cells[j])).max().unwrap_or(0);
            widths.push(w.max(width(m)));
        }
        let line = |cells: Vec<&str>| -> String {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - width(c))))
                .collect();
            padded.join(" | ").trim_end().to_string()
        };
        let mut out = String::new();
        let mut header = vec![""];
        header.extend(self.models.iter().map(|s| s.as_str()));
        out.push_str(&line(header));
        out.push('\n');
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&rule.join("-+-"));
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![r.label.as_str()];
            cells.extend(r.cells.iter().map(|s| s.as_str()));
            out.push_str(&line(cells));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["field".to_string()];
        header.extend(self.models.iter().cloned());
        // writing to a Vec cannot fail
        w.write_record(&header).expect("in-memory csv");
        for r in &self.rows {
            let mut rec = vec![r.label.clone()];
            rec.extend(r.cells.iter().cloned());
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv output is utf-8")
    }
}

fn or_absent(v: impl Into<String>) -> String {
    let s = v.into();
    if s.is_empty() {
        ABSENT.to_string()
    } else {
        s
    }
}

fn basis_label(b: &BasisSpec) -> String {
    match b {
        BasisSpec::Identity => "identity".into(),
        BasisSpec::BSpline {
            degree: 3,
            knot_spacing,
        } => format!("cubic B-splines, knots every {knot_spacing} years"),
        BasisSpec::BSpline {
            degree,
            knot_spacing,
        } => format!("degree-{degree} B-splines, knots every {knot_spacing} years"),
    }
}

fn alpha_label(spec: &ModelSpec) -> String {
    if spec.systematic.variant == "none" {
        return ABSENT.into();
    }
    let grid = match spec.grid.as_ref().map(|g| g.build()) {
        Some(Ok(g)) => g,
        _ => Grid::regular(vec!["population".into()], 0.0, 20.0, 1.0).expect("placeholder grid is valid"),
    };
    match systematic_registry()
        .get(&spec.systematic.variant)
        .and_then(|b| b(&spec.systematic, &grid).ok())
    {
        Some(c) => or_absent(c.params().iter().map(|d| d.name.clone()).collect::<Vec<_>>().join(", ")),
        None => "?".into(),
    }
}

fn names_where(spec: &ModelSpec, pred: impl Fn(&EstimationStrategy) -> bool) -> String {
    or_absent(
        spec.bindings
            .iter()
            .filter(|b| pred(&b.strategy))
            .map(|b| b.name.clone())
            .collect::<Vec<_>>()
            .join(", "),
    )
}

fn hierarchy_detail(spec: &ModelSpec, f: impl Fn(&EstimationStrategy) -> Option<String>) -> String {
    or_absent(
        spec.bindings
            .iter()
            .filter_map(|b| f(&b.strategy).map(|v| format!("{}: {v}", b.name)))
            .collect::<Vec<_>>()
            .join("; "),
    )
}

fn column(spec: &ModelSpec) -> Vec<(&'static str, String)> {
    let kernels = KernelRegistry::builtin();
    let sm = spec.smoother.as_ref();
    vec![
        ("Citation", spec.citation.clone().unwrap_or_else(|| ABSENT.into())),
        ("eta", spec.eta.clone().unwrap_or_else(|| ABSENT.into())),
        ("g1", spec.link.to_string()),
        ("Process model formula", format!("{}(eta) = {}", spec.link, spec.formula_rhs())),
        (
            "g2",
            if spec.covariate.variant == "none" {
                ABSENT.into()
            } else {
                spec.covariate.variant.clone()
            },
        ),
        ("Covariates", or_absent(spec.covariate.covariates.join(", "))),
        (
            "g3",
            if spec.systematic.variant == "none" {
                ABSENT.into()
            } else {
                spec.systematic.variant.clone()
            },
        ),
        ("alpha_c", alpha_label(spec)),
        ("a", spec.offsets.clone().unwrap_or_else(|| ABSENT.into())),
        ("B", sm.map(|s| basis_label(&s.basis)).unwrap_or_else(|| ABSENT.into())),
        (
            "s",
            sm.map(|s| s.kernel.display_name(&kernels)).unwrap_or_else(|| ABSENT.into()),
        ),
        ("r", sm.map(|s| s.r.to_string()).unwrap_or_else(|| ABSENT.into())),
        (
            "K",
            sm.map(|s| {
                or_absent(
                    s.constraints
                        .iter()
                        .enumerate()
                        .map(|(d, c)| format!("K_{d} = {c}"))
                        .collect::<Vec<_>>()
                        .join("; "),
                )
            })
            .unwrap_or_else(|| ABSENT.into()),
        ),
        (
            "Projections",
            spec.projection
                .as_ref()
                .map(|p| {
                    let opts: Vec<String> = [("W", p.w), ("G", p.g), ("V", p.v)]
                        .iter()
                        .filter_map(|(k, v)| v.map(|v| format!("{k}={v}")))
                        .collect();
                    if opts.is_empty() {
                        p.mode.clone()
                    } else {
                        format!("{} ({})", p.mode, opts.join(", "))
                    }
                })
                .unwrap_or_else(|| ABSENT.into()),
        ),
        ("Fixed", names_where(spec, |s| matches!(s, EstimationStrategy::Fixed(_)))),
        ("Vague priors", names_where(spec, |s| matches!(s, EstimationStrategy::Vague(_)))),
        (
            "Informative priors",
            names_where(spec, |s| matches!(s, EstimationStrategy::Informative(_))),
        ),
        (
            "Hierarchical",
            names_where(spec, |s| {
                matches!(
                    s,
                    EstimationStrategy::Hierarchical(_) | EstimationStrategy::MultiplicativeTn(_)
                )
            }),
        ),
        (
            "pi",
            hierarchy_detail(spec, |s| match s {
                EstimationStrategy::Hierarchical(h) => Some(h.family.to_string()),
                EstimationStrategy::MultiplicativeTn(m) => Some(format!("multiplicative truncated normal ({}, {})", m.lo, m.hi)),
                _ => None,
            }),
        ),
        (
            "Levels",
            hierarchy_detail(spec, |s| match s {
                EstimationStrategy::Hierarchical(h) => Some(h.levels.to_string()),
                EstimationStrategy::MultiplicativeTn(_) => Some("1".into()),
                _ => None,
            }),
        ),
        (
            "Groupings",
            hierarchy_detail(spec, |s| match s {
                EstimationStrategy::Hierarchical(h) if !h.groupings.is_empty() => Some(h.groupings.clone()),
                _ => None,
            }),
        ),
    ]
}

/// Builds the comparison table for named specifications.
pub fn compare_specs(specs: &[(String, ModelSpec)]) -> Comparison {
    let columns: Vec<Vec<(&'static str, String)>> = specs.iter().map(|(_, s)| column(s)).collect();
    let labels: Vec<&'static str> = match columns.first() {
        Some(c) => c.iter().map(|(l, _)| *l).collect(),
        None => column_labels(),
    };
    let rows = labels
        .iter()
        .enumerate()
        .map(|(i, label)| ComparisonRow {
            label: label.to_string(),
            cells: columns.iter().map(|c| c[i].1.clone()).collect(),
        })
        .collect();
    Comparison {
        models: specs.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    }
}

fn column_labels() -> Vec<&'static str> {
    vec![
        "Citation",
        "eta",
        "g1",
        "Process model formula",
        "g2",
        "Covariates",
        "g3",
        "alpha_c",
        "a",
        "B",
        "s",
        "r",
        "K",
        "Projections",
        "Fixed",
        "Vague priors",
        "Informative priors",
        "Hierarchical",
        "pi",
        "Levels",
        "Groupings",
    ]
}
