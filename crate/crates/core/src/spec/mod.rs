//! Model specification files (`.tmmp`).
//!
//! A specification is an INI-style document with one bracketed section per
//! model part and `key = value` lines inside each. A section (or a single
//! value) written as `·` (or `.`) is explicitly absent. Lines starting with
//! `#` are comments.
//!
//! ```text
//! [Process model formula]
//! citation = example model
//! eta = under-five mortality rate
//! g1 = log
//! formula = g3 + eps
//!
//! [Grid]
//! start = 1990
//! end = 2020
//! populations = A, B
//!
//! [Covariate Component]
//! ·
//!
//! [Systematic Component]
//! g3 = linear_trend
//! t_star = midpoint
//!
//! [Offsets]
//! ·
//!
//! [Smoothing Component]
//! B = bspline(degree=3, knot_spacing=2.5)
//! s = white_noise(sigma2=sigma2_c)
//! r = 2
//! K = [ref(k_star), sum_range(2, K)]
//!
//! [Projections]
//! projection = pooled(W=0.5)
//!
//! [Parameter Estimation]
//! alpha_0_c = vague
//! alpha_1_c = vague
//! sigma2_c = hierarchical(pi=normal, levels=1, groupings="countries within world", scale=log)
//! ```

mod compare;
mod compile;
mod emit;
pub mod expr;
mod parse;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::datamodel::DataModelSpec;
use crate::hierarchy::EstimationStrategy;
use crate::process::{ComponentConfig, Link, ProjectionOptions, SmootherTemplate};

pub use compare::{compare_specs, Comparison, ComparisonRow};
pub use compile::{build_process_model, compile_spec, CompiledSpec, SpecData};
pub use emit::emit_spec;
pub use parse::{parse_prior, parse_spec, parse_strategy};
pub use validate::{validate_spec, Finding, Severity};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

/// Marker for an absent section or value.
pub const ABSENT: &str = "·";

pub(crate) fn is_absent(s: &str) -> bool {
    matches!(s.trim(), "·" | ".")
}

/// Sections every specification must contain, in file order.
pub const REQUIRED_SECTIONS: [&str; 7] = [
    "Process model formula",
    "Covariate Component",
    "Systematic Component",
    "Offsets",
    "Smoothing Component",
    "Projections",
    "Parameter Estimation",
];

/// Sections that may be omitted.
pub const OPTIONAL_SECTIONS: [&str; 2] = ["Grid", "Data Model"];

/// Additive terms on the right-hand side of the process model formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Covariate,
    Systematic,
    Offset,
    Smoothing,
}

impl Term {
    pub fn symbol(&self) -> &'static str {
        match self {
            Term::Covariate => "g2",
            Term::Systematic => "g3",
            Term::Offset => "a",
            Term::Smoothing => "eps",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub start: f64,
    pub end: f64,
    pub step: f64,
    pub populations: Vec<String>,
}

/// Source line of a parsed item. Line numbers never affect equality, so a
/// parsed specification equals its re-parsed emission.
#[derive(Debug, Clone, Copy, Default)]
pub struct SourceLine(pub Option<usize>);

impl PartialEq for SourceLine {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Line numbers of parsed keys, indexed `"Section/key"`.
#[derive(Debug, Clone, Default)]
pub struct SourceLines(pub BTreeMap<String, usize>);

impl PartialEq for SourceLines {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl SourceLines {
    pub fn get(&self, section: &str, key: &str) -> Option<usize> {
        self.0.get(&format!("{section}/{key}")).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub name: String,
    pub strategy: EstimationStrategy,
    pub line: SourceLine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub citation: Option<String>,
    /// Description of the modelled indicator.
    pub eta: Option<String>,
    pub link: Link,
    pub formula: Vec<Term>,
    pub grid: Option<GridSpec>,
    /// Variant `none` when the section is absent.
    pub covariate: ComponentConfig,
    pub systematic: ComponentConfig,
    /// Name of the offset series in the offsets table.
    pub offsets: Option<String>,
    pub smoother: Option<SmootherTemplate>,
    pub projection: Option<ProjectionOptions>,
    /// In file order; a parameter bound twice appears twice.
    pub bindings: Vec<Binding>,
    pub data_model: DataModelSpec,
    pub lines: SourceLines,
}

impl ModelSpec {
    pub fn has_term(&self, term: Term) -> bool {
        self.formula.contains(&term)
    }

    /// The right-hand side as written, e.g. `g3 + eps`.
    pub fn formula_rhs(&self) -> String {
        self.formula.iter().map(|t| t.symbol()).collect::<Vec<_>>().join(" + ")
    }

    pub fn binding(&self, name: &str) -> Option<&EstimationStrategy> {
        self.bindings.iter().find(|b| b.name == name).map(|b| &b.strategy)
    }
}
