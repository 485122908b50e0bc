//! Named model parameters and their storage across populations.
//!
//! Parameter scope follows a naming convention shared by every component:
//! a `_c` suffix marks a population-specific parameter, `_ct` a parameter
//! that varies by population and time, anything else is shared.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Result, TmmpError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Shared,
    PerPopulation,
    PerCell,
}

impl Scope {
    pub fn of(name: &str) -> Scope {
        if name.ends_with("_ct") {
            Scope::PerCell
        } else if name.ends_with("_c") {
            Scope::PerPopulation
        } else {
            Scope::Shared
        }
    }
}

/// Support of a parameter on its natural scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    Real,
    Positive,
    NonNegative,
    /// Closed interval `[lo, hi]`; samplers treat it as open.
    Interval(f64, f64),
}

impl Domain {
    pub fn contains(&self, x: f64) -> bool {
        if !x.is_finite() {
            return false;
        }
        match *self {
            Domain::Real => true,
            Domain::Positive => x > 0.0,
            Domain::NonNegative => x >= 0.0,
            Domain::Interval(lo, hi) => x >= lo && x <= hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub scope: Scope,
    pub domain: Domain,
}

impl ParamDecl {
    pub fn new(name: impl Into<String>, domain: Domain) -> Self {
        let name = name.into();
        let scope = Scope::of(&name);
        ParamDecl {
            name,
            scope,
            domain,
        }
    }
}

/// Either a literal or a reference to a named parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamExpr {
    Value(f64),
    Symbol(String),
}

impl fmt::Display for ParamExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamExpr::Value(v) => write!(f, "{v}"),
            ParamExpr::Symbol(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Shared(f64),
    PerPopulation(Vec<f64>),
    /// Indexed `[population][time]`.
    PerCell(Vec<Vec<f64>>),
}

impl ParamValue {
    pub fn get(&self, pop: usize, time: Option<usize>) -> Option<f64> {
        match self {
            ParamValue::Shared(v) => Some(*v),
            ParamValue::PerPopulation(v) => v.get(pop).copied(),
            ParamValue::PerCell(v) => time.and_then(|t| v.get(pop).and_then(|row| row.get(t)).copied()),
        }
    }

    /// Flattened scalar entries with their labels, in a stable order.
    pub fn entries(&self) -> Vec<(Option<usize>, Option<usize>, f64)> {
        match self {
            ParamValue::Shared(v) => vec![(None, None, *v)],
            ParamValue::PerPopulation(v) => v.iter().enumerate().map(|(c, x)| (Some(c), None, *x)).collect(),
            ParamValue::PerCell(v) => v
                .iter()
                .enumerate()
                .flat_map(|(c, row)| row.iter().enumerate().map(move |(t, x)| (Some(c), Some(t), *x)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    values: BTreeMap<String, ParamValue>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ParamValue) {
        self.values.insert(name.into(), value);
    }

    pub fn set_shared(&mut self, name: impl Into<String>, v: f64) {
        self.insert(name, ParamValue::Shared(v));
    }

    pub fn set_per_population(&mut self, name: impl Into<String>, v: Vec<f64>) {
        self.insert(name, ParamValue::PerPopulation(v));
    }

    pub fn value(&self, name: &str) -> Option<&ParamValue> {
        self.values.get(name)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut ParamValue> {
        self.values.get_mut(name)
    }

    pub fn get(&self, name: &str, pop: usize, time: Option<usize>) -> Result<f64> {
        self.values
            .get(name)
            .and_then(|v| v.get(pop, time))
            .ok_or_else(|| TmmpError::Argument(format!("no value for parameter {name} (population {pop}, time {time:?})")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamValue)> {
        self.values.iter()
    }

    pub fn resolve(&self, expr: &ParamExpr, pop: usize, time: Option<usize>) -> Result<f64> {
        match expr {
            ParamExpr::Value(v) => Ok(*v),
            ParamExpr::Symbol(s) => self.get(s, pop, time),
        }
    }
}

/// Parameter view bound to one population (and optionally one time index).
pub trait ParamLookup {
    fn param(&self, name: &str) -> Result<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct CellParams<'a> {
    pub set: &'a ParamSet,
    pub pop: usize,
    pub time: Option<usize>,
}

impl ParamLookup for CellParams<'_> {
    fn param(&self, name: &str) -> Result<f64> {
        self.set.get(name, self.pop, self.time)
    }
}

impl ParamLookup for BTreeMap<String, f64> {
    fn param(&self, name: &str) -> Result<f64> {
        self.get(name)
            .copied()
            .ok_or_else(|| TmmpError::Argument(format!("no value for parameter {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_from_suffix() {
        assert_eq!(Scope::of("beta_0_c"), Scope::PerPopulation);
        assert_eq!(Scope::of("beta_pc1_ct"), Scope::PerCell);
        assert_eq!(Scope::of("beta_1"), Scope::Shared);
    }

    #[test]
    fn per_cell_requires_time() {
        let v = ParamValue::PerCell(vec![vec![1.0, 2.0]]);
        assert_eq!(v.get(0, Some(1)), Some(2.0));
        assert_eq!(v.get(0, None), None);
    }
}
