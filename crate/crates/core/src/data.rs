//! Long-format `(population, time, name, value)` tables for covariates and offsets.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Result, TmmpError};

/// Times are matched to micro-year precision.
pub(crate) fn time_key(t: f64) -> i64 {
    (t * 1e6).round() as i64
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataTable {
    /// name -> population -> time key -> value
    cells: BTreeMap<String, BTreeMap<String, BTreeMap<i64, f64>>>,
}

impl DataTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, population: &str, time: f64, name: &str, value: f64) {
        self.cells
            .entry(name.to_string())
            .or_default()
            .entry(population.to_string())
            .or_default()
            .insert(time_key(time), value);
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cells.values().flat_map(|p| p.values()).map(|t| t.len()).sum()
    }

    pub fn get(&self, population: &str, time: f64, name: &str) -> Option<f64> {
        self.cells.get(name)?.get(population)?.get(&time_key(time)).copied()
    }

    /// Like [`get`](Self::get) but reports the missing cell.
    pub fn require(&self, population: &str, time: f64, name: &str) -> Result<f64> {
        self.get(population, time, name).ok_or_else(|| TmmpError::DataCoverage {
            population: population.to_string(),
            time,
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.cells.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, f64, f64)> {
        self.cells.iter().flat_map(|(n, pops)| {
            pops.iter()
                .flat_map(move |(p, times)| times.iter().map(move |(t, v)| (p.as_str(), n.as_str(), *t as f64 / 1e6, *v)))
        })
    }
}
