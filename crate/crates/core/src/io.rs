//! CSV exchange formats. Every file has a header row; times are decimal years.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::data::DataTable;
use crate::datamodel::Observation;
use crate::error::{Result, TmmpError};
use crate::hierarchy::Groupings;
use crate::inference::{quantile_label, CellSummary, Diagnostic, FitResult, ScalarSummary};
use crate::params::{ParamSet, ParamValue};
use crate::process::{FittedDraw, Grid};

fn csv_error(path: &Path, e: impl ToString) -> TmmpError {
    TmmpError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|source| TmmpError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = reader(path)?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| csv_error(path, format!("record {}: {e}", i + 1))))
        .collect()
}

/// Writes a header and rows of pre-formatted cells.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|source| TmmpError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Deserialize)]
struct ObservationRow {
    population: String,
    time: f64,
    value: f64,
    sampling_variance: f64,
    source: String,
}

/// Reads `population,time,value,sampling_variance,source`.
pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    Ok(read_rows::<ObservationRow>(path)?
        .into_iter()
        .map(|r| Observation {
            population: r.population,
            time: r.time,
            value: r.value,
            sampling_variance: r.sampling_variance,
            source: r.source,
        })
        .collect())
}

pub fn write_observations(path: &Path, obs: &[Observation]) -> Result<()> {
    write_csv(
        path,
        &["population", "time", "value", "sampling_variance", "source"],
        obs.iter().map(|o| {
            vec![
                o.population.clone(),
                o.time.to_string(),
                o.value.to_string(),
                o.sampling_variance.to_string(),
                o.source.clone(),
            ]
        }),
    )
}

#[derive(Deserialize)]
struct TableRow {
    population: String,
    time: f64,
    name: String,
    value: f64,
}

/// Reads covariates or offsets in long format `population,time,name,value`.
pub fn read_data_table(path: &Path) -> Result<DataTable> {
    let mut t = DataTable::new();
    for r in read_rows::<TableRow>(path)? {
        if t.get(&r.population, r.time, &r.name).is_some() {
            return Err(csv_error(
                path,
                format!("duplicate entry for {} at {} ({})", r.population, r.time, r.name),
            ));
        }
        t.insert(&r.population, r.time, &r.name, r.value);
    }
    Ok(t)
}

/// Reads `population,level1_group,...`; the first column names populations
/// and the rest list grouping levels from the lowest up.
pub fn read_groupings(path: &Path) -> Result<Groupings> {
    let mut r = reader(path)?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 2 {
        return Err(csv_error(path, "a groupings table needs a population column and at least one level"));
    }
    let mut g = Groupings::new(header.iter().skip(1).map(|s| s.to_string()).collect());
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let pop = rec.get(0).unwrap_or_default();
        if g.rows.contains_key(pop) {
            return Err(csv_error(path, format!("population {pop} appears twice")));
        }
        g.insert(pop, rec.iter().skip(1).map(|s| s.to_string()).collect());
    }
    Ok(g)
}

/// Writes `population,time,eta` for one grid of values.
pub fn write_eta_grid(path: &Path, grid: &Grid, eta: &DMatrix<f64>) -> Result<()> {
    write_csv(
        path,
        &["population", "time", "eta"],
        grid.populations.iter().enumerate().flat_map(|(c, p)| {
            grid.times
                .iter()
                .enumerate()
                .map(move |(t, time)| vec![p.clone(), time.to_string(), eta[(c, t)].to_string()])
        }),
    )
}

/// Writes `population,time,draw,eta` in population-time-draw order.
pub fn write_eta_draws(path: &Path, populations: &[String], times: &[f64], draws: &[DMatrix<f64>]) -> Result<()> {
    let mut rows = Vec::with_capacity(populations.len() * times.len() * draws.len());
    for (c, p) in populations.iter().enumerate() {
        for (t, time) in times.iter().enumerate() {
            for (i, d) in draws.iter().enumerate() {
                rows.push(vec![p.clone(), time.to_string(), i.to_string(), d[(c, t)].to_string()]);
            }
        }
    }
    write_csv(path, &["population", "time", "draw", "eta"], rows)
}

/// Writes `population,time,<quantile labels>`.
pub fn write_cell_summary(path: &Path, summary: &CellSummary) -> Result<()> {
    let labels: Vec<String> = summary.quantiles.iter().map(|q| quantile_label(*q)).collect();
    let mut header = vec!["population", "time"];
    header.extend(labels.iter().map(|s| s.as_str()));
    write_csv(
        path,
        &header,
        summary.rows.iter().map(|(p, t, qs)| {
            let mut row = vec![p.clone(), t.to_string()];
            row.extend(qs.iter().map(|q| q.to_string()));
            row
        }),
    )
}

/// Writes traced scalars as `parameter,chain,iteration,value`.
pub fn write_scalar_draws(path: &Path, result: &FitResult) -> Result<()> {
    let mut rows = Vec::new();
    for t in &result.traces {
        for (chain, draws) in t.chains.iter().enumerate() {
            for (i, v) in draws.iter().enumerate() {
                rows.push(vec![t.name.clone(), chain.to_string(), i.to_string(), v.to_string()]);
            }
        }
    }
    write_csv(path, &["parameter", "chain", "iteration", "value"], rows)
}

pub fn write_scalar_summary(path: &Path, summaries: &[ScalarSummary], qs: &[f64]) -> Result<()> {
    let labels: Vec<String> = qs.iter().map(|q| quantile_label(*q)).collect();
    let mut header = vec!["parameter", "mean", "sd"];
    header.extend(labels.iter().map(|s| s.as_str()));
    write_csv(
        path,
        &header,
        summaries.iter().map(|s| {
            let mut row = vec![s.name.clone(), s.mean.to_string(), s.sd.to_string()];
            row.extend(s.quantiles.iter().map(|q| q.to_string()));
            row
        }),
    )
}

pub fn write_diagnostics(path: &Path, diagnostics: &[Diagnostic]) -> Result<()> {
    write_csv(
        path,
        &["parameter", "rhat", "ess", "acceptance"],
        diagnostics.iter().map(|d| {
            vec![
                d.name.clone(),
                d.rhat.to_string(),
                d.ess.to_string(),
                d.acceptance.map(|a| a.to_string()).unwrap_or_default(),
            ]
        }),
    )
}

/// Writes the parameter values and smoother coefficients of each draw so a
/// later projection can rebuild them exactly.
pub fn write_fitted_draws(params_path: &Path, deltas_path: &Path, grid: &Grid, draws: &[FittedDraw]) -> Result<()> {
    let mut prows = Vec::new();
    let mut drows = Vec::new();
    for (i, d) in draws.iter().enumerate() {
        for (name, value) in d.params.iter() {
            for (c, t, v) in value.entries() {
                prows.push(vec![
                    i.to_string(),
                    name.clone(),
                    c.map(|c| grid.populations[c].clone()).unwrap_or_default(),
                    t.map(|t| grid.times[t].to_string()).unwrap_or_default(),
                    v.to_string(),
                ]);
            }
        }
        for (c, delta) in d.deltas.iter().enumerate() {
            for (k, v) in delta.iter().enumerate() {
                drows.push(vec![i.to_string(), grid.populations[c].clone(), (k + 1).to_string(), v.to_string()]);
            }
        }
    }
    write_csv(params_path, &["draw", "parameter", "population", "time", "value"], prows)?;
    write_csv(deltas_path, &["draw", "population", "index", "value"], drows)
}

#[derive(Deserialize)]
struct ParamRow {
    draw: usize,
    parameter: String,
    population: String,
    time: String,
    value: f64,
}

#[derive(Deserialize)]
struct DeltaRow {
    draw: usize,
    population: String,
    index: usize,
    value: f64,
}

/// Reads draws written by [`write_fitted_draws`] against the same grid.
pub fn read_fitted_draws(params_path: &Path, deltas_path: &Path, grid: &Grid) -> Result<Vec<FittedDraw>> {
    let pop_index = |path: &Path, p: &str| {
        grid.population_index(p)
            .ok_or_else(|| csv_error(path, format!("population {p} is not on the model grid")))
    };
    // draw -> name -> entries
    let mut params: BTreeMap<usize, BTreeMap<String, Vec<(Option<usize>, Option<usize>, f64)>>> = BTreeMap::new();
    for r in read_rows::<ParamRow>(params_path)? {
        let c = if r.population.is_empty() {
            None
        } else {
            Some(pop_index(params_path, &r.population)?)
        };
        let t = if r.time.is_empty() {
            None
        } else {
            let time: f64 = r
                .time
                .parse()
                .map_err(|_| csv_error(params_path, format!("bad time '{}'", r.time)))?;
            Some(
                grid.time_index(time)
                    .ok_or_else(|| csv_error(params_path, format!("time {time} is not on the model grid")))?,
            )
        };
        params.entry(r.draw).or_default().entry(r.parameter).or_default().push((c, t, r.value));
    }
    let mut deltas: BTreeMap<usize, Vec<Vec<(usize, f64)>>> = BTreeMap::new();
    for r in read_rows::<DeltaRow>(deltas_path)? {
        let c = pop_index(deltas_path, &r.population)?;
        let per = deltas.entry(r.draw).or_insert_with(|| vec![Vec::new(); grid.n_populations()]);
        per[c].push((r.index, r.value));
    }
    let n = params.keys().chain(deltas.keys()).max().map(|m| m + 1).unwrap_or(0);
    (0..n)
        .map(|i| {
            let mut set = ParamSet::new();
            for (name, entries) in params.remove(&i).unwrap_or_default() {
                set.insert(name.clone(), pack_entries(params_path, &name, grid, entries)?);
            }
            let per = deltas
                .remove(&i)
                .ok_or_else(|| csv_error(deltas_path, format!("draw {i} has no coefficients")))?;
            let deltas = per
                .into_iter()
                .enumerate()
                .map(|(c, mut v)| {
                    v.sort_by_key(|(k, _)| *k);
                    if v.iter().enumerate().any(|(j, (k, _))| *k != j + 1) {
                        return Err(csv_error(
                            deltas_path,
                            format!("draw {i}, population {}: coefficient indices are not 1..K", grid.populations[c]),
                        ));
                    }
                    Ok(DVector::from_iterator(v.len(), v.into_iter().map(|(_, x)| x)))
                })
                .collect::<Result<_>>()?;
            Ok(FittedDraw { params: set, deltas })
        })
        .collect()
}

fn pack_entries(path: &Path, name: &str, grid: &Grid, entries: Vec<(Option<usize>, Option<usize>, f64)>) -> Result<ParamValue> {
    let bad = || csv_error(path, format!("inconsistent entries for parameter {name}"));
    match entries.first() {
        Some((None, None, v)) if entries.len() == 1 => Ok(ParamValue::Shared(*v)),
        Some((Some(_), None, _)) => {
            let mut out = vec![f64::NAN; grid.n_populations()];
            for (c, t, v) in entries {
                match (c, t) {
                    (Some(c), None) => out[c] = v,
                    _ => return Err(bad()),
                }
            }
            if out.iter().any(|v| v.is_nan()) {
                return Err(bad());
            }
            Ok(ParamValue::PerPopulation(out))
        }
        Some((Some(_), Some(_), _)) => {
            let mut out = vec![vec![f64::NAN; grid.n_times()]; grid.n_populations()];
            for (c, t, v) in entries {
                match (c, t) {
                    (Some(c), Some(t)) => out[c][t] = v,
                    _ => return Err(bad()),
                }
            }
            if out.iter().flatten().any(|v| v.is_nan()) {
                return Err(bad());
            }
            Ok(ParamValue::PerCell(out))
        }
        _ => Err(bad()),
    }
}
