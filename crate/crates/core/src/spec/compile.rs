use super::{validate_spec, GridSpec, ModelSpec, Severity};
use crate::data::DataTable;
use crate::datamodel::DataModelSpec;
use crate::error::{Result, TmmpError};
use crate::hierarchy::Groupings;
use crate::inference::{group_indices, Bindings};
use crate::kernels::KernelRegistry;
use crate::process::{
    covariate_registry, systematic_registry, Grid, Offsets, ProcessModel, ProjectionOptions,
};

/// External tables a specification refers to.
#[derive(Debug, Clone, Default)]
pub struct SpecData {
    pub covariates: Option<DataTable>,
    pub offsets: Option<DataTable>,
    pub groupings: Option<Groupings>,
}

/// Everything needed to simulate, fit and project a specification.
#[derive(Debug, Clone)]
pub struct CompiledSpec {
    pub model: ProcessModel,
    pub data_model: DataModelSpec,
    pub bindings: Bindings,
    pub groupings: Option<Groupings>,
    pub projection: ProjectionOptions,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        Grid::regular(self.populations.clone(), self.start, self.end, self.step)
    }
}

/// Builds the process model without checking data coverage.
pub fn build_process_model(
    spec: &ModelSpec,
    grid: Grid,
    covariate_data: DataTable,
    offsets: Option<DataTable>,
) -> Result<ProcessModel> {
    let covariates = covariate_registry();
    let builder = covariates.get(&spec.covariate.variant).ok_or_else(|| {
        TmmpError::Spec(format!(
            "unknown covariate component '{}' (known: {})",
            spec.covariate.variant,
            covariates.names().join(", ")
        ))
    })?;
    let covariate = builder(&spec.covariate, &grid)?;
    let systematics = systematic_registry();
    let builder = systematics.get(&spec.systematic.variant).ok_or_else(|| {
        TmmpError::Spec(format!(
            "unknown systematic component '{}' (known: {})",
            spec.systematic.variant,
            systematics.names().join(", ")
        ))
    })?;
    let systematic = builder(&spec.systematic, &grid)?;
    let smoother = spec
        .smoother
        .clone()
        .ok_or_else(|| TmmpError::Spec("a smoothing component is required".into()))?;
    let offsets = match (&spec.offsets, offsets) {
        (Some(name), Some(table)) => Some(Offsets {
            name: name.clone(),
            table,
        }),
        (Some(name), None) => Some(Offsets {
            name: name.clone(),
            table: DataTable::new(),
        }),
        (None, _) => None,
    };
    Ok(ProcessModel {
        grid,
        link: spec.link,
        covariate,
        systematic,
        covariate_data,
        offsets,
        smoother,
        kernels: KernelRegistry::builtin(),
    })
}

fn require_series(table: &DataTable, what: &str, name: &str, grid: &Grid) -> Result<()> {
    if !table.names().contains(name) {
        let known: Vec<String> = table.names().into_iter().collect();
        return Err(TmmpError::Spec(format!(
            "{what} '{name}' is not in the {what} table (found: {})",
            if known.is_empty() { "nothing".to_string() } else { known.join(", ") }
        )));
    }
    for p in &grid.populations {
        for t in &grid.times {
            table.require(p, *t, name)?;
        }
    }
    Ok(())
}

/// Validates a specification and binds it to its data tables.
pub fn compile_spec(spec: &ModelSpec, data: SpecData) -> Result<CompiledSpec> {
    let errors: Vec<String> = validate_spec(spec)
        .into_iter()
        .filter(|f| f.severity == Severity::Error)
        .map(|f| f.to_string())
        .collect();
    if !errors.is_empty() {
        return Err(TmmpError::Spec(errors.join("; ")));
    }
    let grid = spec
        .grid
        .as_ref()
        .ok_or_else(|| TmmpError::Spec("missing section: Grid".into()))?
        .build()?;
    let covariate_data = data.covariates.unwrap_or_default();
    for name in &spec.covariate.covariates {
        require_series(&covariate_data, "covariate", name, &grid)?;
    }
    if let Some(name) = &spec.offsets {
        let table = data
            .offsets
            .as_ref()
            .ok_or_else(|| TmmpError::Spec(format!("offset '{name}' needs an offsets table")))?;
        require_series(table, "offset", name, &grid)?;
    }
    let model = build_process_model(spec, grid, covariate_data, data.offsets)?;
    let bindings: Bindings = spec.bindings.iter().map(|b| (b.name.clone(), b.strategy.clone())).collect();
    group_indices(&bindings, &model.grid, data.groupings.as_ref())?;
    Ok(CompiledSpec {
        model,
        data_model: spec.data_model.clone(),
        bindings,
        groupings: data.groupings,
        projection: spec.projection.clone().unwrap_or_default(),
    })
}
