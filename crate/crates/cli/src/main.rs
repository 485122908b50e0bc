use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tmmp::datamodel::Observation;
use tmmp::inference::{
    fit_conjugate, fit_mcmc, fixed_params, is_conjugate, sample_prior, stream_rng, summarize, summarize_cells,
    summarize_scalars, FitConfig, DEFAULT_QUANTILES,
};
use tmmp::io;
use tmmp::process::{project, projection_registry, FittedDraw, ProjectionOptions};
use tmmp::spec::{compare_specs, compile_spec, parse_spec, validate_spec, CompiledSpec, ModelSpec, Severity, SpecData};
use tmmp::TmmpError;

/// Split-R-hat above which a fit is reported as not converged.
const RHAT_LIMIT: f64 = 1.1;

#[derive(Parser)]
#[command(name = "tmmp", version, about = "Simulate, fit, project and compare temporal models for multiple populations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw parameters, eta and observations from the prior.
    Simulate(SimulateArgs),
    /// Fit a specification to observations.
    Fit(FitArgs),
    /// Project a fitted model beyond the estimation grid.
    Project(ProjectArgs),
    /// Check a specification; exits 1 when it has errors.
    Validate(ValidateArgs),
    /// Print a side-by-side table of specifications.
    Compare(CompareArgs),
}

#[derive(Args)]
struct ModelInputs {
    #[arg(long)]
    spec: PathBuf,
    /// Long-format covariates: population,time,name,value.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Long-format offsets: population,time,name,value.
    #[arg(long)]
    offsets: Option<PathBuf>,
    /// Grouping table: population,level1_group,...
    #[arg(long)]
    groupings: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelInputs,
    /// Observation templates; values are replaced. Defaults to one per grid cell.
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Sampling variance of generated observations when no templates are given.
    #[arg(long, default_value_t = 0.01)]
    sampling_variance: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelInputs,
    /// Observations: population,time,value,sampling_variance,source.
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Retained draws per chain.
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    /// Comma-separated quantile levels.
    #[arg(long, value_delimiter = ',')]
    quantiles: Option<Vec<f64>>,
}

#[derive(Args)]
struct ProjectArgs {
    #[command(flatten)]
    model: ModelInputs,
    /// Output directory of a previous `fit`; defaults to --out.
    #[arg(long)]
    fit_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Last projection time.
    #[arg(long = "t-star")]
    t_star: f64,
    /// Projection mode; defaults to the specification's.
    #[arg(long = "proj-mode")]
    proj_mode: Option<String>,
    #[arg(long = "W")]
    w: Option<f64>,
    #[arg(long = "G")]
    g: Option<f64>,
    #[arg(long = "V")]
    v: Option<f64>,
    /// Number of projection draws; defaults to the number of fitted draws.
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    quantiles: Option<Vec<f64>>,
}

#[derive(Args)]
struct ValidateArgs {
    spec: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more specification files.
    #[arg(required = true, num_args = 2..)]
    specs: Vec<PathBuf>,
    /// Directory for comparison.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Project(a) => project_cmd(a),
        Command::Validate(a) => validate(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_spec(path: &Path) -> Result<ModelSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match parse_spec(&text) {
        Ok(s) => Ok(s),
        Err(TmmpError::Parse(errors)) => {
            let lines: Vec<String> = errors.iter().map(|e| format!("{}:{e}", path.display())).collect();
            bail!("{}", lines.join("\n"))
        }
        Err(e) => Err(e.into()),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("file not found: {}", path.display());
    }
    Ok(())
}

/// Loads and compiles a specification with its tables.
fn load_model(m: &ModelInputs) -> Result<(ModelSpec, CompiledSpec)> {
    for p in [Some(&m.spec), m.covariates.as_ref(), m.offsets.as_ref(), m.groupings.as_ref()]
        .into_iter()
        .flatten()
    {
        require_file(p)?;
    }
    let spec = read_spec(&m.spec)?;
    let data = SpecData {
        covariates: m.covariates.as_deref().map(io::read_data_table).transpose()?,
        offsets: m.offsets.as_deref().map(io::read_data_table).transpose()?,
        groupings: m.groupings.as_deref().map(io::read_groupings).transpose()?,
    };
    let compiled = compile_spec(&spec, data).with_context(|| format!("compiling {}", m.spec.display()))?;
    Ok((spec, compiled))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    if let Some(p) = &a.obs {
        require_file(p)?;
    }
    let (_, c) = load_model(&a.model)?;
    let templates = match &a.obs {
        Some(p) => io::read_observations(p)?,
        None => {
            let grid = &c.model.grid;
            grid.populations
                .iter()
                .flat_map(|p| {
                    grid.times.iter().map(move |t| Observation {
                        population: p.clone(),
                        time: *t,
                        value: f64::NAN,
                        sampling_variance: a.sampling_variance,
                        source: "simulated".into(),
                    })
                })
                .collect()
        }
    };
    let draw = sample_prior(&c.model, &c.data_model, &c.bindings, c.groupings.as_ref(), a.seed)?;
    let mut rng = stream_rng(a.seed, 1);
    let obs = c
        .data_model
        .simulate(&templates, &draw.eta, &c.model.grid, &draw.params, &mut rng)?;
    create_out(&a.out)?;
    io::write_eta_grid(&a.out.join("eta.csv"), &c.model.grid, &draw.eta)?;
    io::write_observations(&a.out.join("observations.csv"), &obs)?;
    let truth = FittedDraw {
        params: draw.params,
        deltas: draw.deltas,
    };
    io::write_fitted_draws(
        &a.out.join("true_params.csv"),
        &a.out.join("true_deltas.csv"),
        &c.model.grid,
        &[truth],
    )?;
    println!("simulated {} observations (seed {})", obs.len(), a.seed);
    Ok(ExitCode::SUCCESS)
}

fn fit(a: FitArgs) -> Result<ExitCode> {
    require_file(&a.obs)?;
    let (_, c) = load_model(&a.model)?;
    let obs = io::read_observations(&a.obs)?;
    let qs = a.quantiles.clone().unwrap_or_else(|| DEFAULT_QUANTILES.to_vec());
    let config = FitConfig {
        chains: a.chains,
        iterations: a.iters,
        warmup: a.warmup,
        seed: a.seed,
    };
    let result = if is_conjugate(&c.model, &c.data_model, &c.bindings) {
        let params = fixed_params(&c.model, &c.data_model, &c.bindings)?;
        fit_conjugate(&c.model, &c.data_model, &obs, &params, &config)?
    } else {
        fit_mcmc(&c.model, &c.data_model, &obs, &c.bindings, c.groupings.as_ref(), &config)?
    };
    let summary = summarize(&result, &qs)?;
    let scalars = summarize_scalars(&result, &qs)?;
    create_out(&a.out)?;
    io::write_scalar_draws(&a.out.join("draws.csv"), &result)?;
    io::write_eta_draws(&a.out.join("eta_draws.csv"), &result.populations, &result.times, &result.eta)?;
    io::write_cell_summary(&a.out.join("summary.csv"), &summary)?;
    io::write_scalar_summary(&a.out.join("parameter_summary.csv"), &scalars, &qs)?;
    io::write_diagnostics(&a.out.join("diagnostics.csv"), &result.diagnostics)?;
    io::write_fitted_draws(
        &a.out.join("params.csv"),
        &a.out.join("deltas.csv"),
        &c.model.grid,
        &result.draws,
    )?;
    println!(
        "fit {} draws with the {} sampler (seed {})",
        result.draws.len(),
        result.method.name(),
        a.seed
    );
    let bad: Vec<String> = result
        .diagnostics
        .iter()
        .filter(|d| d.rhat > RHAT_LIMIT)
        .map(|d| format!("{} (R-hat {:.3})", d.name, d.rhat))
        .collect();
    if !bad.is_empty() {
        eprintln!("not converged: {}", bad.join(", "));
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn project_cmd(a: ProjectArgs) -> Result<ExitCode> {
    let fit_dir = a.fit_dir.clone().unwrap_or_else(|| a.out.clone());
    let params_path = fit_dir.join("params.csv");
    let deltas_path = fit_dir.join("deltas.csv");
    require_file(&params_path)?;
    require_file(&deltas_path)?;
    let (_, c) = load_model(&a.model)?;
    let fitted = io::read_fitted_draws(&params_path, &deltas_path, &c.model.grid)?;
    let mut options: ProjectionOptions = c.projection.clone();
    if let Some(m) = &a.proj_mode {
        options.mode = m.clone();
    }
    options.w = a.w.or(options.w);
    options.g = a.g.or(options.g);
    options.v = a.v.or(options.v);
    let registry = projection_registry();
    let builder = registry.get(&options.mode).with_context(|| {
        format!(
            "unknown projection mode '{}' (known: {})",
            options.mode,
            registry.names().join(", ")
        )
    })?;
    let strategy = builder(&options)?;
    let n = a.draws.unwrap_or(fitted.len());
    let result = project(&c.model, strategy.as_ref(), &fitted, a.t_star, n, a.seed)?;
    let qs = a.quantiles.clone().unwrap_or_else(|| DEFAULT_QUANTILES.to_vec());
    let summary = summarize_cells(&result.populations, &result.times, &result.draws, &qs)?;
    create_out(&a.out)?;
    io::write_eta_draws(&a.out.join("projection_draws.csv"), &result.populations, &result.times, &result.draws)?;
    io::write_cell_summary(&a.out.join("projection_summary.csv"), &summary)?;
    println!(
        "projected {} times with {} draws ({} mode, seed {})",
        result.times.len(),
        n,
        options.mode,
        a.seed
    );
    Ok(ExitCode::SUCCESS)
}

fn validate(a: ValidateArgs) -> Result<ExitCode> {
    require_file(&a.spec)?;
    let spec = match read_spec(&a.spec) {
        Ok(s) => s,
        Err(e) => {
            println!("{e:#}");
            return Ok(ExitCode::FAILURE);
        }
    };
    let findings = validate_spec(&spec);
    for f in &findings {
        println!("{}: {f}", a.spec.display());
    }
    let errors = findings.iter().filter(|f| f.severity == Severity::Error).count();
    if errors > 0 {
        println!("{errors} error(s)");
        return Ok(ExitCode::FAILURE);
    }
    println!("ok ({} warning(s))", findings.len());
    Ok(ExitCode::SUCCESS)
}

fn compare(a: CompareArgs) -> Result<ExitCode> {
    let mut specs = Vec::new();
    for p in &a.specs {
        require_file(p)?;
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| p.display().to_string());
        specs.push((name, read_spec(p)?));
    }
    let table = compare_specs(&specs);
    print!("{}", table.to_text());
    if let Some(dir) = &a.out {
        create_out(dir)?;
        let path = dir.join("comparison.csv");
        fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}
