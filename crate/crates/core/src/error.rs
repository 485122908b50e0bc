use thiserror::Error;

use crate::spec::ParseError;

pub type Result<T> = std::result::Result<T, TmmpError>;

#[derive(Debug, Error)]
pub enum TmmpError {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("numerical conditioning failure in {context}")]
    NumericalConditioning { context: String },

    #[error("degenerate domain: {0}")]
    DegenerateDomain(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("time grid error: {0}")]
    Grid(String),

    #[error("constraint set {set} violated (residual {residual:e})")]
    Constraint { set: usize, residual: f64 },

    #[error("unidentified level: {0}")]
    UnidentifiedLevel(String),

    #[error("missing data for population {population} at time {time} ({name})")]
    DataCoverage {
        population: String,
        time: f64,
        name: String,
    },

    #[error("grouping error for population {population}: {reason}")]
    Grouping { population: String, reason: String },

    #[error("parameter {0} has an improper vague prior; give explicit bounds")]
    RequiresBounds(String),

    #[error("model is not conjugate: {0}; use the MCMC sampler")]
    NotConjugate(String),

    #[error("non-finite log-posterior at initialization in block {0}")]
    Initialization(String),

    #[error("{}", format_parse_errors(.0))]
    Parse(Vec<ParseError>),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },
}

fn format_parse_errors(errors: &[ParseError]) -> String {
    errors
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}
