use std::path::Path;

use chemtyper::encoders::ModelError;
use chemtyper::labeler::LabelError;
use chemtyper::metrics::MetricsError;
use chemtyper::ontology::OntologyError;
use chemtyper::resolver::ResolveError;
use chemtyper::tensor::TensorError;
use thiserror::Error;

/// Exit code 2: bad or missing input. Exit code 3: a module rejected the
/// request; its message is passed through unchanged.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Contract(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Contract(_) => 3,
        }
    }

    pub fn missing(path: &Path) -> Self {
        CliError::Input(format!("missing upstream artifact {}", path.display()))
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Input(format!("cannot write {}: {e}", path.display()))
    }
}

impl From<OntologyError> for CliError {
    fn from(e: OntologyError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ResolveError> for CliError {
    fn from(e: ResolveError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } | ModelError::Format { .. } => CliError::Input(e.to_string()),
            ModelError::Contract(_) | ModelError::Tensor(_) => CliError::Contract(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Contract(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Contract(e.to_string())
    }
}
