use recap_core::corpus::CorpusError;
use recap_core::datastore::DatastoreError;
use recap_core::decoder::{CheckpointError, DecoderError};
use recap_core::pipeline::PipelineError;
use recap_core::prompting::PromptError;
use thiserror::Error;

/// Command failure, grouped by the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data format error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Parse { .. } | CorpusError::DuplicateId(_) => CliError::Data(e.to_string()),
            CorpusError::Io(e) => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<DatastoreError> for CliError {
    fn from(e: DatastoreError) -> Self {
        match e {
            DatastoreError::DimMismatch { .. } | DatastoreError::ConfigMismatch | DatastoreError::ZeroK => {
                CliError::Config(e.to_string())
            }
            DatastoreError::Io(e) => e.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DecoderError> for CliError {
    fn from(e: DecoderError) -> Self {
        match e {
            DecoderError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            DecoderError::InvalidConfig(_) | DecoderError::TooLong { .. } => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Decoder(e) => e.into(),
            CheckpointError::Io(e) => e.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Decoder(e) => e.into(),
            PipelineError::Datastore(e) => e.into(),
            PipelineError::Prompt(PromptError::EncoderMismatch) => CliError::Config(e.to_string()),
            PipelineError::Prompt(PromptError::Datastore(e)) => e.into(),
            PipelineError::ZeroK | PipelineError::CaptionTooLong { .. } => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}
