//! Commands behind the `finder` binary.
//!
//! Exit codes: 0 success, 1 input or I/O problem (including an empty corpus
//! or index), 2 invalid configuration or schema, 3 model gateway failure,
//! 4 an answer that could not be parsed where no fallback exists.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use thiserror::Error;

use finder_core::corpus::CorpusError;
use finder_core::ebr_filter::{FilterError, OracleError};
use finder_core::evaluation::EvalError;
use finder_core::llm_gateway::GatewayError;
use finder_core::pipeline::{AbortCause, OutputError, PipelineError};
use finder_core::vector_index::IndexError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("no documents could be ingested")]
    EmptyCorpus,
    #[error("{0}")]
    Input(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn gateway_code(e: &GatewayError) -> i32 {
    match e {
        GatewayError::Parse(_) => 4,
        GatewayError::Config(_) | GatewayError::MissingSlot { .. } | GatewayError::UnknownTemplate(_) => 2,
        GatewayError::Io(_) => 1,
        _ => 3,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::EmptyCorpus | CliError::Input(_) | CliError::Io { .. } | CliError::Output(_) => 1,
            CliError::Config(_) => 2,
            CliError::Corpus(CorpusError::InvalidPolicy(_)) => 2,
            CliError::Corpus(_) => 1,
            CliError::Index(IndexError::Provider(_)) => 3,
            CliError::Index(_) => 1,
            CliError::Gateway(e) => gateway_code(e),
            CliError::Pipeline(e) => match e {
                PipelineError::EmptyIndex => 1,
                PipelineError::Config(_) => 2,
                PipelineError::Aborted { cause, .. } => match cause {
                    AbortCause::Gateway(g) => gateway_code(g),
                    AbortCause::Filter(FilterError::Oracle { source, .. }) => match source {
                        OracleError::Gateway(g) => gateway_code(g),
                        OracleError::Io(_) => 1,
                    },
                    AbortCause::Filter(_) => 1,
                    AbortCause::Index(IndexError::Provider(_)) => 3,
                    AbortCause::Index(_) => 1,
                },
            },
            CliError::Eval(EvalError::Schema { .. }) => 2,
            CliError::Eval(_) => 1,
        }
    }
}
