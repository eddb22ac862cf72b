//! Project-specific shortcut learning in neural code models, at desk scale.
//!
//! The crate generates a synthetic MiniLang corpus whose user-defined names
//! correlate with labels inside training projects, trains a small classifier
//! with exact hand-written gradients, measures its reliance on those names
//! with integrated gradients and Cond-Idf, and mitigates it with batch
//! partition regularization (BPR) alongside four baseline debiasing methods.

pub mod lang;
pub mod corpus;
pub mod model;
pub mod attribution;
pub mod biasmetrics;
pub mod simbpr;
pub mod debias;
pub mod harness;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Lex(#[from] lang::LexError),
    #[error(transparent)]
    Parse(#[from] lang::ParseError),
    #[error(transparent)]
    NotADeclaration(#[from] lang::NotADeclaration),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Metrics(#[from] biasmetrics::MetricsError),
    #[error(transparent)]
    Debias(#[from] debias::DebiasError),
    #[error(transparent)]
    Sim(#[from] simbpr::SimError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
