use thiserror::Error;

/// Errors surfaced by the estimation and simulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("netgraph: {0}")]
    Network(String),

    #[error("structsim: {0}")]
    Simulation(String),

    #[error("dgp: {0}")]
    Dgp(String),

    #[error("gmm: {0}")]
    Gmm(String),

    #[error("varcomp: {0}")]
    VarComp(String),

    #[error("diagnostics: {0}")]
    Diagnostics(String),

    #[error("counterfactual: {0}")]
    Counterfactual(String),

    #[error("netform: {0}")]
    NetForm(String),

    #[error("cli: {0}")]
    Cli(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
