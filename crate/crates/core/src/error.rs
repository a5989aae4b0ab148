use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected dimension {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("infeasible privacy budget{}: c_target = {c_target} exceeds 1/4", location(*.round, *.client))]
    InfeasibleBudget { c_target: f64, round: Option<usize>, client: Option<usize> },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn location(round: Option<usize>, client: Option<usize>) -> String {
    match (round, client) {
        (Some(t), Some(k)) => format!(" for client {k} at round {t}"),
        (None, Some(k)) => format!(" for client {k}"),
        (Some(t), None) => format!(" at round {t}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub fn shape(expected: usize, got: usize) -> Self {
        Error::Shape { expected, got }
    }

    /// Attaches round/client context to an infeasible-budget error.
    pub fn at(self, round: usize, client: usize) -> Self {
        match self {
            Error::InfeasibleBudget { c_target, .. } => {
                Error::InfeasibleBudget { c_target, round: Some(round), client: Some(client) }
            }
            other => other,
        }
    }
}
