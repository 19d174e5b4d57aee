use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("check failed: {0}")]
    Assertion(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Refused(_) => 3,
            CliError::Assertion(_) => 4,
        }
    }
}

impl From<magrt::Error> for CliError {
    fn from(e: magrt::Error) -> Self {
        use magrt::Error as E;
        match e {
            E::Invalid(_) | E::Expr { .. } | E::Domain(_) => CliError::Config(e.to_string()),
            E::NonSimple(_) | E::NoConvergence(_) | E::Refused(_) | E::Singular(_) | E::Degenerate(_) => {
                CliError::Refused(e.to_string())
            }
        }
    }
}
