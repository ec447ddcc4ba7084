use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("page {0} is not owned by the attacker")]
    Ownership(String),

    #[error("out of memory: no free page frame for victim allocation")]
    OutOfMemory,

    #[error("massage plan rejected: {0}")]
    Plan(String),

    #[error("victim model is not placed in memory")]
    Placement,

    #[error("index out of range: {0}")]
    Index(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A leaked bit disagreed with an earlier observation. This can only happen
    /// when the physical-to-logical mapping is wrong, so the run must stop.
    #[error("simulation integrity fault: {0}")]
    Integrity(String),

    #[error("malformed input at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("invalid configuration:{}", render_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error("stage `{stage}` failed (config {config_hash}): {source}")]
    Stage {
        stage: &'static str,
        config_hash: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            line,
            message: message.into(),
        }
    }
}

/// One problem found while validating a configuration file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

fn render_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(|i| format!("\n  {i}")).collect()
}
