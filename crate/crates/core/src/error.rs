use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("query error: {0}")]
    Query(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A set of offending configuration keys, collected before any output is written.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub issues: Vec<(String, String)>,
}

impl ValidationError {
    pub fn push(&mut self, key: impl Into<String>, msg: impl Into<String>) {
        self.issues.push((key.into(), msg.into()));
    }

    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(self))
        }
    }

    pub fn keys(&self) -> Vec<&str> {
        self.issues.iter().map(|(k, _)| k.as_str()).collect()
    }
}

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration:")?;
        for (key, msg) in &self.issues {
            write!(f, " [{key}: {msg}]")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}
