use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },

    #[error("embedding file format: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("row {row} has (near) zero norm and cannot be normalized")]
    DegenerateRow { row: usize },

    #[error("invalid lexicon entry {entry:?}: {reason}")]
    Lexicon { entry: String, reason: &'static str },

    #[error("concept {0:?} is not in the archive")]
    UnknownConcept(String),

    #[error("no embedding for concept {concept:?} (prompted as {prompt:?})")]
    MissingEmbedding { concept: String, prompt: String },

    #[error("archive for {0:?} has not been ranked")]
    Unscored(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("multi-label loss is undefined: no sample carries a label")]
    UndefinedLoss,

    #[error("id mismatch at record {index}: {left:?} vs {right:?}")]
    IdMismatch {
        index: usize,
        left: String,
        right: String,
    },

    #[error("anchor {anchor:?} failed during {stage}: {source}")]
    Stage {
        anchor: String,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, anchor: &str, stage: &'static str) -> Self {
        Error::Stage {
            anchor: anchor.to_owned(),
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code for the command-line front end: 2 for broken internal
    /// invariants, 1 for everything caused by inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Invariant("x".into()).exit_code(), 2);
        assert_eq!(Error::UndefinedLoss.exit_code(), 1);
        let wrapped = Error::Invariant("x".into()).at_stage("p0", "sampling");
        assert_eq!(wrapped.exit_code(), 2);
        assert!(wrapped.to_string().contains("p0"));
        assert_eq!(Error::UndefinedLoss.at_stage("p0", "ranking").exit_code(), 1);
    }
}
