use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid input to {op}: {reason}")]
    Input { op: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("unknown probe point `{0}`")]
    UnknownProbePoint(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("at node `{node}`: {source}")]
    AtNode {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parameter mismatch: {0}")]
    ParameterMismatch(String),

    #[error("model loss became non-finite at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("probe training for `{point}` produced a non-finite loss at epoch {epoch}")]
    ProbeDiverged { point: String, epoch: usize },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("conditional entropy ordering violated at k = {k}: {previous} > {current}")]
    Ordering {
        k: usize,
        previous: f64,
        current: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("IDX file {path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("records line {line}: {reason}")]
    Records { line: u64, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing data file {0}")]
    MissingData(PathBuf),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Input {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn at_node(self, node: &str) -> Self {
        match self {
            e @ Error::AtNode { .. } => e,
            e => Error::AtNode {
                node: node.to_string(),
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingData(path)
        } else {
            Error::File { path, source }
        }
    }

    /// True for errors caused by absent input files or unreadable configs.
    pub fn is_missing_input(&self) -> bool {
        matches!(
            self,
            Error::MissingData(_) | Error::Config(_) | Error::Json(_) | Error::Idx { .. }
        )
    }

    /// Errors that signal a broken internal invariant rather than bad input
    /// or a failed system call.
    pub fn is_invariant_violation(&self) -> bool {
        match self {
            Error::AtNode { source, .. } => source.is_invariant_violation(),
            Error::Shape { .. }
            | Error::Input { .. }
            | Error::NonFinite(_)
            | Error::UnknownNode(_)
            | Error::UnknownProbePoint(_)
            | Error::Graph(_)
            | Error::ParameterMismatch(_)
            | Error::ProbeDiverged { .. }
            | Error::Ordering { .. }
            | Error::Checkpoint(_)
            | Error::Records { .. } => true,
            _ => false,
        }
    }
}
