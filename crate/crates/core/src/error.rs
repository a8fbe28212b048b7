use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in `{op}` at node {node}: {detail}")]
    Shape {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward requires a scalar output, node {node} has shape {rows}x{cols}")]
    NotScalar { node: usize, rows: usize, cols: usize },
    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("at t={t}, entity {entity}: {source}")]
    AtStep {
        t: usize,
        entity: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for non-finite values, including those wrapped with a step.
    pub fn is_non_finite(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::AtStep { source, .. } => source.is_non_finite(),
            _ => false,
        }
    }

    pub(crate) fn at_step(self, t: usize, entity: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                t,
                entity,
                source: alloc::boxed::Box::new(e),
            },
        }
    }
}
