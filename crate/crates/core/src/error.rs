use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("backward already ran on this tape; reset it before another pass")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("channel config has {got} entries, architecture expects {expected}")]
    ConfigLength { expected: usize, got: usize },

    #[error("latent {0} is not prunable")]
    NotPrunable(usize),

    #[error("layer group {group} (`{name}`) would keep no channels")]
    EmptyLayer { group: usize, name: String },

    #[error("infeasible budget: target {target} FLOPs is below the floor configuration's {floor_flops} FLOPs")]
    InfeasibleBudget { target: u64, floor_flops: u64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument { name, reason: reason.into() }
    }
}
