use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate distribution")]
    DegenerateDistribution,
    #[error("probability domain: value {0} outside (0, 1)")]
    ProbabilityDomain(f64),
    #[error("kernel exceeds feature ({kernel} > {feature})")]
    KernelExceedsFeature { kernel: usize, feature: usize },
    #[error("box does not intersect the feature extent")]
    OutsideExtent,
    #[error("malformed input: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
