use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss after perturbing `{param}`[{index}] by {delta:e}")]
    NonFiniteLoss {
        param: String,
        index: usize,
        delta: f64,
    },
    #[error("invalid gaussian sequence: {0}")]
    InvalidDistribution(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid diffusion schedule: {0}")]
    Schedule(String),
    #[error("non-finite diffusion state at step {step}")]
    DiffusionDiverged { step: usize },
    #[error("training diverged in stage {stage} at step {step}")]
    Diverged { stage: &'static str, step: usize },
    #[error("model is at stage `{have}`, `{need}` is required")]
    Untrained {
        have: &'static str,
        need: &'static str,
    },
    #[error("horizon mismatch: {0} vs {1}")]
    Horizon(usize, usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("unknown scene group `{name}`; available: {available:?}")]
    UnknownGroup {
        name: String,
        available: Vec<String>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;
