use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("kernel of width {kernel} exceeds padded input of {padded} frames")]
    KernelTooLarge { kernel: usize, padded: usize },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("unknown speaker index {0}")]
    UnknownSpeaker(usize),
    #[error("unknown speaker name {0:?}")]
    UnknownSpeakerName(String),
    #[error("model has no critic for speaker {0}")]
    MissingCritic(usize),
    #[error("speaker set is empty")]
    EmptySpeakerSet,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid corpus: {0}")]
    Corpus(String),
    #[error("utterance {utt} has {frames} frames, shorter than crop of {crop}")]
    UtteranceTooShort {
        utt: String,
        frames: usize,
        crop: usize,
    },
    #[error("cepstral dimension {0} has zero variance")]
    ZeroVariance(usize),
    #[error("expected {expected}-dimensional features, got {got}")]
    FeatureDim { expected: usize, got: usize },
    #[error("sequence of {frames} frames is too short for a {segment}-frame segment")]
    TooShort { frames: usize, segment: usize },
    #[error("empty input")]
    Empty,
    #[error("model variant {found} does not match expected {expected}")]
    VariantMismatch { expected: String, found: String },
}
