use std::path::Path;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unknown names or inconsistent inputs: exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {0}")]
    Format(String),
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error(transparent)]
    Core(#[from] mdvc_core::Error),
    #[error(transparent)]
    Train(#[from] mdvc_core::train::TrainFailure),
    #[error("{0} of {1} verification checks failed")]
    Verification(usize, usize),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if is_usage(e) => 2,
            _ => 1,
        }
    }
}

fn is_usage(e: &mdvc_core::Error) -> bool {
    use mdvc_core::Error::*;
    matches!(
        e,
        UnknownSpeaker(_) | UnknownSpeakerName(_) | Config(_) | EmptySpeakerSet | VariantMismatch { .. }
    )
}
