use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("unknown viewpoint {viewpoint} in scene {scene}")]
    UnknownViewpoint { scene: String, viewpoint: u32 },

    #[error("unknown scene {0}")]
    UnknownScene(String),

    #[error("unknown episode {0}")]
    UnknownEpisode(String),

    #[error("invalid scene {scene}: {reason}")]
    InvalidScene { scene: String, reason: String },

    #[error("invalid episode {episode}: {reason}")]
    InvalidEpisode { episode: String, reason: String },

    #[error("action index {index} out of range for {count} candidates")]
    ActionOutOfRange { index: usize, count: usize },

    #[error("unknown token id {token} (vocabulary size {vocab})")]
    UnknownToken { token: u32, vocab: usize },

    #[error("instruction of length {len} exceeds maximum {max}")]
    InstructionTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at iteration {iteration}: il={il} rl={rl} attn={attn}")]
    NonFiniteLoss {
        iteration: usize,
        il: f64,
        rl: f64,
        attn: f64,
    },

    #[error("snapshot format: {0}")]
    SnapshotFormat(String),

    #[error("snapshot checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("unknown snapshot id {0}")]
    UnknownSnapshot(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("episode sets differ: {0}")]
    EpisodeMismatch(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
