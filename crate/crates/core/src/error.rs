use thiserror::Error;

/// Crate-wide error type. Variants are fine-grained enough for callers to
/// distinguish recoverable conditions (label parse failures, undefined
/// correlations) from hard faults (transport, checkpoint corruption).
#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("record {id}: {msg}")]
    Validation { id: String, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("sequence of {len} positions exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence was tokenized with vocabulary {found}, model expects {expected}")]
    VocabMismatch { expected: String, found: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("jacobian is numerically zero; pseudo-inverse undefined")]
    DegenerateJacobian,

    #[error("token sequence is empty")]
    EmptyTokenSequence,

    #[error("saliency maps have different lengths ({a} vs {b})")]
    MapLengthMismatch { a: usize, b: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("could not parse a label from reply {reply:?}: {reason}")]
    LabelParse { reply: String, reason: String },

    #[error("transport failure after {attempts} attempts: {detail}")]
    Transport { attempts: u32, detail: String },

    #[error("endpoint returned status {status}: {body}")]
    Endpoint { status: u16, body: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
