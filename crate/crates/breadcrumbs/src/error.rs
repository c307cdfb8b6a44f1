use thiserror::Error;

/// Crate-wide error type.  Fine-grained enough that tests can match on the
/// failure class without string-grepping.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward() expects a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward() already consumed this tape")]
    BackwardConsumed,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("sampling distribution has no admissible token (all logits masked)")]
    AllMasked,

    #[error("temperature must be >= 0 and finite, got {0}")]
    BadTemperature(f32),

    #[error("tokenizer: no token covers input at byte {at}: {snippet:?}")]
    Untokenizable { at: usize, snippet: String },

    #[error("unknown token id {0}")]
    UnknownTokenId(u32),

    #[error("kv cache: {0}")]
    Cache(String),

    #[error("generation: {0}")]
    Generation(String),

    #[error("task generation: {0}")]
    Task(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training: {0}")]
    Training(String),

    #[error("eval: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
