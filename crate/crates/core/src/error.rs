//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands disagree on shape. Carries the full shape report so the
    /// caller can see both sides.
    #[error("shape mismatch in {op}: left {left_rows}x{left_cols}, right {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("bad dimensions: {0}")]
    BadDimensions(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("neuron out of range for this model: {0}")]
    InvalidNeuron(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence of {0} token(s) is too short; need at least 2")]
    SequenceTooShort(usize),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("need at least 2 languages, got {0}")]
    TooFewLanguages(usize),

    /// A metric whose denominator vanished. Reported distinctly from zero.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("requested {requested} random neurons but only {available} are eligible")]
    NotEnoughNeurons { requested: usize, available: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("malformed weight container: {0}")]
    Container(String),

    #[error("malformed neuron set file: {0}")]
    NeuronSetFormat(String),

    #[error("config hash mismatch: file says {found}, model says {expected}")]
    ConfigHashMismatch { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
