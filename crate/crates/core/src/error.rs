use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bitwidth {0} out of range (supported: 2..=8)")]
    Bitwidth(u32),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid multiplier `{name}`: {reason}")]
    InvalidMultiplier { name: String, reason: String },

    #[error("library line {line}: {msg}")]
    LibraryParse { line: usize, msg: String },

    #[error("library entry `{entry}` (line {line}): expected {expected} {what}, found {found}")]
    DimensionMismatch {
        entry: String,
        line: usize,
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("library entry `{entry}` (line {line}): table entry {value} out of range (max {max})")]
    EntryOutOfRange {
        entry: String,
        line: usize,
        value: i64,
        max: u64,
    },

    #[error("duplicate multiplier name `{name}` (line {line})")]
    DuplicateName { name: String, line: usize },

    #[error("unknown multiplier `{0}`")]
    UnknownMultiplier(String),

    #[error("empty tensor")]
    EmptyTensor,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("model not prepared: layer {0} has no quantization parameters")]
    Unprepared(usize),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid assignment: {0}")]
    Assignment(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("probabilities do not sum to one (sum = {0})")]
    Probabilities(f64),

    #[error("no candidate multipliers for layer {layer} ({bits_a}x{bits_b})")]
    NoCandidates { layer: usize, bits_a: u8, bits_b: u8 },

    #[error("full hessian infeasible for {bits_a}x{bits_b} ({entries} error entries > 4096)")]
    HessianInfeasible { bits_a: u8, bits_b: u8, entries: usize },

    #[error("infeasible energy budget {requested}: minimum achievable ratio is {minimum}")]
    Infeasible { requested: f64, minimum: f64 },

    #[error("instance too large for exhaustive enumeration ({0} assignments)")]
    TooLarge(u128),

    #[error("calibration diverged after {restarts} learning-rate halvings (loss {loss} vs initial {initial})")]
    Diverged {
        restarts: usize,
        loss: f64,
        initial: f64,
    },

    #[error("dataset {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error("dataset {path}: truncated at byte offset {offset} (expected {expected} bytes)")]
    Truncated {
        path: PathBuf,
        offset: usize,
        expected: usize,
    },

    #[error("model file: unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("model file: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("model file: blob size mismatch in layer {layer} `{blob}`: expected {expected}, found {found}")]
    BlobSize {
        layer: usize,
        blob: String,
        expected: usize,
        found: usize,
    },

    #[error("model file: {0}")]
    ModelFile(String),

    #[error("table file line {line}: {msg}")]
    TableParse { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{stage} stage")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attribute an error to a pipeline stage.
    pub fn in_stage(self, stage: &'static str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    /// The underlying error with stage attribution removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
