//! Error type shared by every module in the crate.
//!
//! Variants map onto the CLI exit-code taxonomy: config errors exit 2,
//! numeric divergence exits 3, io/missing-file errors exit 4.

use std::fmt;

pub type Result<T> = std::result::Result<T, CkbError>;

#[derive(Debug, Clone, PartialEq)]
pub enum CkbError {
    /// Tensor shapes do not satisfy an operation's contract.
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// A row (or value) too close to zero for a normalized quantity.
    DegenerateInput { op: &'static str, row: usize },
    /// Misuse of stateful machinery (tape reuse, optimizer state mismatch).
    State(String),
    /// A non-finite value appeared where the contract requires finite math.
    Numeric { op: String, detail: String },
    /// Invalid run configuration (bad key, bad value, bad dimensions).
    Config(String),
    /// Bad user data: empty corpus, out-of-range label, ragged grid.
    Input(String),
    /// Token id outside the vocabulary.
    Vocab { id: usize, vocab_size: usize },
    /// Interface bound to a signature of the wrong level, or kb mismatch.
    Binding(String),
    /// Filesystem problems and malformed artifact files.
    Io(String),
    /// A checkpoint failed its magic or checksum validation.
    CorruptFile { path: String, detail: String },
    /// Malformed text data row.
    Parse { line: usize, detail: String },
    /// Label outside the configured class range.
    Label { got: String, classes: usize },
}

impl CkbError {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            CkbError::Config(_) => 2,
            CkbError::Numeric { .. } => 3,
            CkbError::Io(_) | CkbError::CorruptFile { .. } => 4,
            _ => 2,
        }
    }

    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        CkbError::Shape {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}

impl fmt::Display for CkbError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CkbError::Shape { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected}, got {got}")
            }
            CkbError::DegenerateInput { op, row } => {
                write!(f, "{op}: row {row} has near-zero norm")
            }
            CkbError::State(s) => write!(f, "state error: {s}"),
            CkbError::Numeric { op, detail } => write!(f, "non-finite value in {op}: {detail}"),
            CkbError::Config(s) => write!(f, "config error: {s}"),
            CkbError::Input(s) => write!(f, "input error: {s}"),
            CkbError::Vocab { id, vocab_size } => {
                write!(f, "token id {id} outside vocabulary of size {vocab_size}")
            }
            CkbError::Binding(s) => write!(f, "binding error: {s}"),
            CkbError::Io(s) => write!(f, "io error: {s}"),
            CkbError::CorruptFile { path, detail } => {
                write!(f, "corrupt file {path}: {detail}")
            }
            CkbError::Parse { line, detail } => write!(f, "parse error at line {line}: {detail}"),
            CkbError::Label { got, classes } => {
                write!(f, "label {got} outside class range 0..{classes}")
            }
        }
    }
}

impl std::error::Error for CkbError {}

impl From<std::io::Error> for CkbError {
    fn from(e: std::io::Error) -> Self {
        CkbError::Io(e.to_string())
    }
}
