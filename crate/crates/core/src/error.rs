use std::fmt;

use thiserror::Error;

/// What went wrong while parsing the graph text format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    MalformedHeader(String),
    UnexpectedEof(&'static str),
    FieldCount { expected: usize, found: usize },
    BadNumber(String),
    EndpointOutOfRange { u: usize, v: usize, n: usize },
    SelfLoop(usize),
    UnorderedEdge { u: usize, v: usize },
    DuplicateEdge { u: usize, v: usize },
    RowLength { expected: usize, found: usize },
    LabelOutOfRange { label: i64, d: usize },
    TrailingData,
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
}

impl ParseError {
    pub fn new(line: usize, kind: ParseErrorKind) -> Self {
        ParseError { line, kind }
    }
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::MalformedHeader(h) => {
                write!(f, "malformed header {h:?}, expected `N M F d`")
            }
            ParseErrorKind::UnexpectedEof(what) => write!(f, "unexpected end of file, expected {what}"),
            ParseErrorKind::FieldCount { expected, found } => {
                write!(f, "expected {expected} fields, found {found}")
            }
            ParseErrorKind::BadNumber(tok) => write!(f, "cannot parse number {tok:?}"),
            ParseErrorKind::EndpointOutOfRange { u, v, n } => {
                write!(f, "edge ({u},{v}) out of range for {n} nodes")
            }
            ParseErrorKind::SelfLoop(u) => write!(f, "self-loop on node {u}"),
            ParseErrorKind::UnorderedEdge { u, v } => write!(f, "edge ({u},{v}) must satisfy u < v"),
            ParseErrorKind::DuplicateEdge { u, v } => write!(f, "duplicate edge ({u},{v})"),
            ParseErrorKind::RowLength { expected, found } => {
                write!(f, "signal row has {found} values, expected {expected}")
            }
            ParseErrorKind::LabelOutOfRange { label, d } => {
                write!(f, "label {label} outside 0..{d}")
            }
            ParseErrorKind::TrailingData => write!(f, "unexpected trailing data"),
            ParseErrorKind::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("self-loop on node {node}")]
    SelfLoop { node: usize },
    #[error("duplicate edge ({u},{v})")]
    DuplicateEdge { u: usize, v: usize },
    #[error("edge ({u},{v}) out of range for {n_nodes} nodes")]
    EndpointOutOfRange { u: usize, v: usize, n_nodes: usize },
    #[error("node {node} out of range for {n_nodes} nodes")]
    InvalidNode { node: usize, n_nodes: usize },
    #[error("ego radius must be at least 1")]
    InvalidRadius,
    #[error("graph {index} has signal dimension {found}, expected {expected}")]
    SignalDimMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("dense eigendecomposition limited to {cap} nodes, got {n}; use the Lanczos solver")]
    SizeCapExceeded { n: usize, cap: usize },
    #[error("requested {k} eigenpairs for an operator of size {n}; need 1 <= k < n")]
    InvalidK { k: usize, n: usize },
    #[error("Lanczos did not converge: {converged} of {k} eigenpairs after {restarts} restarts")]
    NoConvergence {
        k: usize,
        converged: usize,
        restarts: usize,
    },
    #[error("QL iteration did not converge for eigenvalue {index}")]
    QlNoConvergence { index: usize },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("truncation to {k} components out of range 1..={available}")]
    TruncateOutOfRange { k: usize, available: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {found:?}")]
    Shape {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("loss is not finite ({value})")]
    NonFiniteLoss { value: f64 },
    #[error("zero-norm vector in cosine similarity ({context})")]
    ZeroNorm { context: &'static str },
    #[error("readout of an empty graph")]
    EmptyGraph,
    #[error("aligned forward requires frozen pre-trained parameters")]
    NotFrozen,
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("batch of {requested} needs more than the {available} available centers")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("graph too sparse to sample {needed} non-adjacent pairs")]
    TooSparse { needed: usize },
    #[error("rate {rate} must lie in {range}")]
    InvalidRate { rate: f64, range: &'static str },
    #[error("no labeled nodes in the training split")]
    MissingLabels,
    #[error("invalid training input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("roc_auc needs both classes present")]
    SingleClass,
    #[error("signal must have unit norm (|x| = {norm})")]
    NotNormalized { norm: f64 },
    #[error("component {index} outside 0..{k}")]
    ComponentOutOfRange { index: usize, k: usize },
    #[error("signal length {found} does not match basis size {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("graph has no node labels")]
    Unlabeled,
    #[error("class {class} has {available} nodes, need {needed}")]
    ClassTooSmall {
        class: usize,
        available: usize,
        needed: usize,
    },
    #[error("need {needed} classes, graph has {available}")]
    TooFewClasses { needed: usize, available: usize },
    #[error("invalid split: {0}")]
    Invariant(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("missing array {0:?}")]
    MissingArray(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected section.key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Top-level error carrying the pipeline stage that failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Graph(GraphError::Io { .. }) | Error::Checkpoint(CheckpointError::Io { .. }) | Error::Io(_) => 3,
            Error::Graph(_) => 4,
            Error::Spectral(_) => 5,
            Error::Model(_) => 6,
            Error::Train(_) => 7,
            Error::Metric(_) => 8,
            Error::Split(_) => 9,
            Error::Checkpoint(_) => 10,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
