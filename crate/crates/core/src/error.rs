use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown class id {0}")]
    UnknownClass(u8),

    #[error("contours cross on scan line {scan_line}: inner radius {inner} > outer radius {outer}")]
    CrossingContours { scan_line: usize, inner: u16, outer: u16 },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("class {0} is absent from every training label map")]
    MissingClass(u8),
    #[error("topology failure on scan line {scan_line}: {reason}")]
    TopologyFailure { scan_line: usize, reason: String },

    #[error("delta {delta} at scan line {scan_line} is outside the chain-code alphabet")]
    UnencodableDelta { scan_line: usize, delta: i32 },
    #[error("radius {radius} leaves [0, {max}] at scan line {scan_line}")]
    RangeViolation { scan_line: usize, radius: i64, max: u16 },
    #[error("contour does not close: last radius {last}, start radius {start}")]
    ClosureViolation { start: u16, last: u16 },

    #[error("bad magic {found:?} at offset 0")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {version} at offset 4")]
    UnsupportedVersion { version: u8 },
    #[error("truncated file: need {needed} more byte(s) at offset {offset}")]
    TruncatedFile { offset: usize, needed: usize },
    #[error("invalid field at offset {offset}: {reason}")]
    InvalidField { offset: usize, reason: String },
    #[error("non-canonical padding symbol at offset {offset}")]
    BadPadding { offset: usize },
    #[error("checksum mismatch at offset {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { offset: usize, stored: u32, computed: u32 },
    #[error("{extra} trailing byte(s) after offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },

    #[error("histograms use different binnings")]
    BinningMismatch,
    #[error("class {class} covers {count} pixel(s), need at least {required}")]
    InsufficientPixels { class: u8, count: usize, required: usize },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("infeasible phantom spec: {0}")]
    InfeasibleSpec(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }
}
