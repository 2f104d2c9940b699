use thiserror::Error;

/// Errors surfaced by any layer of the framework.
#[derive(Error, Debug)]
pub enum CunetError {
    /// A tensor operation was called with inconsistent shapes. The message
    /// names the offending axis or operand.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation would produce a tensor with a zero-size extent.
    #[error("empty output in {op}: {detail}")]
    EmptyOutput { op: &'static str, detail: String },

    /// A scalar argument was outside its admissible range.
    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// Autodiff preconditions violated (non-scalar loss, non-finite loss, ...).
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// Network/graph construction or configuration problem.
    #[error("graph error: {0}")]
    Graph(String),

    /// Label volume contained a value outside {{0, 1, 2, 4}}.
    #[error("invalid label value {value} at voxel index {index}")]
    InvalidLabel { value: u8, index: usize },

    /// Binary container parsing/serialization failure.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Parameter store mismatch on load; lists every offending name.
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    /// Training aborted (non-finite loss or gradient); carries diagnostics.
    #[error("training aborted: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CunetError>;
