use std::fmt;

use traffic_lm::ErrorKind;

/// A failure tagged with the operation that raised it.
#[derive(Debug)]
pub struct CliError {
    pub op: String,
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(op: &str, message: impl Into<String>) -> Self {
        Self { op: op.to_string(), kind: ErrorKind::Config, message: message.into() }
    }

    pub fn data(op: &str, message: impl Into<String>) -> Self {
        Self { op: op.to_string(), kind: ErrorKind::Data, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Divergence => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.op, self.message)
    }
}

/// Wraps a library error with the name of the failing operation.
pub fn at<E: Into<traffic_lm::Error>>(op: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| {
        let e: traffic_lm::Error = e.into();
        CliError { op: op.to_string(), kind: e.kind(), message: e.to_string() }
    }
}
