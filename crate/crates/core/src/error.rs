use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Vector or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A user-supplied configuration value is invalid.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss at epoch {epoch}, sample {sample_id}: {value}")]
    NonFiniteLoss {
        epoch: usize,
        sample_id: u64,
        value: f64,
    },

    /// A file exists but its contents do not follow the expected layout.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 user/config, 3 IO/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_) | Error::Shape(_) | Error::Config { .. } => 2,
            Error::Format { .. } | Error::Io { .. } => 3,
            Error::NonFiniteLoss { .. } => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_contract() {
        assert_eq!(Error::domain("x").exit_code(), 2);
        assert_eq!(Error::shape("x").exit_code(), 2);
        assert_eq!(Error::config("a", "b").exit_code(), 2);
        assert_eq!(Error::format("p", "b").exit_code(), 3);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(Error::io("p", io).exit_code(), 3);
        let nf = Error::NonFiniteLoss {
            epoch: 1,
            sample_id: 2,
            value: f64::NAN,
        };
        assert_eq!(nf.exit_code(), 4);
    }
}
