use std::io;

use thiserror::Error;

use crate::TxnId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("lock wait timed out, transaction {0} must abort")]
    DeadlockTimeout(TxnId),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("transaction {0} is not active")]
    StaleTransaction(TxnId),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("trigger {trigger} failed: {reason}")]
    TriggerFailed { trigger: u64, reason: String },
    #[error("unrecoverable log: {0}")]
    Corrupt(String),
    #[error("engine is in failed state: {0}")]
    Failed(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    /// An error reported by a broker, with its original message.
    #[error("{message}")]
    Remote { code: ErrorCode, message: String },
}

/// Numeric error codes shared by the wire protocol, the CLI and the C ABI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    NotFound = 1,
    Exists = 2,
    Unavailable = 3,
    Timeout = 4,
    Usage = 5,
    Internal = 6,
}

impl ErrorCode {
    pub fn from_u16(code: u16) -> Option<Self> {
        Some(match code {
            1 => Self::NotFound,
            2 => Self::Exists,
            3 => Self::Unavailable,
            4 => Self::Timeout,
            5 => Self::Usage,
            6 => Self::Internal,
            _ => return None,
        })
    }
}

impl Error {
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::NotFound(_) => ErrorCode::NotFound,
            Error::AlreadyExists(_) => ErrorCode::Exists,
            Error::Unavailable(_) | Error::Failed(_) => ErrorCode::Unavailable,
            Error::DeadlockTimeout(_) | Error::Timeout(_) => ErrorCode::Timeout,
            Error::StaleTransaction(_) | Error::Usage(_) => ErrorCode::Usage,
            Error::TriggerFailed { .. } | Error::Corrupt(_) | Error::Io(_) => ErrorCode::Internal,
            Error::Remote { code, .. } => *code,
        }
    }

    /// Rebuilds an error received as a code and message from a remote peer.
    pub fn from_code(code: ErrorCode, msg: String) -> Self {
        match code {
            ErrorCode::NotFound => Error::NotFound(msg),
            ErrorCode::Exists => Error::AlreadyExists(msg),
            ErrorCode::Unavailable => Error::Unavailable(msg),
            ErrorCode::Timeout => Error::Timeout(msg),
            ErrorCode::Usage => Error::Usage(msg),
            ErrorCode::Internal => Error::Io(io::Error::other(msg)),
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip() {
        for c in 1..=6u16 {
            assert_eq!(ErrorCode::from_u16(c).unwrap() as u16, c);
        }
        assert!(ErrorCode::from_u16(0).is_none());
        assert!(ErrorCode::from_u16(7).is_none());
    }

    #[test]
    fn error_maps_to_code() {
        assert_eq!(Error::NotFound("q".into()).code(), ErrorCode::NotFound);
        assert_eq!(Error::DeadlockTimeout(TxnId(3)).code(), ErrorCode::Timeout);
        assert_eq!(Error::StaleTransaction(TxnId(3)).code(), ErrorCode::Usage);
    }
}
