// SPDX-License-Identifier: Apache-2.0

use std::io;

use thiserror::Error;

use crate::trace::Violation;

/// Binary container decoding failures. Each variant is a distinct failure class.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },
    #[error("file truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("model hash mismatch: stored {stored}, recomputed {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid trace: {} violation(s), first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    InvalidTrace(Vec<Violation>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("context overflow: need {needed} positions, model allows {limit}")]
    ContextOverflow { needed: usize, limit: usize },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end: 2 for validation
    /// problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidTrace(_) | Error::Dimension(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
