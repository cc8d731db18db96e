// Copyright 2026 The lzms Authors
// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    /// The closed-form 2x2 angles are singular; use the degenerate-branch construction.
    #[error("closed-form rotation is singular (D or E vanishes); degenerate branch required")]
    DegenerateBranch,

    #[error("no noise-free transfer possible: {0}")]
    NoNoiseFreeTransfer(String),

    #[error("integration failed at t = {time}: step size underflow")]
    StepUnderflow { time: f64 },

    #[error("integration failed at t = {time}: non-finite state")]
    NonFinite { time: f64 },

    #[error("config error in key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn shape(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// True for failures that come from the numerics rather than the inputs.
    /// A propagated state that drifts out of the density-matrix set counts.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::StepUnderflow { .. } | Error::NonFinite { .. } | Error::InvalidState(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
