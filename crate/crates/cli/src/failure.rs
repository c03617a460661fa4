//! Exit-code classification.

use std::fmt;

pub const EXIT_IO: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_TOLERANCE: i32 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: i32, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn input(msg: impl fmt::Display) -> Self {
        Self::new(EXIT_INPUT, anyhow::anyhow!("{msg}"))
    }

    pub fn numerical(msg: impl fmt::Display) -> Self {
        Self::new(EXIT_NUMERICAL, anyhow::anyhow!("{msg}"))
    }

    pub fn io(e: std::io::Error) -> Self {
        Self::new(EXIT_IO, e)
    }
}

/// Exit code for a library error.
pub fn classify(e: &nlsdof::Error) -> i32 {
    use nlsdof::Error::*;
    match e {
        Dimension(_) | NonFinite(_) | Config(_) | Index(_) | Unsupported(_) | State(_) => {
            EXIT_INPUT
        }
        LogDomain(_)
        | Rank { .. }
        | Precondition(_)
        | NonUnique
        | Divergence(_)
        | Oracle(_)
        | Study(_) => EXIT_NUMERICAL,
    }
}

impl From<nlsdof::Error> for Failure {
    fn from(e: nlsdof::Error) -> Self {
        Self::new(classify(&e), e)
    }
}

/// Errors from parsing and configuration.
impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error
            .downcast_ref::<nlsdof::Error>()
            .map_or(EXIT_INPUT, classify);
        Self { code, error }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::io(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::new(EXIT_IO, e)
    }
}
