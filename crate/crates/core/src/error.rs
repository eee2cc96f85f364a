use std::io;

use thiserror::Error;

/// Error categories shared by every module. The CLI prints them as
/// `error: <category>: <detail>`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension: {0}")]
    Dimension(String),
    #[error("input: {0}")]
    Input(String),
    #[error("state: {0}")]
    State(String),
    #[error("format: {0}")]
    Format(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Input(_) => "input",
            Error::State(_) => "state",
            Error::Format(_) => "format",
            Error::Evaluation(_) => "evaluation",
            Error::Io(_) => "io",
        }
    }

    pub fn detail(&self) -> String {
        match self {
            Error::Dimension(s)
            | Error::Input(s)
            | Error::State(s)
            | Error::Format(s)
            | Error::Evaluation(s) => s.clone(),
            Error::Io(e) => e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}
macro_rules! state_err {
    ($($arg:tt)*) => { $crate::error::Error::State(format!($($arg)*)) };
}
pub(crate) use {dim_err, input_err, state_err};
