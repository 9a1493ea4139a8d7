//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by ingestion, matrix construction, clustering and the
/// batch pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input file could not be turned into a valid price panel.
    #[error("ingest error: {msg}")]
    Ingest { msg: String },

    /// Invalid configuration or arguments.
    #[error("config error: {0}")]
    Config(String),

    /// A return window contains a zero-variance row, so no correlation
    /// matrix exists for it.
    #[error("degenerate window: zero variance in row {row}{}", fmt_ctx(.ticker, .window))]
    DegenerateWindow {
        row: usize,
        ticker: Option<String>,
        window: Option<usize>,
    },

    /// Residual variance vanished after subtracting the market dyad.
    #[error("degenerate residual: zero variance left for asset {asset} after dyad removal")]
    DegenerateResidual { asset: String },

    /// Numerical failure of an eigensolver or an invariant violation that
    /// signals one.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// k-means cannot produce k clusters from the given points.
    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    /// Malformed binary matrix file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

fn fmt_ctx(ticker: &Option<String>, window: &Option<usize>) -> String {
    match (ticker, window) {
        (Some(t), Some(w)) => format!(" (ticker {t}, window {w})"),
        (Some(t), None) => format!(" (ticker {t})"),
        (None, Some(w)) => format!(" (window {w})"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub fn ingest(msg: impl Into<String>) -> Self {
        Error::Ingest { msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
