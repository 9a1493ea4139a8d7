//! Reduced-rank correlation analytics for daily price panels.
//!
//! The crate turns a panel of adjusted closing prices into:
//!
//! * reduced-rank correlation matrices via the covariance and correlation
//!   construction paths, on sliding windows and disjoint epochs;
//! * mean-value indicator series, pairwise distance matrices between
//!   windows and cutoff-filtered averaged distances;
//! * k-means market states over epochs, snapshot sequences with a fixed
//!   first epoch, typical states and transition reports.
//!
//! A narrative guide with worked examples lives in the `book/` directory of
//! the repository; the `redrank` binary drives the full batch pipeline.
//!
//! ```
//! use nalgebra::DMatrix;
//! use redrank::spectral::{reduced_rank_pipeline, Approach};
//!
//! // Four assets, twenty days of returns.
//! let block = DMatrix::from_fn(4, 20, |i, t| ((i * 7 + t * 3) % 11) as f64 / 11.0 - 0.5);
//! let cb = reduced_rank_pipeline(block.view((0, 0), (4, 20)), Approach::Covariance).unwrap();
//! assert_eq!(cb.matrix.get(0, 0), 1.0);
//! assert!(cb.matrix.get(0, 1).abs() <= 1.0 + 1e-10);
//! ```

pub mod error;
pub mod indicators;
pub mod market_data;
pub mod matio;
pub mod pipeline;
pub mod render;
pub mod spectral;
pub mod states;
pub mod synth;

pub use error::{Error, Result};
