//! Randomization-based inference for possibly unbalanced split-plot
//! factorial experiments.
//!
//! The crate covers the full pipeline: design description and validation
//! ([`design`]), potential-outcome algebra ([`outcomes`]), two-stage
//! randomization ([`randomize`]), observed-data estimators ([`estimators`]),
//! construction of the bias-correction matrix ([`bmatrix`]), exhaustive
//! enumeration checks ([`oracle`]), Monte-Carlo bias studies
//! ([`simulation`]) and the file formats used by the command-line tool
//! ([`io`]).

pub mod bmatrix;
pub mod design;
pub mod error;
pub mod estimators;
pub mod io;
pub mod numeric;
pub mod oracle;
pub mod outcomes;
pub mod randomize;
pub mod simulation;

pub use error::{Error, Result};
