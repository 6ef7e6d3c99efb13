//! File formats, reports and the command-line front end for the
//! `negmerge-core` merging toolkit.

pub mod cli;
pub mod codec;
mod error;
pub mod grouping;
pub mod report;
pub mod store;

pub use error::{Error, FormatError, Result};
pub use store::{load, save};
