//! Cohort I/O, synthetic data and the command-line front end.

pub mod cli;
pub mod records;
pub mod synth;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// Reads a JSON config, reporting schema problems as [`Error::Config`].
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
