//! Persistence of solved tables.
//!
//! Dumps are plain JSON behind a magic marker: large, but inspectable
//! with standard tooling, and byte-deterministic because every field
//! has a fixed order and floats round-trip exactly.

use super::solver::Solution;
use crate::network::LinkParams;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const SOLUTION_MAGIC: &str = "SOTAR1";

#[derive(Debug, Error)]
pub enum SolutionIoError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path} is not a solution dump (found marker {found:?})")]
    BadMagic { path: String, found: String },
    #[error("solution dump {path} is inconsistent: {reason}")]
    Corrupt { path: String, reason: String },
}

#[derive(Serialize)]
struct SolutionFileRef<'a> {
    magic: &'a str,
    params: &'a LinkParams,
    solution: &'a Solution,
}

#[derive(Deserialize)]
struct SolutionFile {
    magic: String,
    params: LinkParams,
    solution: Solution,
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

/// Writes a solution together with the stochastic parameters it was
/// built from, so a dump is self-contained for later simulation.
pub fn save_solution(
    path: &Path,
    solution: &Solution,
    params: &LinkParams,
) -> Result<(), SolutionIoError> {
    let file = SolutionFileRef {
        magic: SOLUTION_MAGIC,
        params,
        solution,
    };
    let text = serde_json::to_string(&file).map_err(|source| SolutionIoError::Parse {
        path: display(path),
        source,
    })?;
    fs::write(path, text).map_err(|source| SolutionIoError::Io {
        path: display(path),
        source,
    })
}

/// Reads a dump back, revalidating the marker, the network, the
/// parameters, and the table shapes.
pub fn load_solution(path: &Path) -> Result<(Solution, LinkParams), SolutionIoError> {
    let text = fs::read_to_string(path).map_err(|source| SolutionIoError::Io {
        path: display(path),
        source,
    })?;
    let file: SolutionFile =
        serde_json::from_str(&text).map_err(|source| SolutionIoError::Parse {
            path: display(path),
            source,
        })?;
    if file.magic != SOLUTION_MAGIC {
        return Err(SolutionIoError::BadMagic {
            path: display(path),
            found: file.magic,
        });
    }
    file.solution
        .check_shape()
        .map_err(|reason| SolutionIoError::Corrupt {
            path: display(path),
            reason,
        })?;
    file.params
        .validate_for(file.solution.network())
        .map_err(|e| SolutionIoError::Corrupt {
            path: display(path),
            reason: e.to_string(),
        })?;
    Ok((file.solution, file.params))
}
