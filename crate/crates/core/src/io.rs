//! JSON files for distributions and cost matrices.
//!
//! Distribution: `{"support": [...], "probs": [...]}`.
//! Cost matrix: `{"rows": M, "cols": N, "entries": [[...], ...]}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{CostMatrix, Distribution, SupportGrid};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistributionFile {
    support: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostFile {
    rows: usize,
    cols: usize,
    entries: Vec<Vec<f64>>,
}

pub fn distribution_from_json(text: &str) -> Result<Distribution> {
    let f: DistributionFile = serde_json::from_str(text)?;
    Distribution::with_support(SupportGrid::new(f.support)?, f.probs)
}

pub fn distribution_to_json(p: &Distribution) -> Result<String> {
    Ok(serde_json::to_string_pretty(&DistributionFile {
        support: p.support().points().to_vec(),
        probs: p.probs().to_vec(),
    })?)
}

pub fn cost_from_json(text: &str) -> Result<CostMatrix> {
    let f: CostFile = serde_json::from_str(text)?;
    if f.entries.len() != f.rows {
        return Err(Error::DimensionMismatch {
            expected: f.rows,
            got: f.entries.len(),
        });
    }
    if let Some(row) = f.entries.iter().find(|r| r.len() != f.cols) {
        return Err(Error::DimensionMismatch {
            expected: f.cols,
            got: row.len(),
        });
    }
    CostMatrix::from_rows(&f.entries)
}

pub fn cost_to_json(c: &CostMatrix) -> Result<String> {
    let entries = c.entries().rows().into_iter().map(|r| r.to_vec()).collect();
    Ok(serde_json::to_string_pretty(&CostFile {
        rows: c.rows(),
        cols: c.cols(),
        entries,
    })?)
}

pub fn load_distribution(path: impl AsRef<Path>) -> Result<Distribution> {
    distribution_from_json(&fs::read_to_string(path)?)
}

pub fn save_distribution(p: &Distribution, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, distribution_to_json(p)?)?;
    Ok(())
}

pub fn load_cost(path: impl AsRef<Path>) -> Result<CostMatrix> {
    cost_from_json(&fs::read_to_string(path)?)
}

pub fn save_cost(c: &CostMatrix, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, cost_to_json(c)?)?;
    Ok(())
}
