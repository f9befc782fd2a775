//! Result tables and run manifests: CSV with a header row and '.' decimals,
//! JSON manifests carrying everything needed to reproduce the outputs
//! byte-for-byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::HarnessConfig;
use crate::error::{Result, SgfError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub alpha: f64,
    /// `E[sup_t ||u^alpha - u_bar||^2]` and its standard error.
    pub sup_diff_mean: f64,
    pub sup_diff_se: f64,
    /// `alpha^2 E[sup_t ||grad u^alpha||^2]`.
    pub h1_scaled_mean: f64,
    pub h1_scaled_se: f64,
    /// `alpha^6 E[sup_t H3s^2]`.
    pub h3_scaled_mean: f64,
    pub h3_scaled_se: f64,
    pub paths_used: usize,
    pub blowups: usize,
    pub reliable: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "alpha,sup_diff_mean,sup_diff_se,h1_scaled_mean,h1_scaled_se,h3_scaled_mean,h3_scaled_se,paths_used,blowups,reliable\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.alpha,
                r.sup_diff_mean,
                r.sup_diff_se,
                r.h1_scaled_mean,
                r.h1_scaled_se,
                r.h3_scaled_mean,
                r.h3_scaled_se,
                r.paths_used,
                r.blowups,
                r.reliable
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(SgfError::Format(format!("csv row {i}: {} fields", f.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|e| SgfError::Format(format!("csv row {i}: {e}")))
            };
            rows.push(ResultRow {
                alpha: num(f[0])?,
                sup_diff_mean: num(f[1])?,
                sup_diff_se: num(f[2])?,
                h1_scaled_mean: num(f[3])?,
                h1_scaled_se: num(f[4])?,
                h3_scaled_mean: num(f[5])?,
                h3_scaled_se: num(f[6])?,
                paths_used: f[7]
                    .parse()
                    .map_err(|e| SgfError::Format(format!("csv row {i}: {e}")))?,
                blowups: f[8]
                    .parse()
                    .map_err(|e| SgfError::Format(format!("csv row {i}: {e}")))?,
                reliable: f[9] == "true",
            });
        }
        Ok(ResultTable { rows })
    }
}

/// 64-bit FNV-1a, recorded so manifest consumers can spot drift.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputFile {
    pub name: String,
    pub bytes: usize,
    pub fnv64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub version: String,
    pub seed: u64,
    pub config: HarnessConfig,
    /// Per-alpha (paths used, blowups) in sweep order.
    pub path_counts: Vec<(f64, usize, usize)>,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn new(experiment: &str, config: &HarnessConfig) -> Self {
        RunManifest {
            experiment: experiment.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config: config.clone(),
            path_counts: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn parse_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SgfError::Format(format!("manifest parse: {e}")))
    }
}

/// Write the table, auxiliary JSON blobs and the manifest into `dir`;
/// rerunning with the same inputs reproduces every byte.
pub fn emit_results(
    table: &ResultTable,
    manifest: &mut RunManifest,
    extra_json: &[(&str, String)],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv = table.to_csv();
    let csv_name = format!("{}_table.csv", manifest.experiment);
    let csv_path = dir.join(&csv_name);
    std::fs::write(&csv_path, csv.as_bytes())?;
    manifest.outputs.push(OutputFile {
        name: csv_name,
        bytes: csv.len(),
        fnv64: format!("{:016x}", fnv64(csv.as_bytes())),
    });
    written.push(csv_path);
    for (name, body) in extra_json {
        let fname = format!("{}_{}.json", manifest.experiment, name);
        let path = dir.join(&fname);
        std::fs::write(&path, body.as_bytes())?;
        manifest.outputs.push(OutputFile {
            name: fname,
            bytes: body.len(),
            fnv64: format!("{:016x}", fnv64(body.as_bytes())),
        });
        written.push(path);
    }
    let mpath = dir.join(format!("{}_manifest.json", manifest.experiment));
    std::fs::write(&mpath, manifest.to_json().as_bytes())?;
    written.push(mpath);
    Ok(written)
}
