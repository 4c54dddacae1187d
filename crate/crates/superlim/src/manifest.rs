//! Run manifests and report aggregation.
//!
//! Every CLI invocation appends one manifest line to `manifests.jsonl` in
//! the run directory, recording the scenario hash, parameters, outputs, and
//! per-check verdicts. The report subcommand folds all manifests into one
//! JSON document plus a human-readable summary.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifests.jsonl";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("run directory {0}: {1}")]
    Io(String, std::io::Error),
    #[error("manifest line {line} is not valid JSON: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("no manifests found in {0}")]
    Empty(String),
}

/// Record of one subcommand run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario_name: String,
    pub scenario_hash: String,
    pub subcommand: String,
    pub parameters: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
    pub wall_ms: u128,
    /// Check name -> pass.
    pub checks: BTreeMap<String, bool>,
    /// Named numeric results (analytic values, fitted values, distances).
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn passed(&self) -> bool {
        self.checks.values().all(|&ok| ok)
    }
}

/// Canonical hash of a scenario document.
pub fn scenario_hash(scenario_json: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(scenario_json).expect("scenario serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hex_string(&hasher.finalize()[..8])
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Append one manifest to the run directory's log.
pub fn append_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), ManifestError> {
    std::fs::create_dir_all(dir).map_err(|e| ManifestError::Io(dir.display().to_string(), e))?;
    let line = serde_json::to_string(manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| ManifestError::Io(path.display().to_string(), e))?;
    writeln!(file, "{line}").map_err(|e| ManifestError::Io(path.display().to_string(), e))?;
    Ok(())
}

/// Read every manifest recorded in a run directory.
pub fn read_manifests(dir: &Path) -> Result<Vec<RunManifest>, ManifestError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(ManifestError::Empty(dir.display().to_string()));
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| ManifestError::Io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|source| ManifestError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    if out.is_empty() {
        return Err(ManifestError::Empty(dir.display().to_string()));
    }
    Ok(out)
}

/// Aggregated report: one section per scenario, deterministic order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub scenarios: Vec<ScenarioSection>,
    pub all_passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSection {
    pub scenario_name: String,
    pub runs: Vec<RunManifest>,
    pub passed: bool,
}

/// Fold all manifests in a run directory into a report, write it as JSON
/// and as a plain-text summary, and return it with the file paths.
pub fn emit_report(dir: &Path) -> Result<(Report, PathBuf, PathBuf), ManifestError> {
    let manifests = read_manifests(dir)?;
    let mut by_scenario: BTreeMap<String, Vec<RunManifest>> = BTreeMap::new();
    for m in manifests {
        by_scenario
            .entry(m.scenario_name.clone())
            .or_default()
            .push(m);
    }
    let scenarios: Vec<ScenarioSection> = by_scenario
        .into_iter()
        .map(|(name, runs)| {
            let passed = runs.iter().all(RunManifest::passed);
            ScenarioSection {
                scenario_name: name,
                runs,
                passed,
            }
        })
        .collect();
    let all_passed = scenarios.iter().all(|s| s.passed);
    let report = Report {
        scenarios,
        all_passed,
    };

    let json_path = dir.join("report.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| ManifestError::Io(json_path.display().to_string(), e))?;

    let mut text = String::new();
    for section in &report.scenarios {
        text.push_str(&format!(
            "== scenario {} : {} ==\n",
            section.scenario_name,
            if section.passed { "PASS" } else { "FAIL" }
        ));
        for run in &section.runs {
            text.push_str(&format!(
                "  [{}] {} ({} ms)\n",
                if run.passed() { "pass" } else { "FAIL" },
                run.subcommand,
                run.wall_ms
            ));
            for (check, ok) in &run.checks {
                text.push_str(&format!(
                    "    {} {}\n",
                    if *ok { "pass" } else { "FAIL" },
                    check
                ));
            }
            for (metric, value) in &run.metrics {
                text.push_str(&format!("    {metric} = {value}\n"));
            }
        }
    }
    text.push_str(&format!(
        "overall: {}\n",
        if report.all_passed { "PASS" } else { "FAIL" }
    ));
    let txt_path = dir.join("report.txt");
    std::fs::write(&txt_path, text)
        .map_err(|e| ManifestError::Io(txt_path.display().to_string(), e))?;
    Ok((report, json_path, txt_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(name: &str, sub: &str, ok: bool) -> RunManifest {
        let mut checks = BTreeMap::new();
        checks.insert("example".to_string(), ok);
        RunManifest {
            scenario_name: name.into(),
            scenario_hash: "abcd".into(),
            subcommand: sub.into(),
            parameters: serde_json::json!({}),
            seed: Some(1),
            outputs: vec![],
            wall_ms: 3,
            checks,
            metrics: BTreeMap::new(),
        }
    }

    #[test]
    fn append_and_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        append_manifest(dir.path(), &manifest("a", "validate", true)).unwrap();
        append_manifest(dir.path(), &manifest("a", "spectra", true)).unwrap();
        let all = read_manifests(dir.path()).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].subcommand, "validate");
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(dir.path()),
            Err(ManifestError::Empty(_))
        ));
    }

    #[test]
    fn report_sections_sorted_by_scenario() {
        let dir = tempfile::tempdir().unwrap();
        append_manifest(dir.path(), &manifest("zeta", "validate", true)).unwrap();
        append_manifest(dir.path(), &manifest("alpha", "validate", false)).unwrap();
        let (report, json_path, txt_path) = emit_report(dir.path()).unwrap();
        assert_eq!(report.scenarios[0].scenario_name, "alpha");
        assert_eq!(report.scenarios[1].scenario_name, "zeta");
        assert!(!report.all_passed);
        assert!(json_path.exists());
        assert!(txt_path.exists());
        let text = std::fs::read_to_string(txt_path).unwrap();
        assert!(text.contains("overall: FAIL"));
    }

    #[test]
    fn hash_is_stable_and_input_sensitive() {
        let a = scenario_hash(&serde_json::json!({"name": "x", "m": [1.0]}));
        let b = scenario_hash(&serde_json::json!({"name": "x", "m": [1.0]}));
        let c = scenario_hash(&serde_json::json!({"name": "x", "m": [2.0]}));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 16);
    }
}
