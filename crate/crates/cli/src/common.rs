use anyhow::{Context, Result};
use pref_forge::config::{sha256_hex, Settings};
use pref_forge::jsonl;
use pref_forge::toy::{feature_table, FeatureTable, WorldSample};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// `dir/name.jsonl` → `dir/name.<suffix>.jsonl`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("world");
    path.with_file_name(format!("{stem}.{suffix}.jsonl"))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    jsonl::read_path(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    jsonl::write_path(path, records).with_context(|| format!("writing {}", path.display()))
}

pub fn read_samples(path: &Path) -> Result<Vec<WorldSample>> {
    read_jsonl(path)
}

pub fn load_features(path: &Path) -> Result<FeatureTable> {
    let samples = read_samples(path)?;
    let dim = samples.first().map(|s| s.features.len()).unwrap_or(0);
    if let Some(bad) = samples.iter().find(|s| s.features.len() != dim) {
        anyhow::bail!("sample `{}` has {} features, expected {dim}", bad.id, bad.features.len());
    }
    Ok(feature_table(&samples, dim))
}

pub fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: Vec<String>,
    seed: u64,
    config_hash: String,
    execution: String,
    parallelism: usize,
    platform: String,
    inputs: BTreeMap<String, String>,
}

/// Writes `manifest.json` and `config.toml` into `dir`. Inputs are recorded
/// with their SHA-256 so a run can be replayed exactly.
pub fn write_run_files(dir: &Path, command: &str, settings: &Settings, inputs: &[&Path]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut hashes = BTreeMap::new();
    for input in inputs {
        let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
        hashes.insert(input.display().to_string(), sha256_hex(&bytes));
    }
    let manifest = Manifest {
        tool: "pref-forge",
        version: env!("CARGO_PKG_VERSION"),
        command,
        args: std::env::args().skip(1).collect(),
        seed: settings.optimizer.seed,
        config_hash: settings.hash(),
        execution: format!("{:?}", settings.execution()).to_lowercase(),
        parallelism: settings.run.parallelism,
        platform: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        inputs: hashes,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    fs::write(dir.join("config.toml"), settings.to_toml()).context("writing config.toml")
}
