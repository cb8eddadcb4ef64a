//! Run manifests and artifact plumbing.
//!
//! A manifest lives at `manifests/<name>.json`. Rerunning a stage never
//! rewrites an existing manifest: a changed manifest is stored as
//! `<name>.<k>.json` with the next free `k`, and readers take the highest
//! `k`. All maps are ordered and nothing time-dependent is recorded.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub stage: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
    /// Input path → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the output root) → sha256.
    pub outputs: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
}

pub fn versions() -> BTreeMap<String, String> {
    [
        ("discourse-cli", env!("CARGO_PKG_VERSION")),
        ("discourse-core", discourse_core::VERSION),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file_name = path
        .file_name()
        .with_context(|| format!("{} has no file name", path.display()))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes).with_context(|| format!("writing {}", tmp.display()))?;
    f.sync_all().ok();
    drop(f);
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Pretty JSON with a trailing newline; key order follows the value's maps.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn manifest_dir(root: &Path) -> PathBuf {
    root.join("manifests")
}

/// `(name, k)` from `name.json` (k = 0) or `name.k.json`.
fn parse_manifest_file(file: &str) -> Option<(String, usize)> {
    let stem = file.strip_suffix(".json")?;
    match stem.rsplit_once('.') {
        Some((name, k)) if k.chars().all(|c| c.is_ascii_digit()) && !k.is_empty() => {
            Some((name.to_string(), k.parse().ok()?))
        }
        _ => Some((stem.to_string(), 0)),
    }
}

fn versions_of(root: &Path, name: &str) -> Result<Vec<(usize, PathBuf)>> {
    let dir = manifest_dir(root);
    let mut found = Vec::new();
    if !dir.is_dir() {
        return Ok(found);
    }
    for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        if let Some((n, k)) = parse_manifest_file(file) {
            if n == name {
                found.push((k, path));
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Stores `manifest` unless the latest stored version is identical.
/// Returns the path of the manifest now current.
pub fn store(root: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let bytes = to_json_bytes(manifest)?;
    let existing = versions_of(root, &manifest.name)?;
    if let Some((k, path)) = existing.last() {
        if fs::read(path).ok().as_deref() == Some(bytes.as_slice()) {
            return Ok(path.clone());
        }
        let next = manifest_dir(root).join(format!("{}.{}.json", manifest.name, k + 1));
        write_atomic(&next, &bytes)?;
        return Ok(next);
    }
    let path = manifest_dir(root).join(format!("{}.json", manifest.name));
    write_atomic(&path, &bytes)?;
    Ok(path)
}

/// The latest version of every stored manifest, by name.
pub fn latest(root: &Path) -> Result<BTreeMap<String, RunManifest>> {
    let dir = manifest_dir(root);
    let mut names = std::collections::BTreeSet::new();
    if dir.is_dir() {
        for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            if let Some((n, _)) = entry?.file_name().to_str().and_then(parse_manifest_file) {
                names.insert(n);
            }
        }
    }
    let mut out = BTreeMap::new();
    for name in names {
        if let Some((_, path)) = versions_of(root, &name)?.pop() {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let m: RunManifest =
                serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
            out.insert(name, m);
        }
    }
    Ok(out)
}
