//! Manifest JSON plus the feature files it points at.

use std::fs;
use std::path::{Path, PathBuf};

use adafusion_core::train::FusedDataset;
use adafusion_core::{DatasetManifest, FeatureTable};

use crate::error::{Error, Result};
use crate::pft::{read_feature_table, write_feature_table};

/// Source file paths in a manifest are relative to its directory.
pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn source_path(manifest_path: &Path, rel: &str) -> PathBuf {
    manifest_dir(manifest_path).join(rel)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses and validates a manifest, including that every source file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let manifest: DatasetManifest = read_json(path)?;
    manifest.validate()?;
    for s in &manifest.sources {
        let p = source_path(path, &s.path);
        if !p.is_file() {
            return Err(Error::MissingFile(p));
        }
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    write_json(manifest, path.as_ref())
}

/// One table per manifest source, in manifest order.
pub fn load_tables(
    manifest: &DatasetManifest,
    manifest_path: impl AsRef<Path>,
) -> Result<Vec<FeatureTable>> {
    manifest
        .sources
        .iter()
        .map(|s| read_feature_table(source_path(manifest_path.as_ref(), &s.path), s.descriptor()))
        .collect()
}

/// Writes `tables` at the manifest's source paths under `dir`, then the
/// manifest itself as `dir/manifest.json`. Returns the manifest path.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    tables: &[FeatureTable],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if tables.len() != manifest.sources.len() {
        return Err(Error::Invalid(format!(
            "{} tables for {} sources",
            tables.len(),
            manifest.sources.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, t) in manifest.sources.iter().zip(tables) {
        write_feature_table(t, dir.join(&s.path))?;
    }
    let path = dir.join("manifest.json");
    save_manifest(manifest, &path)?;
    Ok(path)
}

/// Loads, pools to `d`, aligns and composes every bag of a manifest.
pub fn load_dataset(manifest_path: impl AsRef<Path>, d: usize) -> Result<FusedDataset> {
    let path = manifest_path.as_ref();
    let manifest = load_manifest(path)?;
    let tables = load_tables(&manifest, path)?;
    Ok(FusedDataset::from_raw(&manifest, &tables, d)?)
}
