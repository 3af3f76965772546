use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Bbox, Bundle, Query, Region, RegionId};
use crate::error::{Error, Result};
use crate::vecmath::Embedding;

/// On-disk description of one image's candidate regions.
///
/// Embeddings are given either inline per region or, for the whole bundle,
/// in a sidecar file of little-endian `f32` values laid out row-major as
/// `regions x dim` in manifest order. Never both.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_file: Option<String>,
    pub regions: Vec<RegionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRecord {
    pub id: RegionId,
    pub bbox: Bbox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl BundleManifest {
    /// Inline-embedding manifest for `bundle`.
    pub fn from_bundle(bundle: &Bundle) -> Self {
        BundleManifest {
            image_id: bundle.image_id.clone(),
            image_uri: bundle.image_uri.clone(),
            dim: bundle.dim,
            embedding_file: None,
            regions: bundle
                .regions
                .iter()
                .map(|r| RegionRecord {
                    id: r.id,
                    bbox: r.bbox,
                    embedding: Some(r.embedding.as_slice().to_vec()),
                })
                .collect(),
        }
    }

    /// Builds the bundle, reading the sidecar relative to `base_dir` if one is declared.
    pub fn into_bundle(self, base_dir: Option<&Path>) -> Result<Bundle> {
        let ctx = format!("manifest {}", self.image_id);
        let inline = self.regions.iter().filter(|r| r.embedding.is_some()).count();
        let rows: Vec<Vec<f64>> = match (&self.embedding_file, inline) {
            (Some(_), n) if n > 0 => {
                return Err(Error::format(
                    ctx,
                    "both embedding_file and inline embeddings are declared",
                ))
            }
            (Some(file), _) => {
                let path = match base_dir {
                    Some(dir) => dir.join(file),
                    None => Path::new(file).to_path_buf(),
                };
                read_sidecar(&path, self.regions.len(), self.dim)?
            }
            (None, n) if n != self.regions.len() => {
                return Err(Error::format(
                    ctx,
                    format!("{} of {} regions lack an embedding", self.regions.len() - n, self.regions.len()),
                ))
            }
            (None, _) => self
                .regions
                .iter()
                .map(|r| r.embedding.clone().unwrap_or_default())
                .collect(),
        };
        let mut regions = Vec::with_capacity(rows.len());
        for (rec, row) in self.regions.iter().zip(rows) {
            if row.len() != self.dim {
                return Err(Error::format(
                    ctx,
                    format!("region {} has {} values, dim is {}", rec.id, row.len(), self.dim),
                ));
            }
            let embedding = Embedding::new(row)
                .map_err(|e| Error::format(ctx.clone(), format!("region {}: {e}", rec.id)))?;
            regions.push(Region {
                id: rec.id,
                bbox: rec.bbox,
                embedding,
            });
        }
        Bundle::new(self.image_id, self.image_uri, self.dim, regions)
    }
}

fn read_sidecar(path: &Path, rows: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = rows * dim * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path.display().to_string(),
            format!("sidecar holds {} bytes, expected {rows} x {dim} x 4 = {expected}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok(values.chunks(dim.max(1)).map(<[f64]>::to_vec).collect())
}

pub fn load_bundle(manifest_path: impl AsRef<Path>) -> Result<Bundle> {
    let path = manifest_path.as_ref();
    let manifest: BundleManifest = read_json(path)?;
    manifest.into_bundle(path.parent())
}

/// Loads every `*.json` manifest in `dir`, in file-name order.
pub fn load_bundle_dir(dir: impl AsRef<Path>) -> Result<Vec<Bundle>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(load_bundle).collect()
}

/// Writes `bundle` as a manifest with inline embeddings.
pub fn save_bundle(bundle: &Bundle, manifest_path: impl AsRef<Path>) -> Result<()> {
    write_json(manifest_path, &BundleManifest::from_bundle(bundle))
}

/// Writes `bundle` as a manifest plus an `f32` sidecar next to it.
///
/// The sidecar stores single precision, so a reload is equal to `bundle`
/// only up to `f32` rounding.
pub fn save_bundle_with_sidecar(
    bundle: &Bundle,
    manifest_path: impl AsRef<Path>,
    sidecar_name: &str,
) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let sidecar = manifest_path
        .parent()
        .map(|d| d.join(sidecar_name))
        .unwrap_or_else(|| sidecar_name.into());
    let mut bytes = Vec::with_capacity(bundle.len() * bundle.dim() * 4);
    for r in bundle.regions() {
        for &v in r.embedding.as_slice() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(&sidecar, bytes).map_err(|e| Error::io(&sidecar, e))?;
    let mut manifest = BundleManifest::from_bundle(bundle);
    manifest.embedding_file = Some(sidecar_name.to_string());
    manifest.regions.iter_mut().for_each(|r| r.embedding = None);
    write_json(manifest_path, &manifest)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    read_jsonl(path)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display().to_string(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads one JSON document per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}", path.display(), n + 1), e))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::format(path.display().to_string(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
