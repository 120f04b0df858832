//! On-disk container for named dense `f32` tensors.
//!
//! A bundle is a directory holding `manifest.json` plus one `<name>.bin` blob
//! per tensor. Blobs are raw little-endian `f32` values in row-major order.
//! The manifest records a byte offset for every tensor so that several
//! tensors may share one blob file; the writer always uses offset 0.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "tensors": [{"name": "ppc", "dtype": "f32", "shape": [8, 64, 64], "file": "ppc.bin", "byte_offset": 0}],
//!   "attributes": {"frame_id": "scene_00000"}
//! }
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const DTYPE_F32: &str = "f32";

/// One named tensor. `data.len()` always equals the product of `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let rec = Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        };
        rec.validate()?;
        Ok(rec)
    }

    fn validate(&self) -> Result<()> {
        validate_name(&self.name)?;
        if self.shape.is_empty() || self.shape.iter().any(|&d| d == 0) {
            return Err(Error::Store(format!(
                "tensor `{}` has invalid shape {:?}; every dimension must be >= 1",
                self.name, self.shape
            )));
        }
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Store(format!(
                "tensor `{}` has {} values but shape {:?} needs {n}",
                self.name,
                self.data.len(),
                self.shape
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

/// Tensors and attributes read back from a bundle directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub tensors: Vec<TensorRecord>,
    pub attributes: BTreeMap<String, String>,
}

impl Bundle {
    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn take(&mut self, name: &str) -> Option<TensorRecord> {
        let i = self.tensors.iter().position(|t| t.name == name)?;
        Some(self.tensors.swap_remove(i))
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }
}

fn validate_name(name: &str) -> Result<()> {
    let bad = name.is_empty()
        || name == "."
        || name == ".."
        || name.contains(['/', '\\', '\0'])
        || name == MANIFEST_FILE.trim_end_matches(".json");
    if bad {
        return Err(Error::Store(format!("invalid tensor name `{name}`")));
    }
    Ok(())
}

/// Writes `records` into the directory `path`, creating it if needed.
pub fn write_bundle(
    records: &[TensorRecord],
    attributes: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(r.name.as_str()) {
            return Err(Error::Store(format!("duplicate tensor name `{}`", r.name)));
        }
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let file = format!("{}.bin", r.name);
        let mut bytes = Vec::with_capacity(r.data.len() * 4);
        for v in &r.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let blob = path.join(&file);
        fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
        entries.push(TensorEntry {
            name: r.name.clone(),
            dtype: DTYPE_F32.to_string(),
            shape: r.shape.clone(),
            file,
            byte_offset: 0,
        });
    }
    let manifest = BundleManifest {
        format_version: FORMAT_VERSION,
        tensors: entries,
        attributes: attributes.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(path, e))?;
    // Manifest last, via rename, so a crashed write never looks complete.
    let tmp = path.join(".manifest.json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    let target = path.join(MANIFEST_FILE);
    fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<BundleManifest> {
    let mpath = path.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Store(format!(
            "{}: unsupported format_version {}",
            mpath.display(),
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads a bundle directory written by [`write_bundle`] (or any producer
/// following the same manifest layout).
pub fn read_bundle(path: &Path) -> Result<Bundle> {
    let manifest = read_manifest(path)?;
    let mut names = HashSet::new();
    let mut ranges: HashMap<&str, Vec<(u64, u64, &str)>> = HashMap::new();
    for t in &manifest.tensors {
        validate_name(&t.name)?;
        if !names.insert(t.name.as_str()) {
            return Err(Error::Store(format!(
                "duplicate tensor name `{}` in manifest",
                t.name
            )));
        }
        if t.dtype != DTYPE_F32 {
            return Err(Error::Store(format!(
                "tensor `{}` has unsupported dtype `{}` (only f32)",
                t.name, t.dtype
            )));
        }
        if t.file.is_empty() || t.file.contains(['/', '\\']) || t.file == ".." {
            return Err(Error::Store(format!(
                "tensor `{}` references invalid file `{}`",
                t.name, t.file
            )));
        }
        if t.shape.is_empty() || t.shape.iter().any(|&d| d == 0) {
            return Err(Error::Store(format!(
                "tensor `{}` has invalid shape {:?}",
                t.name, t.shape
            )));
        }
        let len = 4 * t.shape.iter().product::<usize>() as u64;
        ranges.entry(t.file.as_str()).or_default().push((
            t.byte_offset,
            t.byte_offset + len,
            t.name.as_str(),
        ));
    }
    for spans in ranges.values_mut() {
        spans.sort();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Store(format!(
                    "tensors `{}` and `{}` overlap in their blob file",
                    pair[0].2, pair[1].2
                )));
            }
        }
    }

    let mut blobs: HashMap<&str, Vec<u8>> = HashMap::new();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        if !blobs.contains_key(t.file.as_str()) {
            let bpath = path.join(&t.file);
            let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
            blobs.insert(t.file.as_str(), bytes);
        }
        let bytes = &blobs[t.file.as_str()];
        let n: usize = t.shape.iter().product();
        let start = t.byte_offset as usize;
        let end = start + 4 * n;
        if end > bytes.len() {
            return Err(Error::Store(format!(
                "tensor `{}` with shape {:?} needs {} bytes at offset {start}, but `{}` holds {}",
                t.name,
                t.shape,
                4 * n,
                t.file,
                bytes.len()
            )));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(TensorRecord {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data,
        });
    }
    Ok(Bundle {
        tensors,
        attributes: manifest.attributes,
    })
}
