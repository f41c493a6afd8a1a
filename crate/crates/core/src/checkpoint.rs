//! Weight container: magic `LIFT3DCK`, u32 LE version, u64 LE header length,
//! UTF-8 JSON header (stage, config, tensor index, data CRC32), then every
//! tensor as row-major little-endian f32 in index order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"LIFT3DCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: Stage,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    data_crc32: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Fully resolved run configuration.
    pub config: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut tensors = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            for &x in &p.value.data {
                let f = x as f32;
                if !f.is_finite() {
                    return Err(Error::NonFinite(format!("parameter {}", p.name)));
                }
                data.extend_from_slice(&f.to_le_bytes());
            }
            tensors.push(TensorEntry { name: p.name.clone(), rows: p.value.rows, cols: p.value.cols });
        }
        let header = Header { stage: self.stage, config: self.config.clone(), tensors, data_crc32: crc32fast::hash(&data) };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let fail = |reason: String| Error::Format { record: origin.to_string(), reason };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fail(format!("checkpoint version {version} (expected {VERSION})")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let hend = 20u64.checked_add(hlen).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| fail("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend as usize]).map_err(|e| fail(format!("header: {e}")))?;
        let data = &bytes[hend as usize..];
        let floats: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        if data.len() != 4 * floats {
            return Err(fail(format!("index describes {floats} floats but {} data bytes follow", data.len())));
        }
        if crc32fast::hash(data) != header.data_crc32 {
            return Err(fail("data checksum mismatch".into()));
        }
        let mut params = ParamStore::new();
        let mut at = 0;
        for t in &header.tensors {
            let n = t.rows * t.cols;
            let vals = data[at..at + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            at += 4 * n;
            if params.contains(&t.name) {
                return Err(fail(format!("duplicate tensor {}", t.name)));
            }
            params.insert(t.name.clone(), Mat::from_vec(t.rows, t.cols, vals));
        }
        Ok(Self { stage: header.stage, config: header.config, params })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Copies tensors under `prefix` into `store`, requiring identical names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let want: Vec<(String, (usize, usize))> =
            store.iter().filter(|p| p.name.starts_with(prefix)).map(|p| (p.name.clone(), p.value.shape())).collect();
        let have = self.params.iter().filter(|p| p.name.starts_with(prefix)).count();
        if have != want.len() {
            return Err(Error::CheckpointMismatch(format!("{have} `{prefix}*` tensors in checkpoint, model expects {}", want.len())));
        }
        for (name, shape) in &want {
            let Some(m) = self.params.get(name) else {
                return Err(Error::CheckpointMismatch(format!("checkpoint lacks {name}")));
            };
            if m.shape() != *shape {
                return Err(Error::CheckpointMismatch(format!("{name}: checkpoint {:?}, model {:?}", m.shape(), shape)));
            }
        }
        Ok(store.copy_prefix_from(&self.params, prefix))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
