//! Split directories: `manifest.json` plus one little-endian f32 blob per record.
//!
//! Blob layout: 8-byte magic `L3DBLOB1`, u64 LE count of f32 values, then the
//! values. The manifest stores each blob's value count and CRC32 of the whole file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EpisodeRecord, PretrainRecord, Step, JOINTS};
use crate::error::{Error, Result};
use crate::geometry::{Image, PointCloud};
use crate::policy::{Pose7DoF, RobotState};

pub const SCHEMA_VERSION: u32 = 1;
pub const BLOB_MAGIC: &[u8; 8] = b"L3DBLOB1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub enum Records {
    Episodes(Vec<EpisodeRecord>),
    Pretrain(Vec<PretrainRecord>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Episodes(r) => r.len(),
            Records::Pretrain(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Records::Episodes(_) => "episodes",
            Records::Pretrain(_) => "pretrain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub count: usize,
    pub records: Vec<BlobEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub file: String,
    pub floats: u64,
    pub crc32: u32,
    pub seed: u64,
    /// Task name (episodes) or text description (pretrain).
    pub text: String,
    /// Points per step (episodes).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_points: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints: Option<usize>,
    /// `[width, height]` (pretrain).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[usize; 2]>,
}

fn push_f32(out: &mut Vec<f32>, values: impl IntoIterator<Item = f64>, what: &str, name: &str) -> Result<()> {
    for v in values {
        let x = v as f32;
        if !x.is_finite() {
            return Err(Error::format(name, format!("non-finite {what}")));
        }
        out.push(x);
    }
    Ok(())
}

fn encode_episode(r: &EpisodeRecord, name: &str) -> Result<(Vec<f32>, BlobEntry)> {
    r.validate()?;
    let mut data = Vec::new();
    let mut step_points = Vec::with_capacity(r.steps.len());
    for s in &r.steps {
        if s.state.joint_positions.len() != JOINTS || s.state.joint_velocities.len() != JOINTS {
            return Err(Error::format(name, format!("robot state must have {JOINTS} joints")));
        }
        step_points.push(s.cloud.len());
        push_f32(&mut data, s.cloud.points.iter().flatten().copied(), "point", name)?;
        push_f32(&mut data, s.cloud.colors.iter().flatten().copied(), "color", name)?;
        push_f32(&mut data, s.state.to_vec(), "state", name)?;
        push_f32(&mut data, s.action.to_array(), "action", name)?;
    }
    let entry = BlobEntry {
        file: String::new(),
        floats: data.len() as u64,
        crc32: 0,
        seed: r.seed,
        text: r.task.clone(),
        step_points,
        joints: Some(JOINTS),
        size: None,
    };
    Ok((data, entry))
}

fn encode_pretrain(r: &PretrainRecord, name: &str) -> Result<(Vec<f32>, BlobEntry)> {
    r.validate()?;
    let mut data = Vec::new();
    push_f32(&mut data, r.image.pixels.iter().flatten().copied(), "pixel", name)?;
    push_f32(&mut data, r.depth.pixels.iter().copied(), "depth", name)?;
    push_f32(&mut data, r.attention.pixels.iter().copied(), "attention", name)?;
    let entry = BlobEntry {
        file: String::new(),
        floats: data.len() as u64,
        crc32: 0,
        seed: r.seed,
        text: r.text.clone(),
        step_points: vec![],
        joints: None,
        size: Some([r.image.width, r.image.height]),
    };
    Ok((data, entry))
}

fn blob_bytes(data: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(16 + 4 * data.len());
    bytes.extend_from_slice(BLOB_MAGIC);
    bytes.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    bytes
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn temp_sibling(dir: &Path) -> Result<PathBuf> {
    let name = dir.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} has no final component", dir.display())))?;
    let mut tmp = name.to_os_string();
    tmp.push(format!(".tmp-{}", std::process::id()));
    Ok(dir.with_file_name(tmp))
}

/// Replaces `dir` with a fresh split directory (staged in a sibling, then renamed).
pub fn write_dataset(records: &Records, dir: &Path) -> Result<Manifest> {
    let mut blobs = Vec::with_capacity(records.len());
    for i in 0..records.len() {
        let name = format!("{i:06}.bin");
        let (data, mut entry) = match records {
            Records::Episodes(r) => encode_episode(&r[i], &name)?,
            Records::Pretrain(r) => encode_pretrain(&r[i], &name)?,
        };
        let bytes = blob_bytes(&data);
        entry.crc32 = crc32fast::hash(&bytes);
        entry.file = name;
        blobs.push((entry, bytes));
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        kind: records.kind().to_string(),
        count: records.len(),
        records: blobs.iter().map(|(e, _)| e.clone()).collect(),
    };

    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_sibling(dir)?;
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let staged = (|| {
        for (entry, bytes) in &blobs {
            write_file(&tmp.join(&entry.file), bytes)?;
        }
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        write_file(&tmp.join(MANIFEST), json.as_bytes())
    })();
    if let Err(e) = staged {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(manifest)
}

/// Parses and checks the manifest without touching any blob.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::format(
            MANIFEST,
            format!("schema version {} (expected {SCHEMA_VERSION})", manifest.schema_version),
        ));
    }
    if manifest.count != manifest.records.len() {
        return Err(Error::format(
            MANIFEST,
            format!("count {} but {} record entries", manifest.count, manifest.records.len()),
        ));
    }
    if manifest.kind != "episodes" && manifest.kind != "pretrain" {
        return Err(Error::format(MANIFEST, format!("unknown kind {:?}", manifest.kind)));
    }
    Ok(manifest)
}

fn read_blob(dir: &Path, entry: &BlobEntry) -> Result<Vec<f32>> {
    let name = entry.file.as_str();
    if name.contains(['/', '\\']) || name == ".." {
        return Err(Error::format(name, "file name escapes the split directory"));
    }
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(name, format!("{} bytes is shorter than the blob header", bytes.len())));
    }
    if &bytes[..8] != BLOB_MAGIC {
        return Err(Error::format(name, "bad magic"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = (bytes.len() - 16) as u64;
    if body != n.saturating_mul(4) {
        return Err(Error::format(name, format!("length prefix says {n} floats but {body} payload bytes follow")));
    }
    if n != entry.floats {
        return Err(Error::format(name, format!("blob holds {n} floats, manifest says {}", entry.floats)));
    }
    let crc = crc32fast::hash(&bytes);
    if crc != entry.crc32 {
        return Err(Error::format(name, format!("checksum {crc:08x} does not match manifest {:08x}", entry.crc32)));
    }
    Ok(bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

struct Cursor<'a> {
    data: &'a [f32],
    at: usize,
    name: &'a str,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.at + n > self.data.len() {
            return Err(Error::format(self.name, "payload shorter than the manifest shapes"));
        }
        let out = self.data[self.at..self.at + n].iter().map(|&x| x as f64).collect();
        self.at += n;
        Ok(out)
    }

    fn triples(&mut self, n: usize) -> Result<Vec<[f64; 3]>> {
        Ok(self.take(3 * n)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.data.len() {
            return Err(Error::format(self.name, "payload longer than the manifest shapes"));
        }
        Ok(())
    }
}

fn decode_episode(data: &[f32], entry: &BlobEntry) -> Result<EpisodeRecord> {
    let joints = entry.joints.ok_or_else(|| Error::format(&entry.file, "episode entry without joints"))?;
    let mut cur = Cursor { data, at: 0, name: &entry.file };
    let mut steps = Vec::with_capacity(entry.step_points.len());
    for &n in &entry.step_points {
        let points = cur.triples(n)?;
        let colors = cur.triples(n)?;
        let state = RobotState::from_slice(&cur.take(7 + 2 * joints)?, joints)?;
        let action = Pose7DoF::from_slice(&cur.take(7)?);
        steps.push(Step { cloud: PointCloud::new(points, colors)?, state, action });
    }
    cur.finish()?;
    Ok(EpisodeRecord { steps, task: entry.text.clone(), seed: entry.seed })
}

fn decode_pretrain(data: &[f32], entry: &BlobEntry) -> Result<PretrainRecord> {
    let [w, h] = entry.size.ok_or_else(|| Error::format(&entry.file, "pretrain entry without size"))?;
    let mut cur = Cursor { data, at: 0, name: &entry.file };
    let image = Image::from_pixels(w, h, cur.triples(w * h)?)?;
    let depth = Image::from_pixels(w, h, cur.take(w * h)?)?;
    let attention = Image::from_pixels(w, h, cur.take(w * h)?)?;
    cur.finish()?;
    Ok(PretrainRecord { image, depth, attention, text: entry.text.clone(), seed: entry.seed })
}

pub fn read_dataset(dir: &Path) -> Result<Records> {
    let manifest = read_manifest(dir)?;
    if manifest.kind == "episodes" {
        let mut out = Vec::with_capacity(manifest.count);
        for e in &manifest.records {
            out.push(decode_episode(&read_blob(dir, e)?, e)?);
        }
        Ok(Records::Episodes(out))
    } else {
        let mut out = Vec::with_capacity(manifest.count);
        for e in &manifest.records {
            out.push(decode_pretrain(&read_blob(dir, e)?, e)?);
        }
        Ok(Records::Pretrain(out))
    }
}
