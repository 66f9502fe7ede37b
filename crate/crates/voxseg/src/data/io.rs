//! Bit-exact file formats: a one-line JSON header followed by a raw
//! little-endian payload, plus the dataset manifest.

use super::{LabelMap, Volume};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const VOLUME_MAGIC: &str = "voxseg-vol";
const LABELS_MAGIC: &str = "voxseg-lab";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    magic: String,
    version: u32,
    dims: [usize; 3],
    channels: usize,
    spacing_mm: [f64; 3],
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelsHeader {
    magic: String,
    version: u32,
    dims: [usize; 3],
    dtype: String,
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(&'a [u8], &'a [u8])> {
    match bytes.iter().position(|&b| b == b'\n') {
        Some(pos) => Ok((&bytes[..pos], &bytes[pos + 1..])),
        None => Err(Error::MalformedHeader {
            path: path_str(path),
            message: "no newline-terminated header".into(),
        }),
    }
}

fn parse_header<'a, T: Deserialize<'a>>(head: &'a [u8], path: &Path) -> Result<T> {
    serde_json::from_slice(head).map_err(|e| Error::MalformedHeader {
        path: path_str(path),
        message: e.to_string(),
    })
}

fn check_payload(payload: &[u8], expected: usize, path: &Path) -> Result<()> {
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path_str(path),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::MalformedHeader {
            path: path_str(path),
            message: format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            ),
        });
    }
    Ok(())
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let header = VolumeHeader {
        magic: VOLUME_MAGIC.into(),
        version: FORMAT_VERSION,
        dims: [v.dims.0, v.dims.1, v.dims.2],
        channels: v.channels,
        spacing_mm: [v.spacing_mm.0, v.spacing_mm.1, v.spacing_mm.2],
        dtype: "f32le".into(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(v.voxels.len() * 4);
    for val in &v.voxels {
        bytes.extend_from_slice(&val.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (head, payload) = split_header(&bytes, path)?;
    let header: VolumeHeader = parse_header(head, path)?;
    if header.magic != VOLUME_MAGIC || header.version != FORMAT_VERSION {
        return Err(Error::MalformedHeader {
            path: path_str(path),
            message: format!("bad magic/version {}/{}", header.magic, header.version),
        });
    }
    if header.dtype != "f32le" {
        return Err(Error::DtypeMismatch {
            path: path_str(path),
            expected: "f32le".into(),
            found: header.dtype,
        });
    }
    let n = header.dims.iter().product::<usize>() * header.channels;
    check_payload(payload, n * 4, path)?;
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(
        (header.dims[0], header.dims[1], header.dims[2]),
        header.channels,
        (
            header.spacing_mm[0],
            header.spacing_mm[1],
            header.spacing_mm[2],
        ),
        voxels,
    )
}

pub fn write_labels(path: impl AsRef<Path>, l: &LabelMap) -> Result<()> {
    let header = LabelsHeader {
        magic: LABELS_MAGIC.into(),
        version: FORMAT_VERSION,
        dims: [l.dims.0, l.dims.1, l.dims.2],
        dtype: "u8".into(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&l.labels);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (head, payload) = split_header(&bytes, path)?;
    let header: LabelsHeader = parse_header(head, path)?;
    if header.magic != LABELS_MAGIC || header.version != FORMAT_VERSION {
        return Err(Error::MalformedHeader {
            path: path_str(path),
            message: format!("bad magic/version {}/{}", header.magic, header.version),
        });
    }
    if header.dtype != "u8" {
        return Err(Error::DtypeMismatch {
            path: path_str(path),
            expected: "u8".into(),
            found: header.dtype,
        });
    }
    let n = header.dims.iter().product::<usize>();
    check_payload(payload, n, path)?;
    LabelMap::new(
        (header.dims[0], header.dims[1], header.dims[2]),
        payload.to_vec(),
    )
}

/// Which training pool a subject belongs to: manually clean labels or the
/// uncorrected automatic ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Clean,
    Uncorrected,
}

/// One subject in a dataset manifest. Paths are resolved relative to the
/// manifest file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume_path: String,
    pub label_path: String,
    pub pool: Pool,
    pub age_t: f64,
}

/// A manifest is a JSON array of entries.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let json = serde_json::to_string_pretty(entries)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let bytes = fs::read(path.as_ref())?;
    Ok(serde_json::from_slice(&bytes)?)
}
