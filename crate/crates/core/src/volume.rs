//! Dense 3-D scalar volumes and their on-disk format.
//!
//! A volume is stored as a pair of files: `<name>.json` carrying the header
//! (dtype, shape, axis order, endianness) and a sibling `<name>.raw` holding
//! the payload as little-endian scalars in row-major z/y/x order (z slowest,
//! x fastest). Round-trips are bit-exact for both supported dtypes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar storage of a [`Volume`]: `u8` for binary labels, `f32` for
/// images, probability maps and proximity scores.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

/// A dense 3-D scalar grid with shape `(depth, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: VolumeData,
}

impl Volume {
    pub fn from_f32(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Self::check_len(shape, data.len())?;
        Ok(Self {
            shape,
            data: VolumeData::F32(data),
        })
    }

    pub fn from_u8(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        Self::check_len(shape, data.len())?;
        Ok(Self {
            shape,
            data: VolumeData::U8(data),
        })
    }

    pub fn zeros_f32(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: VolumeData::F32(vec![0.0; shape[0] * shape[1] * shape[2]]),
        }
    }

    pub fn zeros_u8(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: VolumeData::U8(vec![0; shape[0] * shape[1] * shape[2]]),
        }
    }

    fn check_len(shape: [usize; 3], len: usize) -> Result<()> {
        let expect = shape[0] * shape[1] * shape[2];
        if len != expect {
            return Err(Error::Shape(format!(
                "volume data length {len} does not match shape {shape:?} (expected {expect})"
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn dtype(&self) -> &'static str {
        match self.data {
            VolumeData::U8(_) => "uint8",
            VolumeData::F32(_) => "float32",
        }
    }

    /// Flat index of voxel `(z, y, x)`.
    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            VolumeData::F32(v) => Ok(v),
            VolumeData::U8(_) => Err(Error::Data("expected float32 volume, got uint8".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            VolumeData::U8(v) => Ok(v),
            VolumeData::F32(_) => Err(Error::Data("expected uint8 volume, got float32".into())),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            VolumeData::F32(v) => Ok(v),
            VolumeData::U8(_) => Err(Error::Data("expected float32 volume, got uint8".into())),
        }
    }

    pub fn as_u8_mut(&mut self) -> Result<&mut [u8]> {
        match &mut self.data {
            VolumeData::U8(v) => Ok(v),
            VolumeData::F32(_) => Err(Error::Data("expected uint8 volume, got float32".into())),
        }
    }

    /// True when every voxel is 0 or 1. Required of label volumes.
    pub fn is_binary(&self) -> bool {
        match &self.data {
            VolumeData::U8(v) => v.iter().all(|&b| b <= 1),
            VolumeData::F32(v) => v.iter().all(|&x| x == 0.0 || x == 1.0),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dtype: String,
    shape: [usize; 3],
    order: String,
    endian: String,
}

/// Resolve `path` to the header/payload pair, accepting either the base
/// name or the `.json` header path. Extensions are appended, not swapped:
/// base names may themselves contain dots (e.g. `sample000.image`).
fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.as_os_str().to_string_lossy();
    let base = s.strip_suffix(".json").unwrap_or(&s);
    (
        PathBuf::from(format!("{base}.json")),
        PathBuf::from(format!("{base}.raw")),
    )
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let (header_path, raw_path) = volume_paths(path.as_ref());
    let header = VolumeHeader {
        dtype: v.dtype().to_string(),
        shape: v.shape,
        order: "zyx".to_string(),
        endian: "little".to_string(),
    };
    fs::write(&header_path, serde_json::to_vec_pretty(&header)?)?;
    let payload: Vec<u8> = match &v.data {
        VolumeData::U8(d) => d.clone(),
        VolumeData::F32(d) => d.iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    fs::write(&raw_path, payload)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (header_path, raw_path) = volume_paths(path.as_ref());
    let header: VolumeHeader = serde_json::from_slice(&fs::read(&header_path)?)
        .map_err(|e| Error::Data(format!("malformed volume header {header_path:?}: {e}")))?;
    if header.order != "zyx" {
        return Err(Error::Data(format!(
            "unsupported axis order {:?} (expected \"zyx\")",
            header.order
        )));
    }
    if header.endian != "little" {
        return Err(Error::Data(format!(
            "unsupported endianness {:?} (expected \"little\")",
            header.endian
        )));
    }
    let payload = fs::read(&raw_path)?;
    let numel = header.shape[0] * header.shape[1] * header.shape[2];
    match header.dtype.as_str() {
        "uint8" => {
            if payload.len() != numel {
                return Err(Error::Data(format!(
                    "payload size {} does not match shape {:?} at dtype uint8 (expected {numel})",
                    payload.len(),
                    header.shape
                )));
            }
            Volume::from_u8(header.shape, payload)
        }
        "float32" => {
            if payload.len() != numel * 4 {
                return Err(Error::Data(format!(
                    "payload size {} does not match shape {:?} at dtype float32 (expected {})",
                    payload.len(),
                    header.shape,
                    numel * 4
                )));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Volume::from_f32(header.shape, data)
        }
        other => Err(Error::Data(format!("unsupported dtype {other:?}"))),
    }
}

/// Voxel-coordinate point set marking tube centerlines, ordered `(z, y, x)`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CenterlineSet {
    points: Vec<[usize; 3]>,
}

impl CenterlineSet {
    /// Builds a set, rejecting duplicate points.
    pub fn new(points: Vec<[usize; 3]>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(points.len());
        for p in &points {
            if !seen.insert(*p) {
                return Err(Error::InvalidArg(format!(
                    "duplicate centerline point {p:?}"
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[usize; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn in_bounds(&self, shape: [usize; 3]) -> bool {
        self.points
            .iter()
            .all(|p| p[0] < shape[0] && p[1] < shape[1] && p[2] < shape[2])
    }
}

/// Serialized as a JSON array of `[z, y, x]` integer triples.
pub fn write_centerline(path: impl AsRef<Path>, c: &CenterlineSet) -> Result<()> {
    Ok(fs::write(path, serde_json::to_vec_pretty(&c.points)?)?)
}

pub fn read_centerline(path: impl AsRef<Path>) -> Result<CenterlineSet> {
    let points: Vec<[usize; 3]> = serde_json::from_slice(&fs::read(path)?)?;
    CenterlineSet::new(points)
}
