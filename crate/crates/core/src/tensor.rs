//! Neutral tensor file format shared by every stage and the backend protocol.
//!
//! ```text
//! "CASCTNSR" | {"dtype":"f32"|"u8","shape":[..],"spacing":[..]?,"id":..?}\n | payload
//! ```
//!
//! The payload is little-endian, row-major. A tensor is self-delimiting, so
//! several can be concatenated back to back.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fsutil;
use crate::grid::{Grid2, Grid3, Mask2D, Mask3D};
use crate::volume::{Volume, DEFAULT_SPACING};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CASCTNSR";

/// Upper bound on a header line; anything longer is treated as corrupt.
const MAX_HEADER: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "u8")]
    U8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub spacing: Option<Vec<f64>>,
    pub id: Option<String>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::checked(shape, TensorData::F32(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::checked(shape, TensorData::U8(data))
    }

    fn checked(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        let len = match &data {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        };
        if n != len {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements, payload has {len}"
            )));
        }
        Ok(Self {
            shape,
            spacing: None,
            id: None,
            data,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = Some(spacing.to_vec());
        self
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn header(&self) -> TensorHeader {
        TensorHeader {
            dtype: self.dtype(),
            shape: self.shape.clone(),
            spacing: self.spacing.clone(),
            id: self.id.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        serde_json::to_writer(&mut *w, &self.header())?;
        w.write_all(b"\n")?;
        match &self.data {
            TensorData::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            TensorData::U8(v) => w.write_all(v)?,
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let mut line = Vec::new();
        r.by_ref()
            .take(MAX_HEADER as u64)
            .read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Format("unterminated tensor header".into()));
        }
        line.pop();
        let header: TensorHeader = serde_json::from_slice(&line)
            .map_err(|e| Error::Format(format!("tensor header: {e}")))?;
        let n = header
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor shape overflows".into()))?;
        let data = match header.dtype {
            DType::F32 => {
                let mut raw = vec![0u8; n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?];
                r.read_exact(&mut raw)?;
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                )
            }
            DType::U8 => {
                let mut raw = vec![0u8; n];
                r.read_exact(&mut raw)?;
                TensorData::U8(raw)
            }
        };
        Ok(Self {
            shape: header.shape,
            spacing: header.spacing,
            id: header.id,
            data,
        })
    }

    /// Parse every tensor in `bytes`, which must be consumed exactly.
    pub fn read_all(bytes: &[u8]) -> Result<Vec<Self>> {
        let mut cursor = std::io::Cursor::new(bytes);
        let mut out = Vec::new();
        while (cursor.position() as usize) < bytes.len() {
            out.push(Self::read_from(&mut cursor)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }

    fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::Format(format!(
                "expected a rank-{rank} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    fn f32_data(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::Format("expected f32 tensor, got u8".into())),
        }
    }

    fn u8_data(self) -> Result<Vec<u8>> {
        match self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Format("expected u8 tensor, got f32".into())),
        }
    }

    fn bits(self) -> Result<Vec<bool>> {
        self.u8_data()?
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("mask value {other} is not 0/1"))),
            })
            .collect()
    }

    fn shape3(&self) -> (usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn from_volume(v: &Volume) -> Self {
        let (d, h, w) = v.shape();
        Self {
            shape: vec![d, h, w],
            spacing: Some(v.spacing.to_vec()),
            id: Some(v.id.clone()),
            data: TensorData::F32(v.voxels.data().to_vec()),
        }
    }

    /// Missing spacing falls back to 1 mm isotropic; a missing id to `fallback_id`.
    pub fn into_volume(self, fallback_id: &str) -> Result<Volume> {
        self.expect_rank(3)?;
        let spacing = match &self.spacing {
            None => DEFAULT_SPACING,
            Some(s) if s.len() == 3 => [s[0], s[1], s[2]],
            Some(s) => return Err(Error::Format(format!("spacing {s:?} is not a triple"))),
        };
        let id = self.id.clone().unwrap_or_else(|| fallback_id.to_string());
        let shape = self.shape3();
        Volume::new(id, Grid3::from_vec(shape, self.f32_data()?)?, spacing)
    }

    pub fn from_mask3(m: &Mask3D) -> Self {
        let (d, h, w) = m.shape();
        Self {
            shape: vec![d, h, w],
            spacing: None,
            id: None,
            data: TensorData::U8(m.data().iter().map(|&b| b as u8).collect()),
        }
    }

    pub fn into_mask3(self) -> Result<Mask3D> {
        self.expect_rank(3)?;
        let shape = self.shape3();
        Grid3::from_vec(shape, self.bits()?)
    }

    pub fn from_grid3(g: &Grid3<f32>) -> Self {
        let (d, h, w) = g.shape();
        Self {
            shape: vec![d, h, w],
            spacing: None,
            id: None,
            data: TensorData::F32(g.data().to_vec()),
        }
    }

    pub fn into_grid3(self) -> Result<Grid3<f32>> {
        self.expect_rank(3)?;
        let shape = self.shape3();
        Grid3::from_vec(shape, self.f32_data()?)
    }

    pub fn from_image(g: &Grid2<f32>) -> Self {
        Self {
            shape: vec![g.rows(), g.cols()],
            spacing: None,
            id: None,
            data: TensorData::F32(g.data().to_vec()),
        }
    }

    pub fn into_image(self) -> Result<Grid2<f32>> {
        self.expect_rank(2)?;
        let (h, w) = (self.shape[0], self.shape[1]);
        Grid2::from_vec(h, w, self.f32_data()?)
    }

    pub fn from_mask2(m: &Mask2D) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            spacing: None,
            id: None,
            data: TensorData::U8(m.data().iter().map(|&b| b as u8).collect()),
        }
    }

    pub fn into_mask2(self) -> Result<Mask2D> {
        self.expect_rank(2)?;
        let (h, w) = (self.shape[0], self.shape[1]);
        Grid2::from_vec(h, w, self.bits()?)
    }

    /// Channel stack `[k, h, w]`.
    pub fn from_channels(channels: &[Grid2<f32>]) -> Result<Self> {
        let g = Grid3::from_planes(channels)?;
        Ok(Self::from_grid3(&g))
    }

    pub fn into_channels(self) -> Result<Vec<Grid2<f32>>> {
        Ok(self.into_grid3()?.planes())
    }

    pub fn from_blob(bytes: &[u8]) -> Self {
        Self {
            shape: vec![bytes.len()],
            spacing: None,
            id: None,
            data: TensorData::U8(bytes.to_vec()),
        }
    }

    pub fn into_blob(self) -> Result<Vec<u8>> {
        self.expect_rank(1)?;
        self.u8_data()
    }
}
