//! FVL1 feature exchange format.
//!
//! Little-endian, 44-byte header followed by `channels` f32 planes:
//!
//! | offset | type     | field                     |
//! |--------|----------|---------------------------|
//! | 0      | [u8; 4]  | magic `"FVL1"`            |
//! | 4      | u32      | version = 1               |
//! | 8      | u32 x 3  | nx, ny, nz                |
//! | 20     | u32      | channels                  |
//! | 24     | f32 x 3  | sx, sy, sz                |
//! | 36     | u32      | stride                    |
//! | 40     | u8       | dtype (0 = f32)           |
//! | 41     | [u8; 3]  | zero padding              |
//!
//! Displacement fields are stored as 3-channel files; a stride above 1
//! marks a control-resolution field.

use std::path::Path;

use crate::error::{Error, Fvl1Error, Result};
use crate::features::FeatureVolume;
use crate::field::{DisplacementField, Resolution};
use crate::volume::GridGeometry;

pub const MAGIC: [u8; 4] = *b"FVL1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 44;
pub const DTYPE_F32: u8 = 0;

/// Decoded header fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fvl1Header {
    pub dims: [u32; 3],
    pub channels: u32,
    pub spacing: [f32; 3],
    pub stride: u32,
}

impl Fvl1Header {
    pub fn payload_len(&self) -> usize {
        4 * self.channels as usize * self.dims.iter().map(|&d| d as usize).product::<usize>()
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4..8].copy_from_slice(&VERSION.to_le_bytes());
        for (a, d) in self.dims.iter().enumerate() {
            h[8 + 4 * a..12 + 4 * a].copy_from_slice(&d.to_le_bytes());
        }
        h[20..24].copy_from_slice(&self.channels.to_le_bytes());
        for (a, s) in self.spacing.iter().enumerate() {
            h[24 + 4 * a..28 + 4 * a].copy_from_slice(&s.to_le_bytes());
        }
        h[36..40].copy_from_slice(&self.stride.to_le_bytes());
        h[40] = DTYPE_F32;
        h
    }

    fn decode(bytes: &[u8]) -> std::result::Result<Self, Fvl1Error> {
        if bytes.len() < 4 || bytes[0..4] != MAGIC {
            let mut found = [0u8; 4];
            let n = bytes.len().min(4);
            found[..n].copy_from_slice(&bytes[..n]);
            return Err(Fvl1Error::BadMagic { found });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Fvl1Error::TruncatedHeader(bytes.len()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Fvl1Error::Version(version));
        }
        if bytes[40] != DTYPE_F32 {
            return Err(Fvl1Error::Dtype(bytes[40]));
        }
        if bytes[41..44] != [0, 0, 0] {
            return Err(Fvl1Error::Header("non-zero padding bytes".into()));
        }
        Ok(Self {
            dims: [u32_at(8), u32_at(12), u32_at(16)],
            channels: u32_at(20),
            spacing: [f32_at(24), f32_at(28), f32_at(32)],
            stride: u32_at(36),
        })
    }
}

fn encode(header: &Fvl1Header, payload: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * payload.len());
    out.extend_from_slice(&header.encode());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an FVL1 byte buffer into header and payload.
pub fn decode(bytes: &[u8]) -> std::result::Result<(Fvl1Header, Vec<f32>), Fvl1Error> {
    let header = Fvl1Header::decode(bytes)?;
    let expected = header.payload_len();
    let found = bytes.len() - HEADER_LEN;
    if found < expected {
        return Err(Fvl1Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(Fvl1Error::TrailingBytes {
            extra: found - expected,
        });
    }
    let payload: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let bad = payload.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Fvl1Error::NonFinite { count: bad });
    }
    Ok((header, payload))
}

fn header_geometry(h: &Fvl1Header) -> std::result::Result<GridGeometry, Fvl1Error> {
    GridGeometry::new(h.dims.map(|d| d as usize), h.spacing)
        .map_err(|e| Fvl1Error::Header(e.to_string()))
}

pub fn features_to_bytes(fv: &FeatureVolume) -> Vec<u8> {
    let g = fv.geometry();
    let header = Fvl1Header {
        dims: g.dims().map(|d| d as u32),
        channels: fv.channels() as u32,
        spacing: g.spacing(),
        stride: fv.stride() as u32,
    };
    encode(&header, fv.data())
}

pub fn features_from_bytes(bytes: &[u8]) -> std::result::Result<FeatureVolume, Fvl1Error> {
    let (h, payload) = decode(bytes)?;
    let geometry = header_geometry(&h)?;
    if h.channels == 0 || h.stride == 0 {
        return Err(Fvl1Error::Header("channels and stride must be >= 1".into()));
    }
    FeatureVolume::new(geometry, h.channels as usize, h.stride as usize, payload)
        .map_err(|e| Fvl1Error::Header(e.to_string()))
}

pub fn field_to_bytes(u: &DisplacementField) -> Vec<u8> {
    let g = u.geometry();
    let header = Fvl1Header {
        dims: g.dims().map(|d| d as u32),
        channels: 3,
        spacing: g.spacing(),
        stride: u.resolution().stride() as u32,
    };
    encode(&header, u.data())
}

pub fn field_from_bytes(bytes: &[u8]) -> std::result::Result<DisplacementField, Fvl1Error> {
    let (h, payload) = decode(bytes)?;
    if h.channels != 3 {
        return Err(Fvl1Error::Header(format!(
            "displacement fields have 3 channels, found {}",
            h.channels
        )));
    }
    if h.stride == 0 {
        return Err(Fvl1Error::Header("stride must be >= 1".into()));
    }
    let geometry = header_geometry(&h)?;
    DisplacementField::new(
        geometry,
        Resolution::from_stride(h.stride as usize),
        payload,
    )
    .map_err(|e| Fvl1Error::Header(e.to_string()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn wrap(path: &Path) -> impl FnOnce(Fvl1Error) -> Error + '_ {
    move |source| Error::Fvl1 {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a feature volume from an FVL1 file.
pub fn ingest_features(path: &Path) -> Result<FeatureVolume> {
    features_from_bytes(&read_bytes(path)?).map_err(wrap(path))
}

pub fn read_fvl1(path: &Path) -> Result<FeatureVolume> {
    ingest_features(path)
}

pub fn write_fvl1(fv: &FeatureVolume, path: &Path) -> Result<()> {
    std::fs::write(path, features_to_bytes(fv)).map_err(|e| Error::io(path, e))
}

pub fn read_displacement(path: &Path) -> Result<DisplacementField> {
    field_from_bytes(&read_bytes(path)?).map_err(wrap(path))
}

pub fn write_displacement(u: &DisplacementField, path: &Path) -> Result<()> {
    std::fs::write(path, field_to_bytes(u)).map_err(|e| Error::io(path, e))
}
