//! NIfTI-1 subset: 3D scalar and label volumes, uint8/int16/float32/float64,
//! optional gzip, either byte order on read. Orientation is ignored.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, NiftiError, Result};
use crate::metrics::LabelVolume;
use crate::volume::{GridGeometry, Volume3};

pub const HEADER_SIZE: usize = 348;
pub const DEFAULT_VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

fn bytes_per_voxel(datatype: i16) -> Option<usize> {
    match datatype {
        DT_UINT8 => Some(1),
        DT_INT16 => Some(2),
        DT_FLOAT32 => Some(4),
        DT_FLOAT64 => Some(8),
        _ => None,
    }
}

/// The header fields this reader interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeaderSubset {
    pub dims: [usize; 3],
    pub pixdim: [f32; 3],
    pub datatype: i16,
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub big_endian: bool,
    /// `"n+1"` single file or `"ni1"` header/image pair.
    pub single_file: bool,
    /// False when the stored orientation is not an axis-aligned,
    /// positively-scaled frame.
    pub axis_aligned: bool,
}

impl NiftiHeaderSubset {
    /// Slope/intercept are applied when the slope is non-zero and not the identity.
    pub fn has_scaling(&self) -> bool {
        self.scl_slope != 0.0
            && self.scl_slope.is_finite()
            && !(self.scl_slope == 1.0 && self.scl_inter == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NiftiPayload {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiFile {
    pub header: NiftiHeaderSubset,
    pub payload: NiftiPayload,
}

impl NiftiFile {
    fn geometry(&self) -> std::result::Result<GridGeometry, NiftiError> {
        let spacing = self.header.pixdim.map(f32::abs);
        GridGeometry::new(self.header.dims, spacing).map_err(|e| NiftiError::Header(e.to_string()))
    }

    /// Scalar view with slope/intercept applied.
    pub fn to_volume(&self) -> std::result::Result<Volume3, NiftiError> {
        let h = &self.header;
        let (slope, inter) = if h.has_scaling() {
            (h.scl_slope as f64, h.scl_inter as f64)
        } else {
            (1.0, 0.0)
        };
        let scale = |v: f64| (v * slope + inter) as f32;
        let data: Vec<f32> = match &self.payload {
            NiftiPayload::U8(v) => v.iter().map(|&x| scale(x as f64)).collect(),
            NiftiPayload::I16(v) => v.iter().map(|&x| scale(x as f64)).collect(),
            NiftiPayload::F32(v) if !h.has_scaling() => v.clone(),
            NiftiPayload::F32(v) => v.iter().map(|&x| scale(x as f64)).collect(),
            NiftiPayload::F64(v) => v.iter().map(|&x| scale(x)).collect(),
        };
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(NiftiError::NonFinite { count: bad });
        }
        Volume3::new(self.geometry()?, data).map_err(|e| NiftiError::Header(e.to_string()))
    }

    /// Label view. Integer files without scaling qualify; floating files
    /// qualify when every value is a non-negative integer.
    pub fn to_labels(&self) -> std::result::Result<LabelVolume, NiftiError> {
        if self.header.has_scaling() {
            return Err(NiftiError::NotLabels);
        }
        let from_float = |x: f64| -> std::result::Result<u32, NiftiError> {
            if x.is_finite() && x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
                Ok(x as u32)
            } else {
                Err(NiftiError::NotLabels)
            }
        };
        let labels: Vec<u32> = match &self.payload {
            NiftiPayload::U8(v) => v.iter().map(|&x| x as u32).collect(),
            NiftiPayload::I16(v) => v
                .iter()
                .map(|&x| u32::try_from(x).map_err(|_| NiftiError::LabelRange(x as i64)))
                .collect::<std::result::Result<_, _>>()?,
            NiftiPayload::F32(v) => v
                .iter()
                .map(|&x| from_float(x as f64))
                .collect::<std::result::Result<_, _>>()?,
            NiftiPayload::F64(v) => v
                .iter()
                .map(|&x| from_float(x))
                .collect::<std::result::Result<_, _>>()?,
        };
        LabelVolume::new(self.geometry()?, labels).map_err(|e| NiftiError::Header(e.to_string()))
    }
}

fn maybe_gunzip(bytes: Vec<u8>) -> std::io::Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    big: bool,
}

impl Reader<'_> {
    fn i16(&self, o: usize) -> i16 {
        let b = [self.bytes[o], self.bytes[o + 1]];
        if self.big {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }
    fn i32(&self, o: usize) -> i32 {
        let b = self.bytes[o..o + 4].try_into().unwrap();
        if self.big {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }
    fn f32(&self, o: usize) -> f32 {
        let b = self.bytes[o..o + 4].try_into().unwrap();
        if self.big {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

/// Parses the 348-byte header.
pub fn parse_header(bytes: &[u8]) -> std::result::Result<NiftiHeaderSubset, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::ShortHeader(bytes.len()));
    }
    let le = Reader { bytes, big: false };
    let ndim_le = le.i16(40);
    let r = Reader {
        bytes,
        big: !(1..=7).contains(&ndim_le),
    };
    let sizeof_hdr = r.i32(0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(NiftiError::HeaderSize(sizeof_hdr));
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    let single_file = match &magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(NiftiError::BadMagic(magic)),
    };
    let ndim = r.i16(40);
    let dim: Vec<i16> = (0..8).map(|i| r.i16(40 + 2 * i)).collect();
    let nt = if ndim >= 4 { dim[4] } else { 1 };
    if !(ndim == 3 || ndim == 4) || nt > 1 {
        return Err(NiftiError::Dimensionality { ndim, nt });
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(NiftiError::Header(format!(
            "non-positive dimensions {:?}",
            &dim[1..4]
        )));
    }
    let datatype = r.i16(70);
    if bytes_per_voxel(datatype).is_none() {
        return Err(NiftiError::UnsupportedDatatype(datatype));
    }
    let pixdim = [r.f32(80), r.f32(84), r.f32(88)];
    let qform_code = r.i16(252);
    let sform_code = r.i16(254);
    let axis_aligned = if sform_code > 0 {
        let srow: Vec<f32> = (0..12).map(|i| r.f32(280 + 4 * i)).collect();
        (0..3).all(|row| {
            (0..3).all(|col| {
                if row == col {
                    srow[4 * row + col] > 0.0
                } else {
                    srow[4 * row + col] == 0.0
                }
            })
        })
    } else if qform_code > 0 {
        let quat = [r.f32(256), r.f32(260), r.f32(264)];
        quat.iter().all(|&q| q == 0.0) && r.f32(76) >= 0.0
    } else {
        true
    };
    Ok(NiftiHeaderSubset {
        dims: [dim[1] as usize, dim[2] as usize, dim[3] as usize],
        pixdim,
        datatype,
        vox_offset: r.f32(108),
        scl_slope: r.f32(112),
        scl_inter: r.f32(116),
        big_endian: r.big,
        single_file,
        axis_aligned,
    })
}

fn decode_payload(
    h: &NiftiHeaderSubset,
    bytes: &[u8],
    offset: usize,
) -> std::result::Result<NiftiPayload, NiftiError> {
    let n: usize = h.dims.iter().product();
    let bpv = bytes_per_voxel(h.datatype).ok_or(NiftiError::UnsupportedDatatype(h.datatype))?;
    let expected = n * bpv;
    let found = bytes.len().saturating_sub(offset);
    if found < expected {
        return Err(NiftiError::TruncatedPayload {
            offset,
            expected,
            found,
        });
    }
    let raw = &bytes[offset..offset + expected];
    let big = h.big_endian;
    macro_rules! decode {
        ($t:ty, $w:expr) => {
            raw.chunks_exact($w)
                .map(|c| {
                    let b = c.try_into().unwrap();
                    if big {
                        <$t>::from_be_bytes(b)
                    } else {
                        <$t>::from_le_bytes(b)
                    }
                })
                .collect()
        };
    }
    let payload = match h.datatype {
        DT_UINT8 => NiftiPayload::U8(raw.to_vec()),
        DT_INT16 => NiftiPayload::I16(decode!(i16, 2)),
        DT_FLOAT32 => {
            let v: Vec<f32> = decode!(f32, 4);
            let bad = v.iter().filter(|x| !x.is_finite()).count();
            if bad > 0 {
                return Err(NiftiError::NonFinite { count: bad });
            }
            NiftiPayload::F32(v)
        }
        DT_FLOAT64 => {
            let v: Vec<f64> = decode!(f64, 8);
            let bad = v.iter().filter(|x| !x.is_finite()).count();
            if bad > 0 {
                return Err(NiftiError::NonFinite { count: bad });
            }
            NiftiPayload::F64(v)
        }
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    Ok(payload)
}

/// Parses an in-memory single-file NIfTI (optionally gzipped).
pub fn parse_nifti(bytes: Vec<u8>) -> std::result::Result<NiftiFile, NiftiError> {
    let bytes = maybe_gunzip(bytes).map_err(|e| NiftiError::Header(format!("gzip: {e}")))?;
    let header = parse_header(&bytes)?;
    if !header.single_file {
        return Err(NiftiError::Header(
            "ni1 header needs its .img companion".into(),
        ));
    }
    let offset = (header.vox_offset.max(HEADER_SIZE as f32)) as usize;
    let payload = decode_payload(&header, &bytes, offset)?;
    Ok(NiftiFile { header, payload })
}

fn companion_image(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    if let Some(stem) = s.strip_suffix(".hdr.gz") {
        PathBuf::from(format!("{stem}.img.gz"))
    } else {
        path.with_extension("img")
    }
}

fn nifti_err(path: &Path) -> impl FnOnce(NiftiError) -> Error + '_ {
    move |source| Error::Nifti {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a NIfTI-1 file (`.nii`, `.nii.gz`, or an `.hdr`/`.img` pair).
pub fn read_nifti(path: &Path) -> Result<NiftiFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = maybe_gunzip(bytes).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes).map_err(nifti_err(path))?;
    let file = if header.single_file {
        let offset = (header.vox_offset.max(HEADER_SIZE as f32)) as usize;
        let payload = decode_payload(&header, &bytes, offset).map_err(nifti_err(path))?;
        NiftiFile { header, payload }
    } else {
        let img_path = companion_image(path);
        let img = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let img = maybe_gunzip(img).map_err(|e| Error::io(&img_path, e))?;
        let offset = header.vox_offset.max(0.0) as usize;
        let payload = decode_payload(&header, &img, offset).map_err(nifti_err(&img_path))?;
        NiftiFile { header, payload }
    };
    if !file.header.axis_aligned {
        log::warn!(
            "{}: stored orientation is not axis-aligned; it is ignored and voxel order is used as-is",
            path.display()
        );
    }
    Ok(file)
}

pub fn read_volume(path: &Path) -> Result<Volume3> {
    read_nifti(path)?.to_volume().map_err(nifti_err(path))
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    read_nifti(path)?.to_labels().map_err(nifti_err(path))
}

fn header_bytes(dims: [usize; 3], spacing: [f32; 3], datatype: i16) -> Vec<u8> {
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, o: usize, v: i16| h[o..o + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, o: usize, v: f32| h[o..o + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dim = [
        3,
        dims[0] as i16,
        dims[1] as i16,
        dims[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, (8 * bytes_per_voxel(datatype).unwrap()) as i16);
    let pixdim = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p);
    }
    put_f32(&mut h, 108, DEFAULT_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // millimetres
    put_i16(&mut h, 254, 1); // sform: scanner-anat, diagonal
    for row in 0..3 {
        put_f32(&mut h, 280 + 16 * row + 4 * row, spacing[row]);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Geometry(format!(
            "{dims:?} exceeds NIfTI-1 dimension limits"
        )));
    }
    Ok(())
}

fn finish(path: &Path, bytes: Vec<u8>) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Encodes a float32 single-file NIfTI.
pub fn volume_to_bytes(vol: &Volume3) -> Result<Vec<u8>> {
    let g = vol.geometry();
    check_dims(g.dims())?;
    let mut bytes = header_bytes(g.dims(), g.spacing(), DT_FLOAT32);
    bytes.reserve(4 * g.len());
    for v in vol.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

/// Writes float32; a `.gz` extension selects gzip.
pub fn write_nifti(vol: &Volume3, path: &Path) -> Result<()> {
    finish(path, volume_to_bytes(vol)?)
}

/// Encodes labels as uint8 when they fit, otherwise int16.
pub fn labels_to_bytes(seg: &LabelVolume) -> Result<Vec<u8>> {
    let g = seg.geometry();
    check_dims(g.dims())?;
    let max = seg.labels().iter().copied().max().unwrap_or(0);
    let mut bytes;
    if max <= u8::MAX as u32 {
        bytes = header_bytes(g.dims(), g.spacing(), DT_UINT8);
        bytes.extend(seg.labels().iter().map(|&l| l as u8));
    } else if max <= i16::MAX as u32 {
        bytes = header_bytes(g.dims(), g.spacing(), DT_INT16);
        for &l in seg.labels() {
            bytes.extend_from_slice(&(l as i16).to_le_bytes());
        }
    } else {
        return Err(Error::Nifti {
            path: PathBuf::new(),
            source: NiftiError::LabelRange(max as i64),
        });
    }
    Ok(bytes)
}

pub fn write_labels(seg: &LabelVolume, path: &Path) -> Result<()> {
    finish(path, labels_to_bytes(seg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol() -> Volume3 {
        let g = GridGeometry::new([4, 3, 2], [2.0, 1.5, 3.0]).unwrap();
        Volume3::from_fn(g, |i, j, k| i as f32 * 0.5 - j as f32 + 7.25 * k as f32).unwrap()
    }

    #[test]
    fn float_round_trip_in_memory() {
        let bytes = volume_to_bytes(&vol()).unwrap();
        let file = parse_nifti(bytes.clone()).unwrap();
        assert_eq!(file.header.dims, [4, 3, 2]);
        assert_eq!(file.header.pixdim, [2.0, 1.5, 3.0]);
        assert!(file.header.axis_aligned);
        let back = file.to_volume().unwrap();
        assert_eq!(back, vol());
        assert_eq!(
            volume_to_bytes(&back).unwrap()[DEFAULT_VOX_OFFSET..],
            bytes[DEFAULT_VOX_OFFSET..]
        );
    }

    #[test]
    fn int16_slope_intercept() {
        let g = GridGeometry::isotropic([2, 2, 2]).unwrap();
        let seg = LabelVolume::new(g, vec![10, 0, 0, 0, 0, 0, 0, 300]).unwrap();
        let mut bytes = labels_to_bytes(&seg).unwrap();
        assert_eq!(i16::from_le_bytes([bytes[70], bytes[71]]), DT_INT16);
        bytes[112..116].copy_from_slice(&2f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1f32.to_le_bytes());
        let file = parse_nifti(bytes).unwrap();
        let v = file.to_volume().unwrap();
        assert_eq!(v.data()[0], 21.0);
        assert_eq!(file.to_labels(), Err(NiftiError::NotLabels));
    }

    #[test]
    fn rejects_unsupported_and_malformed() {
        let mut bytes = volume_to_bytes(&vol()).unwrap();
        bytes[70..72].copy_from_slice(&128i16.to_le_bytes());
        assert_eq!(
            parse_nifti(bytes).unwrap_err(),
            NiftiError::UnsupportedDatatype(128)
        );

        let mut bytes = volume_to_bytes(&vol()).unwrap();
        bytes[40..42].copy_from_slice(&4i16.to_le_bytes());
        bytes[48..50].copy_from_slice(&5i16.to_le_bytes());
        assert_eq!(
            parse_nifti(bytes).unwrap_err(),
            NiftiError::Dimensionality { ndim: 4, nt: 5 }
        );

        let bytes = volume_to_bytes(&vol()).unwrap();
        let cut = bytes[..bytes.len() - 3].to_vec();
        assert!(matches!(
            parse_nifti(cut),
            Err(NiftiError::TruncatedPayload { .. })
        ));

        let mut bytes = volume_to_bytes(&vol()).unwrap();
        bytes[344..348].copy_from_slice(b"FVL1");
        assert!(matches!(parse_nifti(bytes), Err(NiftiError::BadMagic(_))));

        let mut bytes = volume_to_bytes(&vol()).unwrap();
        bytes[DEFAULT_VOX_OFFSET..DEFAULT_VOX_OFFSET + 4]
            .copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert_eq!(
            parse_nifti(bytes).unwrap_err(),
            NiftiError::NonFinite { count: 1 }
        );
    }

    #[test]
    fn big_endian_header_detected() {
        // hand-build a big-endian int16 volume
        let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        for (i, d) in [3i16, 2, 2, 2, 1, 1, 1, 1].iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        h[70..72].copy_from_slice(&DT_INT16.to_be_bytes());
        for i in 0..4 {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&1f32.to_be_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_be_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        for v in 0..8i16 {
            h.extend_from_slice(&(v * 100).to_be_bytes());
        }
        let file = parse_nifti(h).unwrap();
        assert!(file.header.big_endian);
        assert_eq!(
            file.to_labels().unwrap().labels(),
            &[0, 100, 200, 300, 400, 500, 600, 700]
        );
    }

    #[test]
    fn gzip_and_pair_files() {
        let dir = tempfile::tempdir().unwrap();
        let gz = dir.path().join("v.nii.gz");
        write_nifti(&vol(), &gz).unwrap();
        let raw = std::fs::read(&gz).unwrap();
        assert_eq!(&raw[..2], &[0x1f, 0x8b]);
        assert_eq!(read_volume(&gz).unwrap(), vol());

        // split into .hdr/.img with ni1 magic
        let mut bytes = volume_to_bytes(&vol()).unwrap();
        let img = bytes.split_off(DEFAULT_VOX_OFFSET);
        bytes.truncate(HEADER_SIZE);
        bytes[344..348].copy_from_slice(b"ni1\0");
        bytes[108..112].copy_from_slice(&0f32.to_le_bytes());
        std::fs::write(dir.path().join("p.hdr"), &bytes).unwrap();
        std::fs::write(dir.path().join("p.img"), &img).unwrap();
        assert_eq!(read_volume(&dir.path().join("p.hdr")).unwrap(), vol());
    }

    #[test]
    fn labels_round_trip_and_float_labels() {
        let g = GridGeometry::isotropic([3, 3, 3]).unwrap();
        let seg = LabelVolume::from_fn(g, |i, j, k| ((i + j + k) % 4) as u32);
        let file = parse_nifti(labels_to_bytes(&seg).unwrap()).unwrap();
        assert_eq!(file.header.datatype, DT_UINT8);
        assert_eq!(file.to_labels().unwrap(), seg);

        let as_float = Volume3::from_fn(g, |i, j, k| ((i + j + k) % 4) as f32).unwrap();
        let file = parse_nifti(volume_to_bytes(&as_float).unwrap()).unwrap();
        assert_eq!(file.to_labels().unwrap(), seg);
        let frac = Volume3::filled(g, 0.5);
        assert_eq!(
            parse_nifti(volume_to_bytes(&frac).unwrap())
                .unwrap()
                .to_labels(),
            Err(NiftiError::NotLabels)
        );
    }
}
