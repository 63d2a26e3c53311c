//! Minimal NIfTI-1 (`.nii`, single file, little-endian) reader and writer.
//!
//! Scalar volumes are written as float32 and label volumes as uint8, with a
//! 348-byte header, a zeroed 4-byte extension flag and the voxel data at
//! offset 352. Reading accepts uint8, int16, uint16, float32 and float64 and
//! applies `scl_slope`/`scl_inter` when the slope is nonzero. Orientation
//! matrices are not interpreted: geometry comes from `dim`, `pixdim` and the
//! qform offsets (which hold the origin).

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::volume::{labels, GridGeometry, LabelVolume, ScalarVolume, Volume, VolumeError, DEFAULT_VOXEL_CAP};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;
pub const DT_UINT16: i16 = 512;

// byte offsets inside the 348-byte header
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_QOFFSET: usize = 268;
const OFF_SROW: usize = 280;
const OFF_MAGIC: usize = 344;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("file truncated: need {needed} bytes, have {actual}")]
    Truncated { needed: usize, actual: usize },
    #[error("label value {value} at voxel {index} is not an allowed label")]
    InvalidLabel { index: usize, value: f64 },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Whether to interpret file contents as intensities or labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Scalar,
    Label,
}

/// The header fields this crate reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qoffset: [f32; 3],
}

impl NiftiHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self, NiftiError> {
        if bytes.len() < HEADER_SIZE {
            return Err(NiftiError::Truncated { needed: HEADER_SIZE, actual: bytes.len() });
        }
        let sizeof_hdr = i32_at(bytes, 0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
                return Err(NiftiError::MalformedHeader("big-endian files are not supported".into()));
            }
            return Err(NiftiError::MalformedHeader(format!("sizeof_hdr = {sizeof_hdr}, expected 348")));
        }
        if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC {
            return Err(NiftiError::MalformedHeader(format!(
                "magic {:?} is not single-file NIfTI-1",
                &bytes[OFF_MAGIC..OFF_MAGIC + 4]
            )));
        }
        let mut dim = [0i16; 8];
        let mut pixdim = [0f32; 8];
        for k in 0..8 {
            dim[k] = i16_at(bytes, OFF_DIM + 2 * k);
            pixdim[k] = f32_at(bytes, OFF_PIXDIM + 4 * k);
        }
        Ok(Self {
            dim,
            datatype: i16_at(bytes, OFF_DATATYPE),
            bitpix: i16_at(bytes, OFF_BITPIX),
            pixdim,
            vox_offset: f32_at(bytes, OFF_VOX_OFFSET),
            scl_slope: f32_at(bytes, OFF_SCL_SLOPE),
            scl_inter: f32_at(bytes, OFF_SCL_INTER),
            qoffset: [0, 1, 2].map(|k| f32_at(bytes, OFF_QOFFSET + 4 * k)),
        })
    }

    /// Grid geometry described by `dim`/`pixdim`/qoffset.
    pub fn geometry(&self, cap: usize) -> Result<GridGeometry, NiftiError> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(NiftiError::MalformedHeader(format!("dim[0] = {ndim} outside 1..=7")));
        }
        let ndim = ndim as usize;
        for k in 1..=ndim {
            if self.dim[k] < 1 {
                return Err(NiftiError::MalformedHeader(format!("dim[{k}] = {} < 1", self.dim[k])));
            }
        }
        for k in 4..=ndim {
            if self.dim[k] != 1 {
                return Err(NiftiError::MalformedHeader(format!(
                    "only single 3D volumes are supported, dim[{k}] = {}",
                    self.dim[k]
                )));
            }
        }
        let mut dims = [1usize; 3];
        let mut spacing = [1f32; 3];
        for a in 0..3.min(ndim) {
            dims[a] = self.dim[a + 1] as usize;
            let s = self.pixdim[a + 1].abs();
            spacing[a] = if s > 0.0 && s.is_finite() { s } else { 1.0 };
        }
        GridGeometry::with_cap(dims, spacing, self.qoffset, cap).map_err(|e| match e {
            VolumeError::InvalidGeometry(msg) => NiftiError::MalformedHeader(msg),
            other => other.into(),
        })
    }

    fn bytes_per_voxel(&self) -> Result<usize, NiftiError> {
        let (size, bits) = match self.datatype {
            DT_UINT8 => (1, 8),
            DT_INT16 | DT_UINT16 => (2, 16),
            DT_FLOAT32 => (4, 32),
            DT_FLOAT64 => (8, 64),
            other => return Err(NiftiError::UnsupportedDatatype(other)),
        };
        if self.bitpix != bits {
            return Err(NiftiError::MalformedHeader(format!(
                "bitpix {} inconsistent with datatype {}",
                self.bitpix, self.datatype
            )));
        }
        Ok(size)
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Decodes raw voxel data to f64 with intensity scaling applied.
fn decode_values(header: &NiftiHeader, bytes: &[u8], count: usize) -> Result<Vec<f64>, NiftiError> {
    let width = header.bytes_per_voxel()?;
    let offset = header.vox_offset;
    if !(offset.is_finite() && offset >= HEADER_SIZE as f32) {
        return Err(NiftiError::MalformedHeader(format!("vox_offset = {offset}")));
    }
    let offset = offset as usize;
    let needed = offset + count * width;
    if bytes.len() < needed {
        return Err(NiftiError::Truncated { needed, actual: bytes.len() });
    }
    let data = &bytes[offset..needed];
    let raw: Vec<f64> = match header.datatype {
        DT_UINT8 => data.iter().map(|&b| f64::from(b)).collect(),
        DT_INT16 => data.chunks_exact(2).map(|c| f64::from(i16::from_le_bytes([c[0], c[1]]))).collect(),
        DT_UINT16 => data.chunks_exact(2).map(|c| f64::from(u16::from_le_bytes([c[0], c[1]]))).collect(),
        DT_FLOAT32 => data
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        DT_FLOAT64 => data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let slope = header.scl_slope;
    if slope != 0.0 && slope.is_finite() {
        let (slope, inter) = (f64::from(slope), f64::from(header.scl_inter));
        if slope != 1.0 || inter != 0.0 {
            return Ok(raw.into_iter().map(|v| v * slope + inter).collect());
        }
    }
    Ok(raw)
}

/// Parses an in-memory NIfTI-1 file.
pub fn decode_volume(bytes: &[u8], kind: VolumeKind) -> Result<Volume, NiftiError> {
    decode_volume_with_cap(bytes, kind, DEFAULT_VOXEL_CAP)
}

pub fn decode_volume_with_cap(bytes: &[u8], kind: VolumeKind, cap: usize) -> Result<Volume, NiftiError> {
    let header = NiftiHeader::parse(bytes)?;
    let geometry = header.geometry(cap)?;
    let values = decode_values(&header, bytes, geometry.len())?;
    match kind {
        VolumeKind::Scalar => {
            let values = values.into_iter().map(|v| v as f32).collect();
            Ok(Volume::Scalar(ScalarVolume::new(geometry, values)?))
        }
        VolumeKind::Label => {
            let mut out = Vec::with_capacity(values.len());
            for (index, v) in values.into_iter().enumerate() {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) || !labels::is_valid(v as u8) {
                    return Err(NiftiError::InvalidLabel { index, value: v });
                }
                out.push(v as u8);
            }
            Ok(Volume::Label(LabelVolume::new(geometry, out)?))
        }
    }
}

pub fn read_volume(path: impl AsRef<Path>, kind: VolumeKind) -> Result<Volume, NiftiError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| NiftiError::Io { path: path.display().to_string(), source })?;
    decode_volume(&bytes, kind)
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume, NiftiError> {
    match read_volume(path, VolumeKind::Scalar)? {
        Volume::Scalar(v) => Ok(v),
        Volume::Label(_) => unreachable!(),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume, NiftiError> {
    match read_volume(path, VolumeKind::Label)? {
        Volume::Label(v) => Ok(v),
        Volume::Scalar(_) => unreachable!(),
    }
}

fn encode_header(geometry: &GridGeometry, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r'; // regular
    let dims = geometry.dims();
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (k, d) in dim.iter().enumerate() {
        put_i16(&mut h, OFF_DIM + 2 * k, *d);
    }
    put_i16(&mut h, OFF_DATATYPE, datatype);
    put_i16(&mut h, OFF_BITPIX, bitpix);
    let sp = geometry.spacing();
    let pixdim = [1.0, sp[0], sp[1], sp[2], 1.0, 1.0, 1.0, 1.0];
    for (k, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, OFF_PIXDIM + 4 * k, *p);
    }
    put_f32(&mut h, OFF_VOX_OFFSET, VOX_OFFSET as f32);
    put_f32(&mut h, OFF_SCL_SLOPE, 1.0);
    put_f32(&mut h, OFF_SCL_INTER, 0.0);
    h[OFF_XYZT_UNITS] = 2 | 8; // mm, seconds
    // identity orientation; the origin lives in the qform offsets and srow translation
    put_i16(&mut h, OFF_QFORM_CODE, 1);
    put_i16(&mut h, OFF_SFORM_CODE, 1);
    let origin = geometry.origin();
    for k in 0..3 {
        put_f32(&mut h, OFF_QOFFSET + 4 * k, origin[k]);
        let row = OFF_SROW + 16 * k;
        put_f32(&mut h, row + 4 * k, sp[k]);
        put_f32(&mut h, row + 12, origin[k]);
    }
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);
    // bytes 348..352: extension flag, all zero
    h
}

/// Serializes a volume to NIfTI-1 bytes: float32 for scalars, uint8 for labels.
pub fn encode_volume(vol: &Volume) -> Result<Vec<u8>, NiftiError> {
    let geometry = vol.geometry();
    if geometry.dims().iter().any(|&d| d > i16::MAX as usize) {
        return Err(NiftiError::MalformedHeader(format!("dims {:?} exceed the header range", geometry.dims())));
    }
    match vol {
        Volume::Scalar(v) => {
            let mut out = encode_header(geometry, DT_FLOAT32, 32);
            out.reserve(v.values().len() * 4);
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            Ok(out)
        }
        Volume::Label(v) => {
            if let Some((index, &value)) = v.labels().iter().enumerate().find(|(_, &l)| !labels::is_valid(l)) {
                return Err(NiftiError::InvalidLabel { index, value: f64::from(value) });
            }
            let mut out = encode_header(geometry, DT_UINT8, 8);
            out.extend_from_slice(v.labels());
            Ok(out)
        }
    }
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let bytes = encode_volume(vol)?;
    fs::write(path, bytes).map_err(|source| NiftiError::Io { path: path.display().to_string(), source })
}

pub fn write_scalar(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    write_volume(&Volume::Scalar(vol.clone()), path)
}

pub fn write_labels(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    write_volume(&Volume::Label(vol.clone()), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> GridGeometry {
        GridGeometry::new([3, 2, 2], [1.0, 1.5, 2.0], [-10.0, 4.5, 0.25]).unwrap()
    }

    #[test]
    fn scalar_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        let v = ScalarVolume::from_fn(geometry(), |x, y, z| x as f32 * 0.1 - y as f32 * 3.7 + z as f32 * 1e-3).unwrap();
        write_scalar(&v, &p).unwrap();
        let back = read_scalar(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn header_constants_for_float_volume() {
        let v = ScalarVolume::zeros(GridGeometry::cube(64));
        let bytes = encode_volume(&Volume::Scalar(v)).unwrap();
        let h = NiftiHeader::parse(&bytes).unwrap();
        assert_eq!(i32_at(&bytes, 0), 348);
        assert_eq!(h.dim, [3, 64, 64, 64, 1, 1, 1, 1]);
        assert_eq!(h.datatype, 16);
        assert_eq!(h.bitpix, 32);
        assert_eq!(h.vox_offset, 352.0);
        assert_eq!(bytes.len(), 352 + 64 * 64 * 64 * 4);
    }

    #[test]
    fn two_cubed_zero_volume_is_384_bytes() {
        let v = ScalarVolume::zeros(GridGeometry::cube(2));
        assert_eq!(encode_volume(&Volume::Scalar(v)).unwrap().len(), 384);
    }

    #[test]
    fn zero_dim_is_malformed() {
        let v = ScalarVolume::zeros(GridGeometry::cube(2));
        let mut bytes = encode_volume(&Volume::Scalar(v)).unwrap();
        bytes[OFF_DIM + 2..OFF_DIM + 4].copy_from_slice(&0i16.to_le_bytes());
        assert!(matches!(decode_volume(&bytes, VolumeKind::Scalar), Err(NiftiError::MalformedHeader(_))));
    }

    #[test]
    fn bad_magic_and_short_file() {
        let v = ScalarVolume::zeros(GridGeometry::cube(2));
        let bytes = encode_volume(&Volume::Scalar(v)).unwrap();
        let mut bad = bytes.clone();
        bad[OFF_MAGIC] = b'x';
        assert!(matches!(decode_volume(&bad, VolumeKind::Scalar), Err(NiftiError::MalformedHeader(_))));
        assert!(matches!(decode_volume(&bytes[..370], VolumeKind::Scalar), Err(NiftiError::Truncated { .. })));
        assert!(matches!(decode_volume(&bytes[..100], VolumeKind::Scalar), Err(NiftiError::Truncated { .. })));
    }

    #[test]
    fn unsupported_datatype_rejected() {
        let v = ScalarVolume::zeros(GridGeometry::cube(2));
        let mut bytes = encode_volume(&Volume::Scalar(v)).unwrap();
        bytes[OFF_DATATYPE..OFF_DATATYPE + 2].copy_from_slice(&8i16.to_le_bytes()); // int32
        assert!(matches!(decode_volume(&bytes, VolumeKind::Scalar), Err(NiftiError::UnsupportedDatatype(8))));
    }

    #[test]
    fn dim_cap_enforced() {
        let v = ScalarVolume::zeros(GridGeometry::cube(4));
        let bytes = encode_volume(&Volume::Scalar(v)).unwrap();
        assert!(matches!(
            decode_volume_with_cap(&bytes, VolumeKind::Scalar, 63),
            Err(NiftiError::Volume(VolumeError::VoxelCapExceeded { .. }))
        ));
    }

    #[test]
    fn label_three_rejected_on_write_and_read() {
        let g = GridGeometry::cube(2);
        let good = LabelVolume::from_fn(g, |x, _, _| if x == 0 { 6 } else { 7 }).unwrap();
        let mut bytes = encode_volume(&Volume::Label(good)).unwrap();
        bytes[VOX_OFFSET + 1] = 3;
        assert!(matches!(decode_volume(&bytes, VolumeKind::Label), Err(NiftiError::InvalidLabel { index: 1, .. })));
        let forged = LabelVolume::from_raw(g, vec![0, 3, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(encode_volume(&Volume::Label(forged)), Err(NiftiError::InvalidLabel { index: 1, .. })));
    }

    #[test]
    fn spacing_survives_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.nii");
        let l = LabelVolume::zeros(GridGeometry::cube(3));
        write_labels(&l, &p).unwrap();
        let back = read_labels(&p).unwrap();
        assert_eq!(back.geometry().spacing(), [1.0, 1.0, 1.0]);
        assert_eq!(back, l);
    }

    /// Builds a file by hand with an arbitrary datatype.
    fn handmade(datatype: i16, bitpix: i16, payload: &[u8], slope: f32, inter: f32) -> Vec<u8> {
        let mut h = encode_header(&GridGeometry::new([2, 2, 1], [1.0; 3], [0.0; 3]).unwrap(), datatype, bitpix);
        h[OFF_SCL_SLOPE..OFF_SCL_SLOPE + 4].copy_from_slice(&slope.to_le_bytes());
        h[OFF_SCL_INTER..OFF_SCL_INTER + 4].copy_from_slice(&inter.to_le_bytes());
        h.extend_from_slice(payload);
        h
    }

    #[test]
    fn every_supported_datatype_decodes_and_rewrites_stably() {
        let cases: Vec<(i16, i16, Vec<u8>, [f32; 4])> = vec![
            (DT_UINT8, 8, vec![0, 5, 7, 255], [0.0, 5.0, 7.0, 255.0]),
            (DT_INT16, 16, [-3i16, 0, 7, 300].iter().flat_map(|v| v.to_le_bytes()).collect(), [-3.0, 0.0, 7.0, 300.0]),
            (DT_UINT16, 16, [0u16, 6, 65535, 8].iter().flat_map(|v| v.to_le_bytes()).collect(), [0.0, 6.0, 65535.0, 8.0]),
            (DT_FLOAT32, 32, [0.5f32, -1.25, 6.0, 1e3].iter().flat_map(|v| v.to_le_bytes()).collect(), [0.5, -1.25, 6.0, 1e3]),
            (DT_FLOAT64, 64, [0.5f64, -1.25, 6.0, 1e3].iter().flat_map(|v| v.to_le_bytes()).collect(), [0.5, -1.25, 6.0, 1e3]),
        ];
        for (dt, bits, payload, expect) in cases {
            let file = handmade(dt, bits, &payload, 0.0, 0.0);
            let Volume::Scalar(v) = decode_volume(&file, VolumeKind::Scalar).unwrap() else { panic!() };
            assert_eq!(v.values(), &expect, "datatype {dt}");
            let first = encode_volume(&Volume::Scalar(v)).unwrap();
            let again = decode_volume(&first, VolumeKind::Scalar).unwrap();
            let second = encode_volume(&again).unwrap();
            assert_eq!(first, second, "datatype {dt}");
        }
    }

    #[test]
    fn scaling_applied_when_slope_nonzero() {
        let payload: Vec<u8> = [1i16, 2, 3, 4].iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = handmade(DT_INT16, 16, &payload, 2.0, 10.0);
        let Volume::Scalar(v) = decode_volume(&file, VolumeKind::Scalar).unwrap() else { panic!() };
        assert_eq!(v.values(), &[12.0, 14.0, 16.0, 18.0]);
    }

    #[test]
    fn labels_from_float_file() {
        let payload: Vec<u8> = [0f32, 6.0, 7.0, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = handmade(DT_FLOAT32, 32, &payload, 0.0, 0.0);
        let Volume::Label(l) = decode_volume(&file, VolumeKind::Label).unwrap() else { panic!() };
        assert_eq!(l.labels(), &[0, 6, 7, 4]);
        let payload: Vec<u8> = [0f32, 6.5, 7.0, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = handmade(DT_FLOAT32, 32, &payload, 0.0, 0.0);
        assert!(matches!(decode_volume(&file, VolumeKind::Label), Err(NiftiError::InvalidLabel { index: 1, .. })));
    }

    #[test]
    fn big_endian_is_reported() {
        let v = ScalarVolume::zeros(GridGeometry::cube(2));
        let mut bytes = encode_volume(&Volume::Scalar(v)).unwrap();
        bytes[0..4].copy_from_slice(&348i32.to_be_bytes());
        let err = decode_volume(&bytes, VolumeKind::Scalar).unwrap_err();
        assert!(err.to_string().contains("big-endian"));
    }
}
