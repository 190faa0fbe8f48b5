//! Minimal NIfTI-1 reader: single uncompressed file, int16 / float32 / uint8,
//! `scl_slope` / `scl_inter` applied. Enough to ingest dataset distributions;
//! everything else goes through the native `.rvol` format.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use thiserror::Error;

use crate::volume::{GridKind, VolumeError, VoxelGrid};

pub const HEADER_LEN: usize = 348;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("file too short for a NIfTI-1 header ({0} bytes)")]
    Truncated(usize),
    #[error("compressed input not supported (gzip magic found)")]
    Compressed,
    #[error("magic number mismatch: expected \"n+1\\0\", got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0} (supported: 2=u8, 4=i16, 16=f32)")]
    UnsupportedDatatype(i16),
    #[error("header dims {dims:?} need {expected} payload bytes, found {actual}")]
    PayloadMismatch {
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub fn read_nifti(path: &Path) -> Result<VoxelGrid, NiftiError> {
    let bytes = fs::read(path).map_err(|e| NiftiError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_nifti_bytes(&bytes)
}

pub fn read_nifti_bytes(bytes: &[u8]) -> Result<VoxelGrid, NiftiError> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(NiftiError::Compressed);
    }
    if bytes.len() < HEADER_LEN {
        return Err(NiftiError::Truncated(bytes.len()));
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if &magic != b"n+1\0" {
        return Err(NiftiError::BadMagic(magic));
    }
    let dim_raw: Vec<i16> = (0..8)
        .map(|i| LittleEndian::read_i16(&bytes[40 + 2 * i..]))
        .collect();
    let dims = [
        dim_raw[1].max(1) as usize,
        dim_raw[2].max(1) as usize,
        dim_raw[3].max(1) as usize,
    ];
    let datatype = LittleEndian::read_i16(&bytes[70..]);
    let pixdim: Vec<f32> = (0..8)
        .map(|i| LittleEndian::read_f32(&bytes[76 + 4 * i..]))
        .collect();
    let spacing = [
        pixdim[1].abs().max(f32::MIN_POSITIVE) as f64,
        pixdim[2].abs().max(f32::MIN_POSITIVE) as f64,
        pixdim[3].abs().max(f32::MIN_POSITIVE) as f64,
    ];
    let vox_offset = LittleEndian::read_f32(&bytes[108..]) as usize;
    let vox_offset = vox_offset.max(HEADER_LEN);
    let scl_slope = LittleEndian::read_f32(&bytes[112..]);
    let scl_inter = LittleEndian::read_f32(&bytes[116..]);
    let slope = if scl_slope == 0.0 { 1.0 } else { scl_slope };

    let n = dims[0] * dims[1] * dims[2];
    let elem = match datatype {
        2 => 1,
        4 => 2,
        16 => 4,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let payload = &bytes[vox_offset.min(bytes.len())..];
    if payload.len() < n * elem {
        return Err(NiftiError::PayloadMismatch {
            dims,
            expected: n * elem,
            actual: payload.len(),
        });
    }
    let raw: Vec<f32> = match datatype {
        2 => payload[..n].iter().map(|&b| b as f32).collect(),
        4 => (0..n)
            .map(|i| LittleEndian::read_i16(&payload[2 * i..]) as f32)
            .collect(),
        16 => (0..n)
            .map(|i| LittleEndian::read_f32(&payload[4 * i..]))
            .collect(),
        _ => unreachable!(),
    };
    let data: Vec<f32> = raw.iter().map(|&v| slope * v + scl_inter).collect();
    // u8 payloads holding nothing but {0..3} under an identity transform are
    // label maps; everything else is intensity data.
    let kind = if datatype == 2
        && slope == 1.0
        && scl_inter == 0.0
        && data.iter().all(|&v| v <= 3.0)
    {
        GridKind::LabelCode
    } else {
        GridKind::IntensityHu
    };
    Ok(VoxelGrid::new(dims, spacing, [0.0; 3], kind, data)?)
}

#[cfg(test)]
pub fn write_minimal_nifti(
    dims: [usize; 3],
    spacing: [f32; 3],
    datatype: i16,
    scl: (f32, f32),
    payload: &[u8],
) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_LEN];
    LittleEndian::write_i32(&mut h[0..], 348);
    LittleEndian::write_i16(&mut h[40..], 3);
    for (i, &d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * (i + 1)..], d as i16);
    }
    LittleEndian::write_i16(&mut h[70..], datatype);
    for (i, &s) in spacing.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * (i + 1)..], s);
    }
    LittleEndian::write_f32(&mut h[108..], 348.0);
    LittleEndian::write_f32(&mut h[112..], scl.0);
    LittleEndian::write_f32(&mut h[116..], scl.1);
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(payload);
    h
}
