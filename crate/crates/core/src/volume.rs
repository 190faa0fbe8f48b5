//! Dense voxel volumes: the native `.rvol` format, isotropic resampling, and
//! the three-channel multilabel encoding (foreground / masses / tumour).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing or corrupt sidecar header {path}: {reason}")]
    BadHeader { path: String, reason: String },
    #[error("payload size mismatch: header dims {dims:?} imply {expected} bytes, payload has {actual}")]
    SizeMismatch {
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("unexpected label value {value} at linear index {index} (expected 0..=3)")]
    BadLabel { value: f32, index: usize },
    #[error("non-positive target spacing {0:?}")]
    BadSpacing([f64; 3]),
    #[error("label grids must be resampled with nearest-neighbor mode")]
    LabelNeedsNearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridKind {
    /// CT intensities in Hounsfield units, stored as f32.
    IntensityHu,
    /// Integer label codes {0,1,2,3}: background / kidney / tumour / cyst.
    LabelCode,
}

/// Dense 3D scalar volume with physical spacing.
///
/// Voxel `(x,y,z)` maps to physical position `origin + (i + 0.5) * spacing`
/// per axis (center convention). Values are stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub kind: GridKind,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResampleMode {
    Trilinear,
    Nearest,
}

impl VoxelGrid {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: GridKind,
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidGrid(format!("zero dim in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(VolumeError::InvalidGrid(format!(
                "non-positive spacing {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(VolumeError::InvalidGrid(format!(
                "value count {} != dims product {}",
                data.len(),
                n
            )));
        }
        if kind == GridKind::LabelCode {
            for (i, &v) in data.iter().enumerate() {
                if !(v == 0.0 || v == 1.0 || v == 2.0 || v == 3.0) {
                    return Err(VolumeError::BadLabel { value: v, index: i });
                }
            }
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            kind,
            data,
        })
    }

    pub fn filled(
        dims: [usize; 3],
        spacing: [f64; 3],
        kind: GridKind,
        value: f32,
    ) -> Result<Self, VolumeError> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing, [0.0; 3], kind, vec![value; n])
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Physical center of voxel `(x,y,z)` in mm.
    pub fn voxel_center(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + (idx[0] as f64 + 0.5) * self.spacing[0],
            self.origin[1] + (idx[1] as f64 + 0.5) * self.spacing[1],
            self.origin[2] + (idx[2] as f64 + 0.5) * self.spacing[2],
        ]
    }

    /// Resample onto an isotropic (or otherwise) target spacing.
    ///
    /// Output dims are `round(in_dims * in_spacing / target)` per axis
    /// (half-away-from-zero), minimum 1. Sampling happens in physical mm
    /// with clamp-to-edge; label grids require nearest mode so they stay
    /// categorical.
    pub fn resample(
        &self,
        target_spacing: [f64; 3],
        mode: ResampleMode,
    ) -> Result<VoxelGrid, VolumeError> {
        if target_spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(VolumeError::BadSpacing(target_spacing));
        }
        if self.kind == GridKind::LabelCode && mode != ResampleMode::Nearest {
            return Err(VolumeError::LabelNeedsNearest);
        }
        let mut out_dims = [0usize; 3];
        let mut ratio = [0f64; 3];
        for a in 0..3 {
            let ideal = self.dims[a] as f64 * self.spacing[a] / target_spacing[a];
            out_dims[a] = (ideal.round() as usize).max(1);
            // ratio maps output voxel index to continuous input index space
            ratio[a] = target_spacing[a] / self.spacing[a];
        }
        let mut data = vec![0f32; out_dims[0] * out_dims[1] * out_dims[2]];
        let [nx, ny, nz] = self.dims;
        let clamp = |u: f64, n: usize| u.max(0.0).min((n - 1) as f64);
        let mut w = 0usize;
        for z in 0..out_dims[2] {
            let uz = clamp((z as f64 + 0.5) * ratio[2] - 0.5, nz);
            for y in 0..out_dims[1] {
                let uy = clamp((y as f64 + 0.5) * ratio[1] - 0.5, ny);
                for x in 0..out_dims[0] {
                    let ux = clamp((x as f64 + 0.5) * ratio[0] - 0.5, nx);
                    data[w] = match mode {
                        ResampleMode::Nearest => {
                            let ix = (ux.round() as usize).min(nx - 1);
                            let iy = (uy.round() as usize).min(ny - 1);
                            let iz = (uz.round() as usize).min(nz - 1);
                            self.at(ix, iy, iz)
                        }
                        ResampleMode::Trilinear => self.trilinear(ux, uy, uz),
                    };
                    w += 1;
                }
            }
        }
        Ok(VoxelGrid {
            dims: out_dims,
            spacing: target_spacing,
            origin: self.origin,
            kind: self.kind,
            data,
        })
    }

    pub(crate) fn trilinear(&self, ux: f64, uy: f64, uz: f64) -> f32 {
        let [nx, ny, nz] = self.dims;
        let x0 = ux.floor() as usize;
        let y0 = uy.floor() as usize;
        let z0 = uz.floor() as usize;
        let x1 = (x0 + 1).min(nx - 1);
        let y1 = (y0 + 1).min(ny - 1);
        let z1 = (z0 + 1).min(nz - 1);
        let fx = ux - x0 as f64;
        let fy = uy - y0 as f64;
        let fz = uz - z0 as f64;
        let mut acc = 0f64;
        for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
            if wz == 0.0 {
                continue;
            }
            for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                if wy == 0.0 {
                    continue;
                }
                for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wz * wy * wx * self.at(xi, yi, zi) as f64;
                }
            }
        }
        acc as f32
    }
}

/// Three binary channels derived from a label-code grid:
/// c0 = kidneys + masses (all foreground), c1 = tumour + cyst, c2 = tumour only.
/// Nesting c2 ⊆ c1 ⊆ c0 holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelMask {
    pub dims: [usize; 3],
    pub channels: [Vec<bool>; 3],
}

impl MultiLabelMask {
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

/// Label codes: 0 background, 1 kidney, 2 tumour, 3 cyst.
pub fn make_multilabel(labels: &VoxelGrid) -> Result<MultiLabelMask, VolumeError> {
    if labels.kind != GridKind::LabelCode {
        return Err(VolumeError::InvalidGrid(
            "make_multilabel needs a label-code grid".into(),
        ));
    }
    let n = labels.voxel_count();
    let mut c0 = vec![false; n];
    let mut c1 = vec![false; n];
    let mut c2 = vec![false; n];
    for (i, &v) in labels.data.iter().enumerate() {
        let v = v as u8;
        match v {
            0 => {}
            1 => c0[i] = true,
            2 => {
                c0[i] = true;
                c1[i] = true;
                c2[i] = true;
            }
            3 => {
                c0[i] = true;
                c1[i] = true;
            }
            _ => {
                return Err(VolumeError::BadLabel {
                    value: v as f32,
                    index: i,
                })
            }
        }
    }
    Ok(MultiLabelMask {
        dims: labels.dims,
        channels: [c0, c1, c2],
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct RvolSidecar {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: String,
    kind: String,
    order: String,
}

fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    VolumeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `<path>` (raw little-endian payload) plus `<path>.json` sidecar.
/// Label grids are stored as u8, intensity grids as f32; roundtrip through
/// [`load_volume`] is bit-exact.
pub fn store_volume(grid: &VoxelGrid, path: &Path) -> Result<(), VolumeError> {
    let (dtype, kind) = match grid.kind {
        GridKind::IntensityHu => ("f32", "hu"),
        GridKind::LabelCode => ("u8", "label"),
    };
    let sidecar = RvolSidecar {
        dims: grid.dims,
        spacing_mm: grid.spacing,
        origin_mm: grid.origin,
        dtype: dtype.to_string(),
        kind: kind.to_string(),
        order: "x-fastest".to_string(),
    };
    let side_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side_path, json).map_err(|e| io_err(&side_path, e))?;
    let mut payload = Vec::with_capacity(grid.data.len() * 4);
    match grid.kind {
        GridKind::IntensityHu => {
            payload.resize(grid.data.len() * 4, 0);
            LittleEndian::write_f32_into(&grid.data, &mut payload);
        }
        GridKind::LabelCode => {
            payload.extend(grid.data.iter().map(|&v| v as u8));
        }
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&payload).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

pub fn load_volume(path: &Path) -> Result<VoxelGrid, VolumeError> {
    let side_path = sidecar_path(path);
    let json = fs::read_to_string(&side_path).map_err(|e| io_err(&side_path, e))?;
    let sidecar: RvolSidecar =
        serde_json::from_str(&json).map_err(|e| VolumeError::BadHeader {
            path: side_path.display().to_string(),
            reason: e.to_string(),
        })?;
    if sidecar.order != "x-fastest" {
        return Err(VolumeError::BadHeader {
            path: side_path.display().to_string(),
            reason: format!("unsupported order {:?}", sidecar.order),
        });
    }
    let kind = match sidecar.kind.as_str() {
        "hu" => GridKind::IntensityHu,
        "label" => GridKind::LabelCode,
        other => {
            return Err(VolumeError::BadHeader {
                path: side_path.display().to_string(),
                reason: format!("unknown kind {other:?}"),
            })
        }
    };
    let n = sidecar.dims[0] * sidecar.dims[1] * sidecar.dims[2];
    let mut payload = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut payload))
        .map_err(|e| io_err(path, e))?;
    let data = match sidecar.dtype.as_str() {
        "f32" => {
            if payload.len() != n * 4 {
                return Err(VolumeError::SizeMismatch {
                    dims: sidecar.dims,
                    expected: n * 4,
                    actual: payload.len(),
                });
            }
            let mut data = vec![0f32; n];
            LittleEndian::read_f32_into(&payload, &mut data);
            data
        }
        "u8" => {
            if payload.len() != n {
                return Err(VolumeError::SizeMismatch {
                    dims: sidecar.dims,
                    expected: n,
                    actual: payload.len(),
                });
            }
            payload.iter().map(|&b| b as f32).collect()
        }
        other => {
            return Err(VolumeError::BadHeader {
                path: side_path.display().to_string(),
                reason: format!("unknown dtype {other:?}"),
            })
        }
    };
    VoxelGrid::new(sidecar.dims, sidecar.spacing_mm, sidecar.origin_mm, kind, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn hu_grid(dims: [usize; 3], data: Vec<f32>) -> VoxelGrid {
        VoxelGrid::new(dims, [1.0; 3], [0.0; 3], GridKind::IntensityHu, data).unwrap()
    }

    #[test]
    fn minimal_roundtrip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.rvol");
        let g = hu_grid([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        store_volume(&g, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn size_mismatch_detected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.rvol");
        let g = hu_grid([2, 2, 2], vec![0.0; 8]);
        store_volume(&g, &p).unwrap();
        // truncate payload to 4 values
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..16]).unwrap();
        match load_volume(&p) {
            Err(VolumeError::SizeMismatch { expected, actual, .. }) => {
                assert_eq!(expected, 32);
                assert_eq!(actual, 16);
            }
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn label_roundtrip_records_kind() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("lab.rvol");
        let g = VoxelGrid::new(
            [2, 2, 1],
            [1.0; 3],
            [0.0; 3],
            GridKind::LabelCode,
            vec![0.0, 1.0, 2.0, 3.0],
        )
        .unwrap();
        store_volume(&g, &p).unwrap();
        let side: RvolSidecar = serde_json::from_str(
            &fs::read_to_string(dir.path().join("lab.rvol.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(side.kind, "label");
        assert_eq!(side.dtype, "u8");
        let back = load_volume(&p).unwrap();
        assert_eq!(back.kind, GridKind::LabelCode);
        assert_eq!(back, g);
    }

    #[test]
    fn payload_byte_length_arithmetic() {
        let dims = [201usize, 201, 151];
        let dir = tempdir().unwrap();
        let p = dir.path().join("big.rvol");
        let g = VoxelGrid::filled(dims, [1.99; 3], GridKind::IntensityHu, 0.0).unwrap();
        store_volume(&g, &p).unwrap();
        let meta = fs::metadata(&p).unwrap();
        assert_eq!(meta.len(), 201 * 201 * 151 * 4);
    }

    #[test]
    fn resample_dims_rule() {
        // 512 * 0.78 / 1.99 = 200.68... -> 201; 100 * 3.0 / 1.99 = 150.75... -> 151
        let g = VoxelGrid::filled([512, 512, 100], [0.78, 0.78, 3.0], GridKind::IntensityHu, 7.0)
            .unwrap();
        let out = g.resample([1.99; 3], ResampleMode::Trilinear).unwrap();
        assert_eq!(out.dims, [201, 201, 151]);
        // constant in -> constant out
        assert!(out.data.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn resample_identity_when_spacing_unchanged() {
        let data: Vec<f32> = (0..60).map(|i| (i as f32).sin() * 100.0).collect();
        let g = VoxelGrid::new([3, 4, 5], [1.3, 0.7, 2.0], [5.0, -2.0, 0.0], GridKind::IntensityHu, data)
            .unwrap();
        let out = g.resample(g.spacing, ResampleMode::Trilinear).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn resample_nearest_value_set_subset() {
        let data = vec![0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0];
        let g = VoxelGrid::new([2, 2, 2], [2.0; 3], [0.0; 3], GridKind::LabelCode, data.clone())
            .unwrap();
        let out = g.resample([0.9; 3], ResampleMode::Nearest).unwrap();
        for v in &out.data {
            assert!(data.contains(v));
        }
        assert!(g
            .resample([0.9; 3], ResampleMode::Trilinear)
            .is_err());
    }

    #[test]
    fn resample_preserves_physical_extent() {
        let g = VoxelGrid::filled([17, 9, 30], [1.1, 2.3, 0.6], GridKind::IntensityHu, 0.0).unwrap();
        let t = [0.85, 0.85, 0.85];
        let out = g.resample(t, ResampleMode::Trilinear).unwrap();
        for a in 0..3 {
            let before = g.dims[a] as f64 * g.spacing[a];
            let after = out.dims[a] as f64 * out.spacing[a];
            assert!((before - after).abs() <= out.spacing[a], "axis {a}");
        }
    }

    #[test]
    fn multilabel_codes() {
        let g = VoxelGrid::new(
            [4, 1, 1],
            [1.0; 3],
            [0.0; 3],
            GridKind::LabelCode,
            vec![0.0, 1.0, 2.0, 3.0],
        )
        .unwrap();
        let m = make_multilabel(&g).unwrap();
        // v=0 -> (0,0,0); v=1 -> (1,0,0); v=2 -> (1,1,1); v=3 -> (1,1,0)
        let at = |c: usize, i: usize| m.channels[c][i];
        assert_eq!([at(0, 0), at(1, 0), at(2, 0)], [false, false, false]);
        assert_eq!([at(0, 1), at(1, 1), at(2, 1)], [true, false, false]);
        assert_eq!([at(0, 2), at(1, 2), at(2, 2)], [true, true, true]);
        assert_eq!([at(0, 3), at(1, 3), at(2, 3)], [true, true, false]);
        // nesting
        for i in 0..4 {
            assert!(!at(2, i) || at(1, i));
            assert!(!at(1, i) || at(0, i));
        }
    }
}
