//! The two-stage segmentation pipeline around the network: HU percentile
//! windowing and intensity normalization, ROI prediction at low resolution,
//! morphological dilation, connected components, lifting ROIs to the
//! high-resolution grid, per-component segmentation, reassembly, and Dice
//! similarity scoring.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, SparseUNet};
use crate::sparse::{sparsify_dense, CoordinatePyramid, SparseError};
use crate::volume::{MultiLabelMask, VoxelGrid};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("empty intensity sample, cannot take percentiles")]
    EmptySample,
    #[error("degenerate window: lo == hi == {0}")]
    DegenerateWindow(f32),
    #[error("mask length {0} does not match voxel count {1}")]
    MaskLength(usize, usize),
    #[error("unsupported connectivity {0}, expected 6 or 26")]
    BadConnectivity(usize),
    #[error("component of {got} voxels exceeds the per-component capacity {cap}")]
    ComponentTooLarge { got: usize, cap: usize },
    #[error("components overlap at voxel {0:?}")]
    Overlap([usize; 3]),
    #[error("voxel {0:?} out of bounds for dims {1:?}")]
    OutOfBounds([usize; 3], [usize; 3]),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt ROI file: {0}")]
    BadRoiFile(String),
}

// ---------------------------------------------------------------------------
// intensity windowing
// ---------------------------------------------------------------------------

/// Percentile pair with linear interpolation between closest ranks
/// (`rank = p/100 · (n−1)` over the sorted sample).
pub fn compute_percentile_range(
    values: &[f32],
    lo_pct: f64,
    hi_pct: f64,
) -> Result<(f32, f32), PipelineError> {
    if values.is_empty() {
        return Err(PipelineError::EmptySample);
    }
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pick = |p: f64| -> f32 {
        let rank = p / 100.0 * (sorted.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        let frac = rank - lo as f64;
        (sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)) as f32
    };
    let (lo, hi) = (pick(lo_pct), pick(hi_pct));
    if lo == hi {
        return Err(PipelineError::DegenerateWindow(lo));
    }
    Ok((lo, hi))
}

/// Active-voxel mask: HU inside the closed interval `[lo, hi]`.
pub fn apply_hu_window(grid: &VoxelGrid, lo: f32, hi: f32) -> Vec<bool> {
    grid.data.iter().map(|&v| v >= lo && v <= hi).collect()
}

/// Affine map `[lo, hi] → [−1, 1]`.
pub fn normalize_intensity(v: f32, lo: f32, hi: f32) -> f32 {
    2.0 * (v - lo) / (hi - lo) - 1.0
}

/// Clamped variant for stage 2, where voxels outside the window can still be
/// active (they sit inside a lifted ROI).
pub fn normalize_intensity_clamped(v: f32, lo: f32, hi: f32) -> f32 {
    normalize_intensity(v.clamp(lo, hi), lo, hi)
}

// ---------------------------------------------------------------------------
// ROI prediction
// ---------------------------------------------------------------------------

/// Stage-1 forward pass: returns the dense boolean ROI mask where the finest
/// head's maximum channel probability exceeds `threshold`.
pub fn predict_roi<F: Scalar>(
    model: &SparseUNet<F>,
    grid: &VoxelGrid,
    window: (f32, f32),
    threshold: f64,
) -> Result<Vec<bool>, PipelineError> {
    let active = apply_hu_window(grid, window.0, window.1);
    let mut roi = vec![false; grid.voxel_count()];
    if !active.iter().any(|&a| a) {
        return Ok(roi);
    }
    let mut pyramid = CoordinatePyramid::new();
    let st = sparsify_dense(
        grid,
        &active,
        0,
        |v| F::from_f64_(normalize_intensity(v, window.0, window.1) as f64),
        &mut pyramid,
    )?;
    let out = model.forward(&st, &mut pyramid, false)?;
    let head = &out.heads[0];
    let probs = out.tape.value(head.var);
    let thr = F::from_f64_(threshold);
    for (row, c) in head.level.coords.iter().enumerate() {
        let hit = (0..probs.ncols()).any(|ch| probs[[row, ch]] > thr);
        if hit {
            let (x, y, z) = (c[1] as usize, c[2] as usize, c[3] as usize);
            roi[x + grid.dims[0] * (y + grid.dims[1] * z)] = true;
        }
    }
    Ok(roi)
}

// ---------------------------------------------------------------------------
// morphology
// ---------------------------------------------------------------------------

/// Offsets of the discrete ball of the given odd diameter: all `o` with
/// `Σ (o_i / r)^2 ≤ 1`, `r = (d−1)/2`. Diameter 1 is the identity element.
pub fn ball_offsets(diameter: usize) -> Vec<[i32; 3]> {
    assert!(diameter % 2 == 1, "diameter must be odd");
    let r = (diameter as i32 - 1) / 2;
    let mut offs = Vec::new();
    for z in -r..=r {
        for y in -r..=r {
            for x in -r..=r {
                if r == 0 {
                    offs.push([0, 0, 0]);
                    continue;
                }
                let rf = r as f64;
                let d2 = (x as f64 / rf).powi(2) + (y as f64 / rf).powi(2) + (z as f64 / rf).powi(2);
                if d2 <= 1.0 {
                    offs.push([x, y, z]);
                }
            }
        }
    }
    offs
}

/// Binary dilation by the discrete ball.
pub fn dilate(mask: &[bool], dims: [usize; 3], diameter: usize) -> Vec<bool> {
    let offs = ball_offsets(diameter);
    let [nx, ny, nz] = dims;
    let mut out = vec![false; mask.len()];
    let mut li = 0usize;
    for z in 0..nz as i32 {
        for y in 0..ny as i32 {
            for x in 0..nx as i32 {
                if mask[li] {
                    for o in &offs {
                        let (tx, ty, tz) = (x + o[0], y + o[1], z + o[2]);
                        if tx >= 0
                            && ty >= 0
                            && tz >= 0
                            && (tx as usize) < nx
                            && (ty as usize) < ny
                            && (tz as usize) < nz
                        {
                            out[tx as usize + nx * (ty as usize + ny * tz as usize)] = true;
                        }
                    }
                }
                li += 1;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// connected components
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub id: usize,
    /// Voxels in linear-scan (x-fastest) order.
    pub voxels: Vec<[usize; 3]>,
    pub bbox_lo: [usize; 3],
    pub bbox_hi: [usize; 3],
}

impl Component {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }
}

fn neighbor_offsets(connectivity: usize) -> Result<Vec<[i32; 3]>, PipelineError> {
    match connectivity {
        6 => Ok(vec![
            [1, 0, 0],
            [-1, 0, 0],
            [0, 1, 0],
            [0, -1, 0],
            [0, 0, 1],
            [0, 0, -1],
        ]),
        26 => {
            let mut offs = Vec::new();
            for z in -1..=1 {
                for y in -1..=1 {
                    for x in -1..=1 {
                        if (x, y, z) != (0, 0, 0) {
                            offs.push([x, y, z]);
                        }
                    }
                }
            }
            Ok(offs)
        }
        other => Err(PipelineError::BadConnectivity(other)),
    }
}

/// BFS connected-component labelling. Components are ordered by size
/// descending, ties broken by smallest linear voxel index; ids follow that
/// order starting at 1.
pub fn connected_components(
    mask: &[bool],
    dims: [usize; 3],
    connectivity: usize,
) -> Result<Vec<Component>, PipelineError> {
    let nvox = dims[0] * dims[1] * dims[2];
    if mask.len() != nvox {
        return Err(PipelineError::MaskLength(mask.len(), nvox));
    }
    let offs = neighbor_offsets(connectivity)?;
    let [nx, ny, nz] = dims;
    let lin = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut seen = vec![false; nvox];
    let mut comps = Vec::new();
    for z0 in 0..nz {
        for y0 in 0..ny {
            for x0 in 0..nx {
                let start = lin(x0, y0, z0);
                if !mask[start] || seen[start] {
                    continue;
                }
                let mut voxels = Vec::new();
                let mut queue = VecDeque::new();
                seen[start] = true;
                queue.push_back([x0, y0, z0]);
                while let Some(p) = queue.pop_front() {
                    voxels.push(p);
                    for o in &offs {
                        let t = [
                            p[0] as i32 + o[0],
                            p[1] as i32 + o[1],
                            p[2] as i32 + o[2],
                        ];
                        if t[0] < 0
                            || t[1] < 0
                            || t[2] < 0
                            || t[0] as usize >= nx
                            || t[1] as usize >= ny
                            || t[2] as usize >= nz
                        {
                            continue;
                        }
                        let tq = [t[0] as usize, t[1] as usize, t[2] as usize];
                        let tl = lin(tq[0], tq[1], tq[2]);
                        if mask[tl] && !seen[tl] {
                            seen[tl] = true;
                            queue.push_back(tq);
                        }
                    }
                }
                voxels.sort_by_key(|p| lin(p[0], p[1], p[2]));
                comps.push(voxels);
            }
        }
    }
    comps.sort_by_key(|v| {
        let first = v[0];
        (std::cmp::Reverse(v.len()), lin(first[0], first[1], first[2]))
    });
    Ok(comps
        .into_iter()
        .enumerate()
        .map(|(i, voxels)| {
            let mut lo = [usize::MAX; 3];
            let mut hi = [0usize; 3];
            for p in &voxels {
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            Component {
                id: i + 1,
                voxels,
                bbox_lo: lo,
                bbox_hi: hi,
            }
        })
        .collect())
}

/// Keeps components of at least `min_size` voxels (`size >= min_size`); ids
/// are reassigned to stay consecutive.
pub fn filter_components(comps: Vec<Component>, min_size: usize) -> Vec<Component> {
    comps
        .into_iter()
        .filter(|c| c.size() >= min_size)
        .enumerate()
        .map(|(i, mut c)| {
            c.id = i + 1;
            c
        })
        .collect()
}

// ---------------------------------------------------------------------------
// resolution lifting
// ---------------------------------------------------------------------------

/// Lifts a low-resolution component to the high-resolution grid: a high-res
/// voxel belongs to the lifted ROI when its physical center maps (nearest) to
/// a low-res voxel of the component. Returns a dense boolean mask on the
/// high-res grid.
pub fn lift_to_highres(
    comp: &Component,
    low: &VoxelGrid,
    high: &VoxelGrid,
) -> Vec<bool> {
    let mut member = vec![false; low.voxel_count()];
    for p in &comp.voxels {
        member[p[0] + low.dims[0] * (p[1] + low.dims[1] * p[2])] = true;
    }
    let mut out = vec![false; high.voxel_count()];
    // per-axis nearest low-res index for each high-res index
    let map_axis = |a: usize| -> Vec<Option<usize>> {
        (0..high.dims[a])
            .map(|i| {
                let mm = high.origin[a] + (i as f64 + 0.5) * high.spacing[a];
                let u = (mm - low.origin[a]) / low.spacing[a] - 0.5;
                let j = u.round();
                if j < 0.0 || j as usize >= low.dims[a] {
                    None
                } else {
                    Some(j as usize)
                }
            })
            .collect()
    };
    let (mx, my, mz) = (map_axis(0), map_axis(1), map_axis(2));
    let mut li = 0usize;
    for z in 0..high.dims[2] {
        for y in 0..high.dims[1] {
            for x in 0..high.dims[0] {
                if let (Some(jx), Some(jy), Some(jz)) = (mx[x], my[y], mz[z]) {
                    out[li] = member[jx + low.dims[0] * (jy + low.dims[1] * jz)];
                }
                li += 1;
            }
        }
    }
    out
}

/// Dense mask → component-style voxel list (for lifted ROIs).
pub fn mask_to_voxels(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    let mut li = 0usize;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if mask[li] {
                    out.push([x, y, z]);
                }
                li += 1;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// per-component segmentation and reassembly
// ---------------------------------------------------------------------------

pub struct ComponentPrediction<F: Scalar> {
    /// Global high-res voxels, canonical order matching `probs` rows.
    pub voxels: Vec<[usize; 3]>,
    /// Post-sigmoid per-channel probabilities.
    pub probs: Array2<F>,
}

/// Runs the stage-2 model on one lifted component. Only voxels inside the HU
/// window stay active so the submanifold matches the one seen in training;
/// out-of-window voxels are implicit background. The component is moved to a
/// local frame at its bounding-box origin so coordinates stay small.
/// Intensities are clamp-normalized with the stage-2 window.
pub fn segment_component<F: Scalar>(
    model: &SparseUNet<F>,
    image: &VoxelGrid,
    voxels: &[[usize; 3]],
    window: (f32, f32),
    max_voxels: usize,
) -> Result<ComponentPrediction<F>, PipelineError> {
    for p in voxels {
        for a in 0..3 {
            if p[a] >= image.dims[a] {
                return Err(PipelineError::OutOfBounds(*p, image.dims));
            }
        }
    }
    let voxels: Vec<[usize; 3]> = voxels
        .iter()
        .copied()
        .filter(|p| {
            let v = image.at(p[0], p[1], p[2]);
            v >= window.0 && v <= window.1
        })
        .collect();
    let voxels = &voxels[..];
    if voxels.len() > max_voxels {
        return Err(PipelineError::ComponentTooLarge {
            got: voxels.len(),
            cap: max_voxels,
        });
    }
    if voxels.is_empty() {
        return Ok(ComponentPrediction {
            voxels: Vec::new(),
            probs: Array2::zeros((0, 3)),
        });
    }
    let mut lo = [usize::MAX; 3];
    for p in voxels {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
        }
    }
    let mut pyramid = CoordinatePyramid::new();
    let coords: Vec<crate::sparse::Coord> = voxels
        .iter()
        .map(|p| {
            [
                0,
                (p[0] - lo[0]) as i32,
                (p[1] - lo[1]) as i32,
                (p[2] - lo[2]) as i32,
            ]
        })
        .collect();
    let level = pyramid.register(coords, [1, 1, 1])?;
    let mut feats = Array2::zeros((level.len(), 1));
    let mut ordered = vec![[0usize; 3]; level.len()];
    for p in voxels {
        let c = [
            0,
            (p[0] - lo[0]) as i32,
            (p[1] - lo[1]) as i32,
            (p[2] - lo[2]) as i32,
        ];
        let row = level.row_of(&c).expect("registered above");
        let v = image.at(p[0], p[1], p[2]);
        feats[[row, 0]] =
            F::from_f64_(normalize_intensity_clamped(v, window.0, window.1) as f64);
        ordered[row] = *p;
    }
    let st = crate::sparse::SparseTensor {
        level,
        stride: [1, 1, 1],
        feats,
    };
    let out = model.forward(&st, &mut pyramid, false)?;
    let probs = out.tape.value(out.heads[0].var).clone();
    Ok(ComponentPrediction {
        voxels: ordered,
        probs,
    })
}

/// Merges per-component predictions onto the full grid, binarizing at 0.5.
/// A voxel claimed by two components is an error.
pub fn reassemble<F: Scalar>(
    preds: &[ComponentPrediction<F>],
    dims: [usize; 3],
) -> Result<MultiLabelMask, PipelineError> {
    let nvox = dims[0] * dims[1] * dims[2];
    let mut claimed = vec![false; nvox];
    let mut channels = [vec![false; nvox], vec![false; nvox], vec![false; nvox]];
    let half = F::from_f64_(0.5);
    for pred in preds {
        for (row, p) in pred.voxels.iter().enumerate() {
            if p[0] >= dims[0] || p[1] >= dims[1] || p[2] >= dims[2] {
                return Err(PipelineError::OutOfBounds(*p, dims));
            }
            let li = p[0] + dims[0] * (p[1] + dims[1] * p[2]);
            if claimed[li] {
                return Err(PipelineError::Overlap(*p));
            }
            claimed[li] = true;
            for ch in 0..3.min(pred.probs.ncols()) {
                channels[ch][li] = pred.probs[[row, ch]] > half;
            }
        }
    }
    Ok(MultiLabelMask { dims, channels })
}

// ---------------------------------------------------------------------------
// scoring
// ---------------------------------------------------------------------------

/// Dice similarity over full dense masks; two empty masks score 1.
pub fn dsc(pred: &[bool], truth: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut psum = 0usize;
    let mut tsum = 0usize;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        if p && t {
            inter += 1;
        }
        if p {
            psum += 1;
        }
        if t {
            tsum += 1;
        }
    }
    if psum + tsum == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (psum + tsum) as f64
}

/// Per-channel DSC plus their mean ("All").
pub fn dsc_multilabel(pred: &MultiLabelMask, truth: &MultiLabelMask) -> ([f64; 3], f64) {
    let mut per = [0.0; 3];
    for ch in 0..3 {
        per[ch] = dsc(&pred.channels[ch], &truth.channels[ch]);
    }
    (per, per.iter().sum::<f64>() / 3.0)
}

// ---------------------------------------------------------------------------
// ROI file format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RoiComponent {
    pub id: usize,
    pub size: usize,
    pub bbox_lo: [usize; 3],
    pub bbox_hi: [usize; 3],
    /// (start, length) runs over the linear x-fastest voxel index.
    pub voxels_rle: Vec<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RoiFile {
    pub spacing_mm: [f64; 3],
    pub grid_dims: [usize; 3],
    pub components: Vec<RoiComponent>,
}

fn rle_encode(indices: impl Iterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for i in indices {
        match runs.last_mut() {
            Some((start, len)) if *start + *len == i => *len += 1,
            _ => runs.push((i, 1)),
        }
    }
    runs
}

pub fn roi_file_from_components(
    comps: &[Component],
    grid: &VoxelGrid,
) -> RoiFile {
    let lin = |p: &[usize; 3]| p[0] + grid.dims[0] * (p[1] + grid.dims[1] * p[2]);
    RoiFile {
        spacing_mm: grid.spacing,
        grid_dims: grid.dims,
        components: comps
            .iter()
            .map(|c| RoiComponent {
                id: c.id,
                size: c.size(),
                bbox_lo: c.bbox_lo,
                bbox_hi: c.bbox_hi,
                voxels_rle: rle_encode(c.voxels.iter().map(&lin)),
            })
            .collect(),
    }
}

pub fn components_from_roi_file(roi: &RoiFile) -> Result<Vec<Component>, PipelineError> {
    let [nx, ny, nz] = roi.grid_dims;
    let nvox = nx * ny * nz;
    roi.components
        .iter()
        .map(|rc| {
            let mut voxels = Vec::with_capacity(rc.size);
            for &(start, len) in &rc.voxels_rle {
                for li in start..start + len {
                    if li >= nvox {
                        return Err(PipelineError::BadRoiFile(format!(
                            "run ({start},{len}) exceeds grid"
                        )));
                    }
                    voxels.push([li % nx, (li / nx) % ny, li / (nx * ny)]);
                }
            }
            if voxels.len() != rc.size {
                return Err(PipelineError::BadRoiFile(format!(
                    "component {}: rle decodes to {} voxels, header says {}",
                    rc.id,
                    voxels.len(),
                    rc.size
                )));
            }
            let mut lo = [usize::MAX; 3];
            let mut hi = [0usize; 3];
            for p in &voxels {
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            Ok(Component {
                id: rc.id,
                voxels,
                bbox_lo: lo,
                bbox_hi: hi,
            })
        })
        .collect()
}

pub fn save_roi_file(roi: &RoiFile, path: &Path) -> Result<(), PipelineError> {
    fs::write(
        path,
        serde_json::to_string_pretty(roi).expect("roi serializes"),
    )
    .map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_roi_file(path: &Path) -> Result<RoiFile, PipelineError> {
    let json = fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&json).map_err(|e| PipelineError::BadRoiFile(e.to_string()))
}

/// Truth mask for evaluation, from a label-code grid.
pub fn truth_multilabel(label: &VoxelGrid) -> Result<MultiLabelMask, PipelineError> {
    crate::volume::make_multilabel(label)
        .map_err(|e| PipelineError::BadRoiFile(e.to_string()))
}
