//! Sparse tensor representation: coordinate sets with exact hashing, the
//! multi-stride coordinate pyramid, and kernel-map construction.
//!
//! A kernel map turns convolution into gather → matmul → scatter-add: for each
//! kernel offset it lists the (input-row, output-row) pairs that interact at
//! that offset. Submanifold maps keep the output coordinate set identical to
//! the input set; strided maps target the downsampled set registered in the
//! pyramid, and transposed convolutions replay a strided map with the roles
//! swapped.

use std::collections::{BTreeMap, HashMap};
use std::hash::{BuildHasherDefault, Hasher};
use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

use crate::volume::VoxelGrid;
use crate::Scalar;

/// (batch, x, y, z). Negative spatial coordinates are legal.
pub type Coord = [i32; 4];

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("no pyramid level registered at stride {0:?}")]
    UnknownStride([u32; 3]),
    #[error("stride {stride:?} already registered with a different coordinate set")]
    LevelConflict { stride: [u32; 3] },
    #[error("coordinate {0:?} not aligned to stride {1:?}")]
    Misaligned(Coord, [u32; 3]),
    #[error("coordinate {0:?} out of bounds for dims {1:?}")]
    OutOfBounds(Coord, [usize; 3]),
    #[error("mask dims {0:?} do not match grid dims {1:?}")]
    MaskMismatch([usize; 3], [usize; 3]),
    #[error("kernel size must be odd per axis for submanifold maps, got {0:?}")]
    EvenKernel([usize; 3]),
    #[error("mixed batch indices where a single batch item was expected")]
    MixedBatch,
}

/// 64-bit mix of (batch,x,y,z); collisions are resolved exactly by the map.
#[derive(Default)]
pub struct CoordHasher {
    state: u64,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Hasher for CoordHasher {
    fn finish(&self) -> u64 {
        mix64(self.state)
    }
    fn write(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            self.state = mix64(self.state ^ u64::from_le_bytes(buf));
        }
    }
    fn write_i32(&mut self, v: i32) {
        self.state = mix64(self.state ^ (v as u32 as u64));
    }
}

pub type CoordIndex = HashMap<Coord, usize, BuildHasherDefault<CoordHasher>>;

/// Canonical row-order key: batch, then z, y, x ascending.
#[inline]
pub fn canonical_key(c: &Coord) -> (i32, i32, i32, i32) {
    (c[0], c[3], c[2], c[1])
}

/// A coordinate set at one pyramid level, with a row index that is a
/// bijection rows ↔ coordinates. Rows are in canonical order.
#[derive(Debug, Clone)]
pub struct CoordSet {
    pub coords: Vec<Coord>,
    pub index: CoordIndex,
}

impl CoordSet {
    /// Sorts into canonical order and deduplicates.
    pub fn from_coords(mut coords: Vec<Coord>) -> Self {
        coords.sort_by_key(canonical_key);
        coords.dedup();
        let mut index = CoordIndex::default();
        for (i, &c) in coords.iter().enumerate() {
            index.insert(c, i);
        }
        CoordSet { coords, index }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row_of(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MapKind {
    Submanifold,
    Strided { factor: [u32; 3] },
}

/// Per-kernel-offset (input-row, output-row) pair lists.
#[derive(Debug, Clone)]
pub struct KernelMap {
    pub kernel: [usize; 3],
    /// Offset per pair list, in voxel units (already scaled by tensor stride).
    pub offsets: Vec<[i32; 3]>,
    pub pairs: Vec<Vec<(u32, u32)>>,
    pub n_in: usize,
    pub n_out: usize,
}

impl KernelMap {
    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(|p| p.len()).sum()
    }

    /// The transposed-convolution view: same lists with in/out roles swapped.
    pub fn transposed(&self) -> KernelMap {
        KernelMap {
            kernel: self.kernel,
            offsets: self.offsets.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|l| l.iter().map(|&(i, j)| (j, i)).collect())
                .collect(),
            n_in: self.n_out,
            n_out: self.n_in,
        }
    }
}

/// Registry of coordinate sets per stride level plus a kernel-map cache.
///
/// The decoder looks up the encoder's levels so transposed convolutions land
/// on exactly the coordinates the matching encoder stage produced, which is
/// what makes summation skip connections well-defined.
#[derive(Debug, Default)]
pub struct CoordinatePyramid {
    levels: BTreeMap<[u32; 3], Arc<CoordSet>>,
    map_cache: HashMap<([u32; 3], [usize; 3], MapKind), Arc<KernelMap>>,
}

impl CoordinatePyramid {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a coordinate set at `stride`. Re-registering the identical
    /// set is a no-op; a different set at an existing stride is an error.
    pub fn register(
        &mut self,
        coords: Vec<Coord>,
        stride: [u32; 3],
    ) -> Result<Arc<CoordSet>, SparseError> {
        for c in &coords {
            for a in 0..3 {
                if c[a + 1].rem_euclid(stride[a] as i32) != 0 {
                    return Err(SparseError::Misaligned(*c, stride));
                }
            }
        }
        let set = CoordSet::from_coords(coords);
        if let Some(existing) = self.levels.get(&stride) {
            if existing.coords == set.coords {
                return Ok(existing.clone());
            }
            return Err(SparseError::LevelConflict { stride });
        }
        let set = Arc::new(set);
        self.levels.insert(stride, set.clone());
        Ok(set)
    }

    pub fn lookup(&self, stride: [u32; 3]) -> Result<Arc<CoordSet>, SparseError> {
        self.levels
            .get(&stride)
            .cloned()
            .ok_or(SparseError::UnknownStride(stride))
    }

    pub fn strides(&self) -> Vec<[u32; 3]> {
        self.levels.keys().copied().collect()
    }

    /// Downsamples the level at `stride` by `factor` and registers the result
    /// at `stride * factor`, returning the new level.
    pub fn downsample(
        &mut self,
        stride: [u32; 3],
        factor: [u32; 3],
    ) -> Result<Arc<CoordSet>, SparseError> {
        let set = self.lookup(stride)?;
        let coarse = downsample_coords(&set.coords, stride, factor);
        let out_stride = [
            stride[0] * factor[0],
            stride[1] * factor[1],
            stride[2] * factor[2],
        ];
        self.register(coarse, out_stride)
    }

    /// Submanifold kernel map at one level; cached per (stride, kernel).
    pub fn submanifold_map(
        &mut self,
        stride: [u32; 3],
        kernel: [usize; 3],
    ) -> Result<Arc<KernelMap>, SparseError> {
        if kernel.iter().any(|&k| k % 2 == 0) {
            return Err(SparseError::EvenKernel(kernel));
        }
        let key = (stride, kernel, MapKind::Submanifold);
        if let Some(m) = self.map_cache.get(&key) {
            return Ok(m.clone());
        }
        let set = self.lookup(stride)?;
        let map = build_submanifold_map(&set, stride, kernel);
        let map = Arc::new(map);
        self.map_cache.insert(key, map.clone());
        Ok(map)
    }

    /// Strided kernel map from the level at `stride` to the level at
    /// `stride * factor` (which must already be registered, normally via
    /// [`Self::downsample`]).
    pub fn strided_map(
        &mut self,
        stride: [u32; 3],
        kernel: [usize; 3],
        factor: [u32; 3],
    ) -> Result<Arc<KernelMap>, SparseError> {
        let key = (stride, kernel, MapKind::Strided { factor });
        if let Some(m) = self.map_cache.get(&key) {
            return Ok(m.clone());
        }
        let out_stride = [
            stride[0] * factor[0],
            stride[1] * factor[1],
            stride[2] * factor[2],
        ];
        let in_set = self.lookup(stride)?;
        let out_set = self.lookup(out_stride)?;
        let map = build_strided_map(&in_set, &out_set, stride, kernel)?;
        let map = Arc::new(map);
        self.map_cache.insert(key, map.clone());
        Ok(map)
    }
}

/// Unique set of coordinates snapped down to cells of size `stride * factor`.
pub fn downsample_coords(coords: &[Coord], stride: [u32; 3], factor: [u32; 3]) -> Vec<Coord> {
    let cell = [
        (stride[0] * factor[0]) as i32,
        (stride[1] * factor[1]) as i32,
        (stride[2] * factor[2]) as i32,
    ];
    let mut out: Vec<Coord> = coords
        .iter()
        .map(|c| {
            [
                c[0],
                c[1].div_euclid(cell[0]) * cell[0],
                c[2].div_euclid(cell[1]) * cell[1],
                c[3].div_euclid(cell[2]) * cell[2],
            ]
        })
        .collect();
    out.sort_by_key(canonical_key);
    out.dedup();
    out
}

/// Map whose output set equals the input set; pairs (i,j) where
/// `coord_j == coord_i + offset * stride`. The zero offset is the full
/// identity pairing. Offsets are enumerated x-fastest over `[-r, r]^3`.
pub fn build_submanifold_map(set: &CoordSet, stride: [u32; 3], kernel: [usize; 3]) -> KernelMap {
    let r = [
        (kernel[0] as i32 - 1) / 2,
        (kernel[1] as i32 - 1) / 2,
        (kernel[2] as i32 - 1) / 2,
    ];
    let mut offsets = Vec::with_capacity(kernel.iter().product());
    for kz in -r[2]..=r[2] {
        for ky in -r[1]..=r[1] {
            for kx in -r[0]..=r[0] {
                offsets.push([
                    kx * stride[0] as i32,
                    ky * stride[1] as i32,
                    kz * stride[2] as i32,
                ]);
            }
        }
    }
    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); offsets.len()];
    for (oi, off) in offsets.iter().enumerate() {
        if *off == [0, 0, 0] {
            pairs[oi] = (0..set.len() as u32).map(|r| (r, r)).collect();
            continue;
        }
        for (j, c) in set.coords.iter().enumerate() {
            let probe = [c[0], c[1] - off[0], c[2] - off[1], c[3] - off[2]];
            if let Some(i) = set.row_of(&probe) {
                pairs[oi].push((i as u32, j as u32));
            }
        }
    }
    KernelMap {
        kernel,
        offsets,
        pairs,
        n_in: set.len(),
        n_out: set.len(),
    }
}

/// Map from a fine to a coarse set: pairs (i,j) for offset `k ∈ [0,kernel)^3`
/// where `in_coord_i == out_coord_j + k * stride`. When `kernel == factor`
/// every input row appears in exactly one offset list.
pub fn build_strided_map(
    in_set: &CoordSet,
    out_set: &CoordSet,
    in_stride: [u32; 3],
    kernel: [usize; 3],
) -> Result<KernelMap, SparseError> {
    let mut offsets = Vec::with_capacity(kernel.iter().product());
    for kz in 0..kernel[2] as i32 {
        for ky in 0..kernel[1] as i32 {
            for kx in 0..kernel[0] as i32 {
                offsets.push([
                    kx * in_stride[0] as i32,
                    ky * in_stride[1] as i32,
                    kz * in_stride[2] as i32,
                ]);
            }
        }
    }
    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); offsets.len()];
    for (oi, off) in offsets.iter().enumerate() {
        for (j, c) in out_set.coords.iter().enumerate() {
            let probe = [c[0], c[1] + off[0], c[2] + off[1], c[3] + off[2]];
            if let Some(i) = in_set.row_of(&probe) {
                pairs[oi].push((i as u32, j as u32));
            }
        }
    }
    Ok(KernelMap {
        kernel,
        offsets,
        pairs,
        n_in: in_set.len(),
        n_out: out_set.len(),
    })
}

/// Coordinate list + feature matrix at a given tensor stride.
#[derive(Debug, Clone)]
pub struct SparseTensor<F: Scalar> {
    pub level: Arc<CoordSet>,
    pub stride: [u32; 3],
    pub feats: Array2<F>,
}

impl<F: Scalar> SparseTensor<F> {
    pub fn n(&self) -> usize {
        self.level.len()
    }

    pub fn channels(&self) -> usize {
        self.feats.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.level.is_empty()
    }
}

/// One row per active voxel, canonical row order, stride (1,1,1). Features
/// come from `feature_fn` applied to the grid value (the pipeline passes its
/// intensity normalizer here). An all-false mask yields an empty tensor.
pub fn sparsify_dense<F: Scalar>(
    grid: &VoxelGrid,
    active_mask: &[bool],
    batch_index: i32,
    feature_fn: impl Fn(f32) -> F,
    pyramid: &mut CoordinatePyramid,
) -> Result<SparseTensor<F>, SparseError> {
    if active_mask.len() != grid.voxel_count() {
        return Err(SparseError::MaskMismatch(
            [active_mask.len(), 0, 0],
            grid.dims,
        ));
    }
    let mut coords = Vec::new();
    let mut vals = Vec::new();
    let mut li = 0usize;
    for z in 0..grid.dims[2] {
        for y in 0..grid.dims[1] {
            for x in 0..grid.dims[0] {
                if active_mask[li] {
                    coords.push([batch_index, x as i32, y as i32, z as i32]);
                    vals.push(feature_fn(grid.data[li]));
                }
                li += 1;
            }
        }
    }
    let n = coords.len();
    let level = pyramid.register(coords, [1, 1, 1])?;
    let feats = Array2::from_shape_vec((n, 1), vals).expect("row per active voxel");
    Ok(SparseTensor {
        level,
        stride: [1, 1, 1],
        feats,
    })
}

/// Dense multi-channel volume, x-fastest within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVolume<F> {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> DenseVolume<F> {
    pub fn filled(dims: [usize; 3], channels: usize, fill: F) -> Self {
        DenseVolume {
            dims,
            channels,
            data: vec![fill; dims[0] * dims[1] * dims[2] * channels],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * (z + self.dims[2] * c))
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> F {
        self.data[self.idx(c, x, y, z)]
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<F>()
    }
}

/// Places feature rows at their (coordinate / stride) positions; `fill`
/// elsewhere. All rows must belong to one batch item and lie inside `dims`.
pub fn densify<F: Scalar>(
    st: &SparseTensor<F>,
    dims: [usize; 3],
    fill: F,
) -> Result<DenseVolume<F>, SparseError> {
    let mut vol = DenseVolume::filled(dims, st.channels(), fill);
    let batch = st.level.coords.first().map(|c| c[0]);
    for (row, c) in st.level.coords.iter().enumerate() {
        if Some(c[0]) != batch {
            return Err(SparseError::MixedBatch);
        }
        let mut p = [0usize; 3];
        for a in 0..3 {
            let q = c[a + 1] / st.stride[a] as i32;
            if c[a + 1] < 0 || q as usize >= dims[a] {
                return Err(SparseError::OutOfBounds(*c, dims));
            }
            p[a] = q as usize;
        }
        for ch in 0..st.channels() {
            let i = vol.idx(ch, p[0], p[1], p[2]);
            vol.data[i] = st.feats[[row, ch]];
        }
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridKind;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn set_of(coords: Vec<Coord>) -> CoordSet {
        CoordSet::from_coords(coords)
    }

    #[test]
    fn index_bijection() {
        let set = set_of(vec![[0, 1, 2, 3], [0, -4, 0, 8], [1, 0, 0, 0], [0, 1, 2, 3]]);
        assert_eq!(set.len(), 3);
        for (i, c) in set.coords.iter().enumerate() {
            assert_eq!(set.row_of(c), Some(i));
        }
    }

    #[test]
    fn downsample_merges_cells() {
        let out = downsample_coords(&[[0, 0, 0, 0], [0, 1, 1, 1]], [1, 1, 1], [2, 2, 2]);
        assert_eq!(out, vec![[0, 0, 0, 0]]);
        let out = downsample_coords(&[[0, 0, 0, 0], [0, 2, 0, 0]], [1, 1, 1], [2, 2, 2]);
        assert_eq!(out, vec![[0, 0, 0, 0], [0, 2, 0, 0]]);
    }

    #[test]
    fn downsample_handles_negative_coords() {
        let out = downsample_coords(&[[0, -1, -1, -1]], [1, 1, 1], [2, 2, 2]);
        assert_eq!(out, vec![[0, -2, -2, -2]]);
    }

    #[test]
    fn downsample_idempotent_on_aligned_sets() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let coords: Vec<Coord> = (0..100)
            .map(|_| {
                [
                    0,
                    rng.gen_range(-8..8) * 2,
                    rng.gen_range(-8..8) * 2,
                    rng.gen_range(-8..8) * 2,
                ]
            })
            .collect();
        let once = downsample_coords(&coords, [1, 1, 1], [2, 2, 2]);
        let twice = downsample_coords(&once, [2, 2, 2], [1, 1, 1]);
        assert_eq!(once, twice);
    }

    #[test]
    fn downsample_cardinality_matches_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let coords: Vec<Coord> = (0..rng.gen_range(1..200))
                .map(|_| {
                    [
                        rng.gen_range(0..2),
                        rng.gen_range(-16..16),
                        rng.gen_range(-16..16),
                        rng.gen_range(-16..16),
                    ]
                })
                .collect();
            let out = downsample_coords(&coords, [1, 1, 1], [2, 2, 2]);
            let mut cells: Vec<Coord> = coords
                .iter()
                .map(|c| {
                    [
                        c[0],
                        c[1].div_euclid(2),
                        c[2].div_euclid(2),
                        c[3].div_euclid(2),
                    ]
                })
                .collect();
            cells.sort();
            cells.dedup();
            assert_eq!(out.len(), cells.len());
        }
    }

    #[test]
    fn submanifold_single_voxel() {
        let set = set_of(vec![[0, 0, 0, 0]]);
        let map = build_submanifold_map(&set, [1, 1, 1], [3, 3, 3]);
        assert_eq!(map.pair_count(), 1);
        let center = map.offsets.iter().position(|&o| o == [0, 0, 0]).unwrap();
        assert_eq!(map.pairs[center], vec![(0, 0)]);
    }

    #[test]
    fn submanifold_adjacent_pair() {
        let set = set_of(vec![[0, 0, 0, 0], [0, 1, 0, 0]]);
        let map = build_submanifold_map(&set, [1, 1, 1], [3, 3, 3]);
        // identity pairs + one pair in each x direction
        assert_eq!(map.pair_count(), 4);
        let plus = map.offsets.iter().position(|&o| o == [1, 0, 0]).unwrap();
        let minus = map.offsets.iter().position(|&o| o == [-1, 0, 0]).unwrap();
        assert_eq!(map.pairs[plus], vec![(0, 1)]);
        assert_eq!(map.pairs[minus], vec![(1, 0)]);
    }

    /// Quadratic O(N^2 * 27) oracle for submanifold maps.
    fn brute_submanifold(set: &CoordSet, stride: [u32; 3], kernel: [usize; 3]) -> Vec<Vec<(u32, u32)>> {
        let map = build_submanifold_map(set, stride, kernel); // for offset enumeration only
        map.offsets
            .iter()
            .map(|off| {
                let mut list = Vec::new();
                for (j, cj) in set.coords.iter().enumerate() {
                    for (i, ci) in set.coords.iter().enumerate() {
                        if ci[0] == cj[0]
                            && cj[1] == ci[1] + off[0]
                            && cj[2] == ci[2] + off[1]
                            && cj[3] == ci[3] + off[2]
                        {
                            list.push((i as u32, j as u32));
                        }
                    }
                }
                list.sort_by_key(|&(_, j)| j);
                list
            })
            .collect()
    }

    #[test]
    fn submanifold_matches_quadratic_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for trial in 0..10 {
            let n = rng.gen_range(1..200);
            let coords: Vec<Coord> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(0..2),
                        rng.gen_range(-6..6),
                        rng.gen_range(-6..6),
                        rng.gen_range(-6..6),
                    ]
                })
                .collect();
            let set = set_of(coords);
            let map = build_submanifold_map(&set, [1, 1, 1], [3, 3, 3]);
            let brute = brute_submanifold(&set, [1, 1, 1], [3, 3, 3]);
            for (oi, list) in map.pairs.iter().enumerate() {
                let mut got = list.clone();
                got.sort_by_key(|&(_, j)| j);
                assert_eq!(got, brute[oi], "trial {trial} offset {oi}");
            }
        }
    }

    #[test]
    fn strided_map_basics() {
        // both fine voxels land in the coarse cell at origin
        let fine = set_of(vec![[0, 0, 0, 0], [0, 1, 1, 1]]);
        let coarse = set_of(downsample_coords(&fine.coords, [1, 1, 1], [2, 2, 2]));
        let map = build_strided_map(&fine, &coarse, [1, 1, 1], [2, 2, 2]).unwrap();
        assert_eq!(map.n_out, 1);
        let o000 = map.offsets.iter().position(|&o| o == [0, 0, 0]).unwrap();
        let o111 = map.offsets.iter().position(|&o| o == [1, 1, 1]).unwrap();
        assert_eq!(map.pairs[o000], vec![(0, 0)]);
        assert_eq!(map.pairs[o111], vec![(1, 0)]);
        assert_eq!(map.pair_count(), 2);
    }

    #[test]
    fn strided_map_row_coverage_and_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        for _ in 0..10 {
            let n = rng.gen_range(1..300);
            let coords: Vec<Coord> = (0..n)
                .map(|_| {
                    [
                        0,
                        rng.gen_range(-10..10),
                        rng.gen_range(-10..10),
                        rng.gen_range(-10..10),
                    ]
                })
                .collect();
            let fine = set_of(coords);
            let coarse = set_of(downsample_coords(&fine.coords, [1, 1, 1], [2, 2, 2]));
            let map = build_strided_map(&fine, &coarse, [1, 1, 1], [2, 2, 2]).unwrap();
            // kernel == stride: every input row in exactly one offset list
            let mut seen = vec![0usize; fine.len()];
            for list in &map.pairs {
                for &(i, _) in list {
                    seen[i as usize] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
            // quadratic oracle
            for (oi, off) in map.offsets.iter().enumerate() {
                let mut brute = Vec::new();
                for (j, cj) in coarse.coords.iter().enumerate() {
                    for (i, ci) in fine.coords.iter().enumerate() {
                        if ci[0] == cj[0]
                            && ci[1] == cj[1] + off[0]
                            && ci[2] == cj[2] + off[1]
                            && ci[3] == cj[3] + off[2]
                        {
                            brute.push((i as u32, j as u32));
                        }
                    }
                }
                brute.sort_by_key(|&(_, j)| j);
                let mut got = map.pairs[oi].clone();
                got.sort_by_key(|&(_, j)| j);
                assert_eq!(got, brute);
            }
        }
    }

    #[test]
    fn pyramid_register_lookup() {
        let mut pyr = CoordinatePyramid::new();
        pyr.register(vec![[0, 0, 0, 0], [0, 1, 1, 1], [0, 3, 0, 0]], [1, 1, 1])
            .unwrap();
        let coarse = pyr.downsample([1, 1, 1], [2, 2, 2]).unwrap();
        let looked = pyr.lookup([2, 2, 2]).unwrap();
        assert_eq!(coarse.coords, looked.coords);
        assert!(matches!(
            pyr.lookup([4, 4, 4]),
            Err(SparseError::UnknownStride(_))
        ));
    }

    #[test]
    fn pyramid_full_encoder_trace() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let coords: Vec<Coord> = (0..500)
            .map(|_| {
                [
                    0,
                    rng.gen_range(0..64),
                    rng.gen_range(0..64),
                    rng.gen_range(0..64),
                ]
            })
            .collect();
        let mut pyr = CoordinatePyramid::new();
        pyr.register(coords, [1, 1, 1]).unwrap();
        let mut s = [1u32; 3];
        let mut encoder_sets = vec![pyr.lookup(s).unwrap()];
        for _ in 0..5 {
            encoder_sets.push(pyr.downsample(s, [2, 2, 2]).unwrap());
            s = [s[0] * 2, s[1] * 2, s[2] * 2];
        }
        assert_eq!(
            pyr.strides(),
            vec![[1, 1, 1], [2, 2, 2], [4, 4, 4], [8, 8, 8], [16, 16, 16], [32, 32, 32]]
        );
        // decoder lookups reproduce encoder sets row-for-row
        let mut s = [32u32; 3];
        for lvl in (0..6).rev() {
            let dec = pyr.lookup(s).unwrap();
            assert_eq!(dec.coords, encoder_sets[lvl].coords);
            s = [s[0] / 2, s[1] / 2, s[2] / 2];
        }
    }

    #[test]
    fn sparsify_densify_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let dims = [4usize, 3, 5];
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-100.0..300.0)).collect();
        let grid =
            VoxelGrid::new(dims, [1.0; 3], [0.0; 3], GridKind::IntensityHu, data.clone()).unwrap();
        let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let mut pyr = CoordinatePyramid::new();
        let st = sparsify_dense(&grid, &mask, 0, |v| v, &mut pyr).unwrap();
        assert_eq!(st.n(), mask.iter().filter(|&&m| m).count());
        let vol = densify(&st, dims, -7.0f32).unwrap();
        let mut li = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let expect = if mask[li] { data[li] } else { -7.0 };
                    assert_eq!(vol.at(0, x, y, z), expect);
                    li += 1;
                }
            }
        }
    }

    #[test]
    fn sparsify_empty_mask() {
        let grid = VoxelGrid::filled([2, 2, 2], [1.0; 3], GridKind::IntensityHu, 0.0).unwrap();
        let mut pyr = CoordinatePyramid::new();
        let st = sparsify_dense(&grid, &[false; 8], 0, |v| v, &mut pyr).unwrap();
        assert!(st.is_empty());
        let full = sparsify_dense(&grid, &[true; 8], 0, |v| v, &mut CoordinatePyramid::new())
            .unwrap();
        assert_eq!(full.n(), 8);
    }

    #[test]
    fn densify_out_of_bounds_rejected() {
        let mut pyr = CoordinatePyramid::new();
        let level = pyr.register(vec![[0, 5, 0, 0]], [1, 1, 1]).unwrap();
        let st = SparseTensor {
            level,
            stride: [1, 1, 1],
            feats: Array2::from_shape_vec((1, 1), vec![1.0f32]).unwrap(),
        };
        assert!(matches!(
            densify(&st, [2, 2, 2], 0.0),
            Err(SparseError::OutOfBounds(_, _))
        ));
    }
}
