//! Textbook dense 3D convolutions over zero-padded volumes. These are the
//! correctness oracle for the sparse engine (inactive voxels zero-filled,
//! outputs compared at active sites) and the dense arm of the benchmark
//! harness.

use ndarray::s;

use crate::memtrack;
use crate::nn::ops::ConvParams;
use crate::sparse::DenseVolume;
use crate::Scalar;

fn offsets_subm(kernel: [usize; 3]) -> Vec<[i32; 3]> {
    let r = [
        (kernel[0] as i32 - 1) / 2,
        (kernel[1] as i32 - 1) / 2,
        (kernel[2] as i32 - 1) / 2,
    ];
    let mut offs = Vec::new();
    for kz in -r[2]..=r[2] {
        for ky in -r[1]..=r[1] {
            for kx in -r[0]..=r[0] {
                offs.push([kx, ky, kz]);
            }
        }
    }
    offs
}

fn offsets_strided(kernel: [usize; 3]) -> Vec<[i32; 3]> {
    let mut offs = Vec::new();
    for kz in 0..kernel[2] as i32 {
        for ky in 0..kernel[1] as i32 {
            for kx in 0..kernel[0] as i32 {
                offs.push([kx, ky, kz]);
            }
        }
    }
    offs
}

/// Same-size dense convolution with centered kernel and zero padding.
/// Offset enumeration matches the sparse submanifold kernel map.
pub fn dense_subm_conv<F: Scalar>(vol: &DenseVolume<F>, p: &ConvParams<F>) -> DenseVolume<F> {
    let c_in = p.rows_per_offset();
    let c_out = p.weight.ncols();
    assert_eq!(vol.channels, c_in, "input channel mismatch");
    let mut out = DenseVolume::filled(vol.dims, c_out, F::zero());
    memtrack::on_alloc(out.bytes());
    let [nx, ny, nz] = vol.dims;
    for (oi, off) in offsets_subm(p.kernel).iter().enumerate() {
        let w = p.weight.slice(s![oi * c_in..(oi + 1) * c_in, ..]);
        for z in 0..nz as i32 {
            let sz = z - off[2];
            if sz < 0 || sz >= nz as i32 {
                continue;
            }
            for y in 0..ny as i32 {
                let sy = y - off[1];
                if sy < 0 || sy >= ny as i32 {
                    continue;
                }
                for x in 0..nx as i32 {
                    let sx = x - off[0];
                    if sx < 0 || sx >= nx as i32 {
                        continue;
                    }
                    for co in 0..c_out {
                        let mut acc = F::zero();
                        for ci in 0..c_in {
                            acc += vol.at(ci, sx as usize, sy as usize, sz as usize) * w[[ci, co]];
                        }
                        let idx = out.idx(co, x as usize, y as usize, z as usize);
                        out.data[idx] += acc;
                    }
                }
            }
        }
    }
    if let Some(b) = &p.bias {
        for co in 0..c_out {
            let base = co * nx * ny * nz;
            for v in &mut out.data[base..base + nx * ny * nz] {
                *v += b[[0, co]];
            }
        }
    }
    memtrack::on_free(out.bytes());
    out
}

/// Strided dense convolution: `out[o] = Σ_k in[o*f + k] · W_k`, zero beyond
/// bounds; output dims are `ceil(in / f)`.
pub fn dense_strided_conv<F: Scalar>(
    vol: &DenseVolume<F>,
    p: &ConvParams<F>,
    factor: [usize; 3],
) -> DenseVolume<F> {
    let c_in = p.rows_per_offset();
    let c_out = p.weight.ncols();
    assert_eq!(vol.channels, c_in, "input channel mismatch");
    let od = [
        vol.dims[0].div_ceil(factor[0]),
        vol.dims[1].div_ceil(factor[1]),
        vol.dims[2].div_ceil(factor[2]),
    ];
    let mut out = DenseVolume::filled(od, c_out, F::zero());
    memtrack::on_alloc(out.bytes());
    for (oi, off) in offsets_strided(p.kernel).iter().enumerate() {
        let w = p.weight.slice(s![oi * c_in..(oi + 1) * c_in, ..]);
        for z in 0..od[2] {
            let sz = z * factor[2] + off[2] as usize;
            if sz >= vol.dims[2] {
                continue;
            }
            for y in 0..od[1] {
                let sy = y * factor[1] + off[1] as usize;
                if sy >= vol.dims[1] {
                    continue;
                }
                for x in 0..od[0] {
                    let sx = x * factor[0] + off[0] as usize;
                    if sx >= vol.dims[0] {
                        continue;
                    }
                    for co in 0..c_out {
                        let mut acc = F::zero();
                        for ci in 0..c_in {
                            acc += vol.at(ci, sx, sy, sz) * w[[ci, co]];
                        }
                        let idx = out.idx(co, x, y, z);
                        out.data[idx] += acc;
                    }
                }
            }
        }
    }
    if let Some(b) = &p.bias {
        let nvox = od[0] * od[1] * od[2];
        for co in 0..c_out {
            for v in &mut out.data[co * nvox..(co + 1) * nvox] {
                *v += b[[0, co]];
            }
        }
    }
    memtrack::on_free(out.bytes());
    out
}

/// Transposed dense convolution: scatters each coarse voxel through the
/// kernel, `out[o*f + k] += in[o] · W_k^T`. Weight layout is the transposed
/// layer's `(K^3 * c_out, c_in)`.
pub fn dense_transposed_conv<F: Scalar>(
    vol: &DenseVolume<F>,
    p: &ConvParams<F>,
    factor: [usize; 3],
    out_dims: [usize; 3],
) -> DenseVolume<F> {
    let c_out = p.rows_per_offset();
    let c_in = p.weight.ncols();
    assert_eq!(vol.channels, c_in, "input channel mismatch");
    let mut out = DenseVolume::filled(out_dims, c_out, F::zero());
    memtrack::on_alloc(out.bytes());
    for (oi, off) in offsets_strided(p.kernel).iter().enumerate() {
        let w = p.weight.slice(s![oi * c_out..(oi + 1) * c_out, ..]);
        for z in 0..vol.dims[2] {
            let tz = z * factor[2] + off[2] as usize;
            if tz >= out_dims[2] {
                continue;
            }
            for y in 0..vol.dims[1] {
                let ty = y * factor[1] + off[1] as usize;
                if ty >= out_dims[1] {
                    continue;
                }
                for x in 0..vol.dims[0] {
                    let tx = x * factor[0] + off[0] as usize;
                    if tx >= out_dims[0] {
                        continue;
                    }
                    for co in 0..c_out {
                        let mut acc = F::zero();
                        for ci in 0..c_in {
                            acc += vol.at(ci, x, y, z) * w[[co, ci]];
                        }
                        let idx = out.idx(co, tx, ty, tz);
                        out.data[idx] += acc;
                    }
                }
            }
        }
    }
    if let Some(b) = &p.bias {
        let nvox = out_dims[0] * out_dims[1] * out_dims[2];
        for co in 0..c_out {
            for v in &mut out.data[co * nvox..(co + 1) * nvox] {
                *v += b[[0, co]];
            }
        }
    }
    memtrack::on_free(out.bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn delta_input_gives_impulse_response() {
        let mut vol = DenseVolume::filled([5, 5, 5], 1, 0.0f64);
        let i = vol.idx(0, 2, 2, 2);
        vol.data[i] = 1.0;
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let p = ConvParams {
            kernel: [3, 3, 3],
            weight: Array2::from_shape_fn((27, 1), |_| rng.gen_range(-1.0..1.0)),
            bias: None,
        };
        let out = dense_subm_conv(&vol, &p);
        for (oi, off) in offsets_subm([3, 3, 3]).iter().enumerate() {
            let v = out.at(
                0,
                (2 + off[0]) as usize,
                (2 + off[1]) as usize,
                (2 + off[2]) as usize,
            );
            assert_abs_diff_eq!(v, p.weight[[oi, 0]], epsilon = 1e-14);
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut vol = DenseVolume::filled([4, 3, 2], 2, 0.0f64);
        for v in &mut vol.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut weight = Array2::zeros((27 * 2, 2));
        for ch in 0..2 {
            weight[[13 * 2 + ch, ch]] = 1.0;
        }
        let p = ConvParams {
            kernel: [3, 3, 3],
            weight,
            bias: None,
        };
        let out = dense_subm_conv(&vol, &p);
        assert_eq!(out.data, vol.data);
    }

    #[test]
    fn matches_direct_six_loop_sum() {
        // independent gather-style evaluation per output voxel
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let dims = [16usize, 16, 16];
        let (c_in, c_out) = (2usize, 3usize);
        let mut vol = DenseVolume::filled(dims, c_in, 0.0f64);
        for v in &mut vol.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        let p = ConvParams {
            kernel: [3, 3, 3],
            weight: Array2::from_shape_fn((27 * c_in, c_out), |_| rng.gen_range(-1.0..1.0)),
            bias: Some(Array2::from_shape_fn((1, c_out), |_| rng.gen_range(-1.0..1.0))),
        };
        let out = dense_subm_conv(&vol, &p);
        let offs = offsets_subm([3, 3, 3]);
        for z in 0..dims[2] as i32 {
            for y in 0..dims[1] as i32 {
                for x in 0..dims[0] as i32 {
                    for co in 0..c_out {
                        let mut acc = p.bias.as_ref().unwrap()[[0, co]];
                        for (oi, off) in offs.iter().enumerate() {
                            let (sx, sy, sz) = (x - off[0], y - off[1], z - off[2]);
                            if sx < 0
                                || sy < 0
                                || sz < 0
                                || sx >= dims[0] as i32
                                || sy >= dims[1] as i32
                                || sz >= dims[2] as i32
                            {
                                continue;
                            }
                            for ci in 0..c_in {
                                acc += vol.at(ci, sx as usize, sy as usize, sz as usize)
                                    * p.weight[[oi * c_in + ci, co]];
                            }
                        }
                        assert_abs_diff_eq!(
                            out.at(co, x as usize, y as usize, z as usize),
                            acc,
                            epsilon = 1e-12
                        );
                    }
                }
            }
        }
    }
}
