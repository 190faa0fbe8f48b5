//! Differentiable sparse operations: kernel-map convolutions (submanifold,
//! strided, transposed, depthwise), pooling, normalizations, activations.
//!
//! Every op comes as a pure forward/backward pair plus a tape wrapper; the
//! pure forms double as building blocks for the dense oracle comparisons.
//! Scatter-adds run in canonical row order, so forward results are
//! bit-reproducible.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};

use crate::nn::tape::{ParamId, ParamStore, Tape, TapeError, VarId};
use crate::sparse::KernelMap;
use crate::Scalar;

/// Weights for a full convolution: `(K^3 * c_in, c_out)`, offset-major in the
/// kernel map's enumeration order. For a transposed convolution the same
/// layout is read with each per-offset block transposed, so the layer's
/// weight is shaped `(K^3 * c_out, c_in)`.
#[derive(Debug, Clone)]
pub struct ConvParams<F: Scalar> {
    pub kernel: [usize; 3],
    pub weight: Array2<F>,
    pub bias: Option<Array2<F>>,
}

impl<F: Scalar> ConvParams<F> {
    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn rows_per_offset(&self) -> usize {
        self.weight.nrows() / self.kernel_volume()
    }
}

/// Depthwise variant: one weight per (offset, channel), shape `(K^3, C)`.
#[derive(Debug, Clone)]
pub struct DepthwiseParams<F: Scalar> {
    pub kernel: [usize; 3],
    pub weight: Array2<F>,
    pub bias: Option<Array2<F>>,
}

/// Gamma/beta affine for layer norm and GRN, stored as 1×C rows.
#[derive(Debug, Clone)]
pub struct AffineNormParams<F: Scalar> {
    pub gamma: Array2<F>,
    pub beta: Array2<F>,
    pub eps: F,
}

impl<F: Scalar> AffineNormParams<F> {
    pub fn identity(channels: usize, eps: F) -> Self {
        AffineNormParams {
            gamma: Array2::ones((1, channels)),
            beta: Array2::zeros((1, channels)),
            eps,
        }
    }
}

#[inline]
fn erf_s<F: Scalar>(x: F) -> F {
    F::from_f64_(libm::erf(x.to_f64_()))
}

/// Exact (erf-based) normal CDF, used by GELU.
#[inline]
pub fn normal_cdf<F: Scalar>(x: F) -> F {
    let half = F::from_f64_(0.5);
    let inv_sqrt2 = F::from_f64_(std::f64::consts::FRAC_1_SQRT_2);
    half * (F::one() + erf_s(x * inv_sqrt2))
}

fn gather<F: Scalar>(x: &Array2<F>, rows: impl Iterator<Item = usize>, n: usize) -> Array2<F> {
    let c = x.ncols();
    let mut out = Array2::zeros((n, c));
    for (r, i) in rows.enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

// ---------------------------------------------------------------------------
// full convolution (submanifold / strided / transposed share this)
// ---------------------------------------------------------------------------

pub fn conv_forward<F: Scalar>(
    x: &Array2<F>,
    p: &ConvParams<F>,
    map: &KernelMap,
    transpose_w: bool,
) -> Result<Array2<F>, TapeError> {
    let rows = p.rows_per_offset();
    let (c_in, c_out) = if transpose_w {
        (p.weight.ncols(), rows)
    } else {
        (rows, p.weight.ncols())
    };
    if x.ncols() != c_in {
        return Err(TapeError::ChannelMismatch {
            expected: c_in,
            got: x.ncols(),
        });
    }
    let mut out = Array2::zeros((map.n_out, c_out));
    for (oi, pairs) in map.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let w = p.weight.slice(s![oi * rows..(oi + 1) * rows, ..]);
        let gathered = gather(x, pairs.iter().map(|&(i, _)| i as usize), pairs.len());
        let prod = if transpose_w {
            gathered.dot(&w.t())
        } else {
            gathered.dot(&w)
        };
        for (r, &(_, j)) in pairs.iter().enumerate() {
            let mut row = out.row_mut(j as usize);
            row += &prod.row(r);
        }
    }
    if let Some(b) = &p.bias {
        out += &b.row(0);
    }
    Ok(out)
}

pub fn conv_backward_input<F: Scalar>(
    gout: &Array2<F>,
    p: &ConvParams<F>,
    map: &KernelMap,
    transpose_w: bool,
) -> Array2<F> {
    let rows = p.rows_per_offset();
    let c_in = if transpose_w { p.weight.ncols() } else { rows };
    let mut gx = Array2::zeros((map.n_in, c_in));
    for (oi, pairs) in map.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let w = p.weight.slice(s![oi * rows..(oi + 1) * rows, ..]);
        let g = gather(gout, pairs.iter().map(|&(_, j)| j as usize), pairs.len());
        // d(in) = gout . W_k^T in the forward orientation
        let prod = if transpose_w { g.dot(&w) } else { g.dot(&w.t()) };
        for (r, &(i, _)) in pairs.iter().enumerate() {
            let mut row = gx.row_mut(i as usize);
            row += &prod.row(r);
        }
    }
    gx
}

pub fn conv_backward_weight<F: Scalar>(
    x: &Array2<F>,
    gout: &Array2<F>,
    p: &ConvParams<F>,
    map: &KernelMap,
    transpose_w: bool,
) -> Array2<F> {
    let rows = p.rows_per_offset();
    let mut gw = Array2::zeros(p.weight.dim());
    for (oi, pairs) in map.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let xin = gather(x, pairs.iter().map(|&(i, _)| i as usize), pairs.len());
        let g = gather(gout, pairs.iter().map(|&(_, j)| j as usize), pairs.len());
        let grad = if transpose_w {
            g.t().dot(&xin)
        } else {
            xin.t().dot(&g)
        };
        let mut slot = gw.slice_mut(s![oi * rows..(oi + 1) * rows, ..]);
        slot += &grad;
    }
    gw
}

fn colsum<F: Scalar>(g: &Array2<F>) -> Array2<F> {
    g.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// Tape ids for one convolution layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

fn conv_params_from_store<F: Scalar>(
    store: &ParamStore<F>,
    ids: ConvIds,
    kernel: [usize; 3],
) -> ConvParams<F> {
    ConvParams {
        kernel,
        weight: store.value(ids.weight).clone(),
        bias: ids.bias.map(|b| store.value(b).clone()),
    }
}

/// Shared tape op behind [`subm_conv`], [`strided_conv`] and
/// [`transposed_conv`]; the map orientation and `transpose_w` distinguish
/// them.
pub fn conv_op<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    x: VarId,
    ids: ConvIds,
    kernel: [usize; 3],
    map: Arc<KernelMap>,
    transpose_w: bool,
) -> Result<VarId, TapeError> {
    let p = conv_params_from_store(store, ids, kernel);
    let out = conv_forward(tape.value(x), &p, &map, transpose_w)?;
    let back = move |g: &Array2<F>, ctx: &mut crate::nn::tape::BackCtx<'_, F>| {
        let p = conv_params_from_store(ctx.store, ids, kernel);
        let gx = conv_backward_input(g, &p, &map, transpose_w);
        let gw = conv_backward_weight(ctx.value(x), g, &p, &map, transpose_w);
        ctx.add_param_grad(ids.weight, &gw);
        if let Some(b) = ids.bias {
            ctx.add_param_grad(b, &colsum(g));
        }
        ctx.add_grad(x, gx);
    };
    Ok(tape.push(out, Some(Box::new(back))))
}

pub fn subm_conv<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    x: VarId,
    ids: ConvIds,
    kernel: [usize; 3],
    map: Arc<KernelMap>,
) -> Result<VarId, TapeError> {
    conv_op(tape, store, x, ids, kernel, map, false)
}

pub fn strided_conv<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    x: VarId,
    ids: ConvIds,
    kernel: [usize; 3],
    map: Arc<KernelMap>,
) -> Result<VarId, TapeError> {
    conv_op(tape, store, x, ids, kernel, map, false)
}

/// Transposed convolution: replays the forward strided map with roles swapped
/// and per-offset weight blocks transposed. `map` is the *forward* (fine →
/// coarse) map; the op scatters coarse features back onto the fine set.
pub fn transposed_conv<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    x: VarId,
    ids: ConvIds,
    kernel: [usize; 3],
    forward_map: &KernelMap,
) -> Result<VarId, TapeError> {
    let map = Arc::new(forward_map.transposed());
    conv_op(tape, store, x, ids, kernel, map, true)
}

// ---------------------------------------------------------------------------
// depthwise convolution
// ---------------------------------------------------------------------------

pub fn depthwise_forward<F: Scalar>(
    x: &Array2<F>,
    p: &DepthwiseParams<F>,
    map: &KernelMap,
) -> Result<Array2<F>, TapeError> {
    let c = p.weight.ncols();
    if x.ncols() != c {
        return Err(TapeError::ChannelMismatch {
            expected: c,
            got: x.ncols(),
        });
    }
    let mut out = Array2::zeros((map.n_out, c));
    for (oi, pairs) in map.pairs.iter().enumerate() {
        let w = p.weight.row(oi);
        for &(i, j) in pairs {
            let xi = x.row(i as usize);
            let mut oj = out.row_mut(j as usize);
            oj.zip_mut_with(&(&xi * &w), |o, &v| *o += v);
        }
    }
    if let Some(b) = &p.bias {
        out += &b.row(0);
    }
    Ok(out)
}

pub fn depthwise_backward<F: Scalar>(
    x: &Array2<F>,
    gout: &Array2<F>,
    p: &DepthwiseParams<F>,
    map: &KernelMap,
) -> (Array2<F>, Array2<F>) {
    let c = p.weight.ncols();
    let mut gx = Array2::zeros((map.n_in, c));
    let mut gw = Array2::zeros(p.weight.dim());
    for (oi, pairs) in map.pairs.iter().enumerate() {
        let w = p.weight.row(oi);
        for &(i, j) in pairs {
            let gj = gout.row(j as usize);
            let xi = x.row(i as usize);
            let mut gi = gx.row_mut(i as usize);
            gi.zip_mut_with(&(&gj * &w), |o, &v| *o += v);
            let mut gwr = gw.row_mut(oi);
            gwr.zip_mut_with(&(&gj * &xi), |o, &v| *o += v);
        }
    }
    (gx, gw)
}

/// Expands depthwise weights to the equivalent full convolution with diagonal
/// per-offset matrices (oracle support).
pub fn expand_depthwise<F: Scalar>(p: &DepthwiseParams<F>) -> ConvParams<F> {
    let (kvol, c) = p.weight.dim();
    let mut weight = Array2::zeros((kvol * c, c));
    for oi in 0..kvol {
        for ch in 0..c {
            weight[[oi * c + ch, ch]] = p.weight[[oi, ch]];
        }
    }
    ConvParams {
        kernel: p.kernel,
        weight,
        bias: p.bias.clone(),
    }
}

pub fn depthwise_conv<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    x: VarId,
    ids: ConvIds,
    kernel: [usize; 3],
    map: Arc<KernelMap>,
) -> Result<VarId, TapeError> {
    let p = DepthwiseParams {
        kernel,
        weight: store.value(ids.weight).clone(),
        bias: ids.bias.map(|b| store.value(b).clone()),
    };
    let out = depthwise_forward(tape.value(x), &p, &map)?;
    let back = move |g: &Array2<F>, ctx: &mut crate::nn::tape::BackCtx<'_, F>| {
        let p = DepthwiseParams {
            kernel,
            weight: ctx.store.value(ids.weight).clone(),
            bias: None,
        };
        let (gx, gw) = depthwise_backward(ctx.value(x), g, &p, &map);
        ctx.add_param_grad(ids.weight, &gw);
        if let Some(b) = ids.bias {
            ctx.add_param_grad(b, &colsum(g));
        }
        ctx.add_grad(x, gx);
    };
    Ok(tape.push(out, Some(Box::new(back))))
}

// ---------------------------------------------------------------------------
// pointwise linear
// ---------------------------------------------------------------------------

pub fn linear_op<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    x: VarId,
    ids: ConvIds,
) -> Result<VarId, TapeError> {
    let w = store.value(ids.weight);
    if tape.value(x).ncols() != w.nrows() {
        return Err(TapeError::ChannelMismatch {
            expected: w.nrows(),
            got: tape.value(x).ncols(),
        });
    }
    let mut out = tape.value(x).dot(w);
    if let Some(b) = ids.bias {
        out += &store.value(b).row(0);
    }
    let back = move |g: &Array2<F>, ctx: &mut crate::nn::tape::BackCtx<'_, F>| {
        let w = ctx.store.value(ids.weight).clone();
        let gx = g.dot(&w.t());
        let gw = ctx.value(x).t().dot(g);
        ctx.add_param_grad(ids.weight, &gw);
        if let Some(b) = ids.bias {
            ctx.add_param_grad(b, &colsum(g));
        }
        ctx.add_grad(x, gx);
    };
    Ok(tape.push(out, Some(Box::new(back))))
}

// ---------------------------------------------------------------------------
// normalizations
// ---------------------------------------------------------------------------

pub fn layer_norm_forward<F: Scalar>(
    x: &Array2<F>,
    p: &AffineNormParams<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let c = x.ncols();
    let cf = F::from_f64_(c as f64);
    let mut xhat = Array2::zeros(x.dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (r, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
        let inv = (var + p.eps).sqrt().recip();
        inv_std[r] = inv;
        for ch in 0..c {
            xhat[[r, ch]] = (x[[r, ch]] - mean) * inv;
        }
    }
    let y = &xhat * &p.gamma.row(0) + &p.beta.row(0);
    (y, xhat, inv_std)
}

pub fn layer_norm_op<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    x: VarId,
    gamma: ParamId,
    beta: ParamId,
    eps: F,
) -> Result<VarId, TapeError> {
    let p = AffineNormParams {
        gamma: store.value(gamma).clone(),
        beta: store.value(beta).clone(),
        eps,
    };
    let (y, xhat, inv_std) = layer_norm_forward(tape.value(x), &p);
    let back = move |g: &Array2<F>, ctx: &mut crate::nn::tape::BackCtx<'_, F>| {
        let gam = ctx.store.value(gamma).clone();
        let c = g.ncols();
        let cf = F::from_f64_(c as f64);
        let dxhat = g * &gam.row(0);
        let mut gx = Array2::zeros(g.dim());
        for r in 0..g.nrows() {
            let drow = dxhat.row(r);
            let hrow = xhat.row(r);
            let sum_d = drow.sum();
            let sum_dh = drow
                .iter()
                .zip(hrow.iter())
                .map(|(&d, &h)| d * h)
                .sum::<F>();
            for ch in 0..c {
                gx[[r, ch]] =
                    inv_std[r] * (dxhat[[r, ch]] - sum_d / cf - xhat[[r, ch]] * sum_dh / cf);
            }
        }
        let ggamma = colsum(&(g * &xhat));
        ctx.add_param_grad(gamma, &ggamma);
        ctx.add_param_grad(beta, &colsum(g));
        ctx.add_grad(x, gx);
    };
    Ok(tape.push(y, Some(Box::new(back))))
}

/// Global response normalization. Statistics are computed per batch item over
/// that item's active voxels; `segments` gives the contiguous row range of
/// each batch item (rows are batch-major in canonical order).
///
/// Per segment: `g_c = ||x_.c||_2`, `n_c = g_c / (mean_c(g) + eps)`,
/// `y = gamma ⊙ (x · n) + beta + x`.
pub fn grn_forward<F: Scalar>(
    x: &Array2<F>,
    p: &AffineNormParams<F>,
    segments: &[Range<usize>],
) -> Array2<F> {
    let c = x.ncols();
    let mut y = x.clone();
    for seg in segments {
        let xs = x.slice(s![seg.clone(), ..]);
        let mut gnorm = Array1::zeros(c);
        for ch in 0..c {
            gnorm[ch] = xs.column(ch).iter().map(|&v| v * v).sum::<F>().sqrt();
        }
        let mean = gnorm.sum() / F::from_f64_(c as f64);
        for r in seg.clone() {
            for ch in 0..c {
                let n = gnorm[ch] / (mean + p.eps);
                y[[r, ch]] =
                    p.gamma[[0, ch]] * x[[r, ch]] * n + p.beta[[0, ch]] + x[[r, ch]];
            }
        }
    }
    y
}

pub fn grn_op<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    x: VarId,
    gamma: ParamId,
    beta: ParamId,
    eps: F,
    segments: Vec<Range<usize>>,
) -> Result<VarId, TapeError> {
    let p = AffineNormParams {
        gamma: store.value(gamma).clone(),
        beta: store.value(beta).clone(),
        eps,
    };
    let y = grn_forward(tape.value(x), &p, &segments);
    let back = move |g: &Array2<F>, ctx: &mut crate::nn::tape::BackCtx<'_, F>| {
        let gam = ctx.store.value(gamma).clone();
        let xv = ctx.value(x).clone();
        let c = g.ncols();
        let cf = F::from_f64_(c as f64);
        let mut gx = Array2::zeros(g.dim());
        let mut ggamma = Array2::zeros((1, c));
        for seg in &segments {
            let xs = xv.slice(s![seg.clone(), ..]);
            let gs = g.slice(s![seg.clone(), ..]);
            let mut gnorm = Array1::<F>::zeros(c);
            for ch in 0..c {
                gnorm[ch] = xs.column(ch).iter().map(|&v| v * v).sum::<F>().sqrt();
            }
            let mean = gnorm.sum() / cf;
            let denom = mean + eps;
            // s_c = sum_rows gout * gamma_c * x  (sensitivity through n_c)
            let mut sc = Array1::<F>::zeros(c);
            for ch in 0..c {
                sc[ch] = gs
                    .column(ch)
                    .iter()
                    .zip(xs.column(ch).iter())
                    .map(|(&gv, &xv)| gv * xv)
                    .sum::<F>()
                    * gam[[0, ch]];
            }
            let t: F = (0..c).map(|ch| sc[ch] * gnorm[ch]).sum();
            for r in seg.clone() {
                for ch in 0..c {
                    let n = gnorm[ch] / denom;
                    let direct = g[[r, ch]] * (gam[[0, ch]] * n + F::one());
                    let coeff = if gnorm[ch] > F::zero() {
                        (sc[ch] / denom - t / (cf * denom * denom)) / gnorm[ch]
                    } else {
                        F::zero()
                    };
                    gx[[r, ch]] = direct + coeff * xv[[r, ch]];
                }
            }
            for ch in 0..c {
                let n = gnorm[ch] / denom;
                ggamma[[0, ch]] += gs
                    .column(ch)
                    .iter()
                    .zip(xs.column(ch).iter())
                    .map(|(&gv, &xv)| gv * xv * n)
                    .sum::<F>();
            }
        }
        ctx.add_param_grad(gamma, &ggamma);
        ctx.add_param_grad(beta, &colsum(g));
        ctx.add_grad(x, gx);
    };
    Ok(tape.push(y, Some(Box::new(back))))
}

// ---------------------------------------------------------------------------
// activations & elementwise
// ---------------------------------------------------------------------------

pub fn gelu_op<F: Scalar>(tape: &mut Tape<F>, x: VarId) -> VarId {
    let y = tape.value(x).mapv(|v| v * normal_cdf(v));
    let back = move |g: &Array2<F>, ctx: &mut crate::nn::tape::BackCtx<'_, F>| {
        let xv = ctx.value(x);
        let inv_sqrt_2pi = F::from_f64_(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let half = F::from_f64_(0.5);
        let mut gx = xv.clone();
        gx.zip_mut_with(g, |v, &gv| {
            let x = *v;
            let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
            *v = gv * (normal_cdf(x) + x * pdf);
        });
        ctx.add_grad(x, gx);
    };
    tape.push(y, Some(Box::new(back)))
}

pub fn sigmoid_op<F: Scalar>(tape: &mut Tape<F>, x: VarId) -> VarId {
    let y = tape.value(x).mapv(|v| F::one() / (F::one() + (-v).exp()));
    let y_saved = y.clone();
    let back = move |g: &Array2<F>, ctx: &mut crate::nn::tape::BackCtx<'_, F>| {
        let mut gx = y_saved.clone();
        gx.zip_mut_with(g, |v, &gv| {
            let s = *v;
            *v = gv * s * (F::one() - s);
        });
        ctx.add_grad(x, gx);
    };
    tape.push(y, Some(Box::new(back)))
}

pub fn add_op<F: Scalar>(tape: &mut Tape<F>, a: VarId, b: VarId) -> VarId {
    let y = tape.value(a) + tape.value(b);
    let back = move |g: &Array2<F>, ctx: &mut crate::nn::tape::BackCtx<'_, F>| {
        ctx.add_grad(a, g.clone());
        ctx.add_grad(b, g.clone());
    };
    tape.push(y, Some(Box::new(back)))
}

/// Average pooling over a strided map with `kernel == factor`. The divisor is
/// the number of ACTIVE contributors per output cell, not the cell volume, so
/// pooled binary labels stay meaningful as fractions of active voxels.
pub fn avg_pool_forward<F: Scalar>(x: &Array2<F>, map: &KernelMap) -> (Array2<F>, Vec<usize>) {
    let c = x.ncols();
    let mut out = Array2::zeros((map.n_out, c));
    let mut counts = vec![0usize; map.n_out];
    for pairs in &map.pairs {
        for &(i, j) in pairs {
            let mut row = out.row_mut(j as usize);
            row += &x.row(i as usize);
            counts[j as usize] += 1;
        }
    }
    for (j, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            let inv = F::from_f64_(1.0 / cnt as f64);
            let mut row = out.row_mut(j);
            row.mapv_inplace(|v| v * inv);
        }
    }
    (out, counts)
}

pub fn avg_pool_op<F: Scalar>(tape: &mut Tape<F>, x: VarId, map: Arc<KernelMap>) -> VarId {
    let (y, counts) = avg_pool_forward(tape.value(x), &map);
    let back = move |g: &Array2<F>, ctx: &mut crate::nn::tape::BackCtx<'_, F>| {
        let mut gx = Array2::zeros((map.n_in, g.ncols()));
        for pairs in &map.pairs {
            for &(i, j) in pairs {
                let inv = F::from_f64_(1.0 / counts[j as usize] as f64);
                let mut row = gx.row_mut(i as usize);
                row.scaled_add(inv, &g.row(j as usize));
            }
        }
        ctx.add_grad(x, gx);
    };
    tape.push(y, Some(Box::new(back)))
}
