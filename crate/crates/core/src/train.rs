//! Training machinery: soft Dice loss, deep supervision across head
//! resolutions, AdamW with decoupled weight decay, the warmup/constant/cosine
//! learning-rate schedule, spatial and intensity augmentation, and k-fold
//! case splitting.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ForwardOutput, ModelError, SparseUNet};
use crate::nn::ops::avg_pool_forward;
use crate::nn::tape::{ParamStore, Tape, TapeError, VarId};
use crate::sparse::{Coord, CoordinatePyramid, SparseError, SparseTensor};
use crate::volume::{GridKind, ResampleMode, VoxelGrid};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("prediction shape {pred:?} does not match target shape {target:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        target: (usize, usize),
    },
    #[error("no samples to train on")]
    NoSamples,
    #[error("label grid required, got intensity grid")]
    NotLabels,
    #[error("image and label dims differ: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Max rotation about the x and y axes, radians.
    pub rot_xy_max: f64,
    /// Max rotation about the z axis, radians.
    pub rot_z_max: f64,
    /// Max in-plane translation, voxels.
    pub trans_xy_max: f64,
    /// Max translation along z, voxels.
    pub trans_z_max: f64,
    /// Max relative isotropic scale deviation.
    pub scale_max: f64,
    pub flip_prob: f64,
    pub intensity_scale: f64,
    pub intensity_shift: f64,
    pub intensity_prob: f64,
    pub noise_std: f64,
    pub noise_prob: f64,
    pub smooth_sigma: (f64, f64),
    pub smooth_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rot_xy_max: std::f64::consts::PI / 36.0,
            rot_z_max: std::f64::consts::PI / 8.0,
            trans_xy_max: 30.0,
            trans_z_max: 5.0,
            scale_max: 0.15,
            flip_prob: 0.3,
            intensity_scale: 0.1,
            intensity_shift: 5.0,
            intensity_prob: 0.3,
            noise_std: 1.0,
            noise_prob: 0.3,
            smooth_sigma: (0.25, 1.5),
            smooth_prob: 0.3,
        }
    }
}

impl AugmentConfig {
    /// All amplitudes and probabilities zero; augmentation becomes identity.
    pub fn disabled() -> Self {
        AugmentConfig {
            rot_xy_max: 0.0,
            rot_z_max: 0.0,
            trans_xy_max: 0.0,
            trans_z_max: 0.0,
            scale_max: 0.0,
            flip_prob: 0.0,
            intensity_scale: 0.0,
            intensity_shift: 0.0,
            intensity_prob: 0.0,
            noise_std: 0.0,
            noise_prob: 0.0,
            smooth_sigma: (0.0, 0.0),
            smooth_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub warmup_epochs: usize,
    pub constant_epochs: usize,
    pub cosine_epochs: usize,
    pub dice_eps: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch_size: 1,
            grad_accum: 8,
            warmup_epochs: 1,
            constant_epochs: 99,
            cosine_epochs: 400,
            dice_eps: 1e-5,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.constant_epochs + self.cosine_epochs
    }
}

/// Schedule: linear ramp over the warmup epochs, flat at `lr`, then cosine
/// decay to zero over the final phase.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let e = epoch - cfg.warmup_epochs;
    if e < cfg.constant_epochs {
        return cfg.lr;
    }
    let t = (e - cfg.constant_epochs) as f64 / cfg.cosine_epochs as f64;
    if t >= 1.0 {
        return 0.0;
    }
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

// ---------------------------------------------------------------------------
// Dice loss
// ---------------------------------------------------------------------------

/// Per-channel soft Dice loss `1 - (2·Σpt + eps) / (Σp + Σt + eps)`, with the
/// stabilizer in both numerator and denominator so empty-empty channels score
/// a loss of zero.
pub fn dice_loss_per_channel<F: Scalar>(pred: &Array2<F>, target: &Array2<F>, eps: F) -> Vec<F> {
    let c = pred.ncols();
    (0..c)
        .map(|ch| {
            let mut inter = F::zero();
            let mut psum = F::zero();
            let mut tsum = F::zero();
            for (&p, &t) in pred.column(ch).iter().zip(target.column(ch).iter()) {
                inter += p * t;
                psum += p;
                tsum += t;
            }
            F::one() - (F::from_f64_(2.0) * inter + eps) / (psum + tsum + eps)
        })
        .collect()
}

pub fn dice_loss_value<F: Scalar>(pred: &Array2<F>, target: &Array2<F>, eps: F) -> F {
    let per = dice_loss_per_channel(pred, target, eps);
    per.iter().copied().sum::<F>() / F::from_f64_(per.len() as f64)
}

/// Tape op: channel-mean Dice loss as a 1×1 scalar.
pub fn dice_loss_op<F: Scalar>(
    tape: &mut Tape<F>,
    pred: VarId,
    target: Array2<F>,
    eps: F,
) -> Result<VarId, TrainError> {
    let p = tape.value(pred);
    if p.dim() != target.dim() {
        return Err(TrainError::ShapeMismatch {
            pred: p.dim(),
            target: target.dim(),
        });
    }
    let loss = dice_loss_value(p, &target, eps);
    let out = Array2::from_elem((1, 1), loss);
    let back = move |g: &Array2<F>, ctx: &mut crate::nn::tape::BackCtx<'_, F>| {
        let p = ctx.value(pred);
        let c = p.ncols();
        let cf = F::from_f64_(c as f64);
        let two = F::from_f64_(2.0);
        let mut gx = Array2::zeros(p.dim());
        for ch in 0..c {
            let mut inter = F::zero();
            let mut psum = F::zero();
            let mut tsum = F::zero();
            for (&pv, &tv) in p.column(ch).iter().zip(target.column(ch).iter()) {
                inter += pv * tv;
                psum += pv;
                tsum += tv;
            }
            let num = two * inter + eps;
            let den = psum + tsum + eps;
            for r in 0..p.nrows() {
                let t = target[[r, ch]];
                // d/dp of (num/den) = (2t*den - num) / den^2
                gx[[r, ch]] = -g[[0, 0]] * (two * t * den - num) / (den * den) / cf;
            }
        }
        ctx.add_grad(pred, gx);
    };
    Ok(tape.push(out, Some(Box::new(back))))
}

/// `Σ w_i · x_i` over 1×1 scalars.
pub fn weighted_sum_op<F: Scalar>(tape: &mut Tape<F>, terms: Vec<(F, VarId)>) -> VarId {
    let mut total = F::zero();
    for &(w, v) in &terms {
        total += w * tape.value(v)[[0, 0]];
    }
    let out = Array2::from_elem((1, 1), total);
    let back = move |g: &Array2<F>, ctx: &mut crate::nn::tape::BackCtx<'_, F>| {
        for &(w, v) in &terms {
            ctx.add_grad(v, g.mapv(|gv| gv * w));
        }
    };
    tape.push(out, Some(Box::new(back)))
}

/// Deep-supervision targets: the full-resolution target rows pooled down the
/// pyramid level by level with active-count average pooling. `targets[i]`
/// aligns with the head at stride `2^i`.
pub fn pooled_targets<F: Scalar>(
    target: &Array2<F>,
    pyramid: &mut CoordinatePyramid,
    levels: usize,
    factor: u32,
) -> Result<Vec<Array2<F>>, TrainError> {
    let mut out = vec![target.clone()];
    let mut stride = [1u32; 3];
    for _ in 1..levels {
        let map = pyramid.strided_map(
            stride,
            [factor as usize; 3],
            [factor; 3],
        )?;
        let (pooled, _) = avg_pool_forward(out.last().unwrap(), &map);
        out.push(pooled);
        stride = [stride[0] * factor, stride[1] * factor, stride[2] * factor];
    }
    Ok(out)
}

/// Loss `Σ_i (1/2^i) · Dice(head_i, target_i)` over the returned heads,
/// finest first. Returns the scalar loss var plus the per-head loss values.
pub fn deep_supervised_loss<F: Scalar>(
    fwd: &mut ForwardOutput<F>,
    target: &Array2<F>,
    pyramid: &mut CoordinatePyramid,
    dice_eps: F,
) -> Result<(VarId, Vec<F>), TrainError> {
    let n_heads = fwd.heads.len();
    let factor = if n_heads > 1 {
        (fwd.heads[1].stride[0] / fwd.heads[0].stride[0]).max(2)
    } else {
        2
    };
    let targets = pooled_targets(target, pyramid, n_heads, factor)?;
    let mut terms = Vec::with_capacity(n_heads);
    let mut per_head = Vec::with_capacity(n_heads);
    for (i, head) in fwd.heads.iter().enumerate() {
        let t = &targets[i];
        if tape_shape(&fwd.tape, head.var) != t.dim() {
            return Err(TrainError::ShapeMismatch {
                pred: tape_shape(&fwd.tape, head.var),
                target: t.dim(),
            });
        }
        let l = dice_loss_op(&mut fwd.tape, head.var, t.clone(), dice_eps)?;
        per_head.push(fwd.tape.value(l)[[0, 0]]);
        terms.push((F::from_f64_(0.5f64.powi(i as i32)), l));
    }
    Ok((weighted_sum_op(&mut fwd.tape, terms), per_head))
}

fn tape_shape<F: Scalar>(tape: &Tape<F>, v: VarId) -> (usize, usize) {
    tape.value(v).dim()
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

pub struct AdamState<F: Scalar> {
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
    pub step: usize,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        AdamState {
            m: store.ids().map(|id| Array2::zeros(store.value(id).dim())).collect(),
            v: store.ids().map(|id| Array2::zeros(store.value(id).dim())).collect(),
            step: 0,
        }
    }
}

/// One AdamW update from the accumulated gradients. Weight decay is
/// decoupled: `p ← p − lr·wd·p` before the Adam step, independent of the
/// gradient moments.
pub fn adamw_step<F: Scalar>(
    store: &mut ParamStore<F>,
    state: &mut AdamState<F>,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::from_f64_(cfg.beta1);
    let b2 = F::from_f64_(cfg.beta2);
    let one = F::one();
    let lr_f = F::from_f64_(lr);
    let wd = F::from_f64_(cfg.weight_decay);
    let eps = F::from_f64_(cfg.adam_eps);
    let bc1 = one - F::from_f64_(cfg.beta1.powi(t));
    let bc2 = one - F::from_f64_(cfg.beta2.powi(t));
    for (pi, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = store.grad(id).clone();
        let m = &mut state.m[pi];
        m.zip_mut_with(&g, |mv, &gv| *mv = b1 * *mv + (one - b1) * gv);
        let v = &mut state.v[pi];
        v.zip_mut_with(&g, |vv, &gv| *vv = b2 * *vv + (one - b2) * gv * gv);
        let p = store.value_mut(id);
        p.mapv_inplace(|pv| pv - lr_f * wd * pv);
        ndarray::Zip::from(&mut *p)
            .and(&state.m[pi])
            .and(&state.v[pi])
            .for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv = *pv - lr_f * mhat / (vhat.sqrt() + eps);
            });
    }
    store.zero_grads();
}

// ---------------------------------------------------------------------------
// k-fold split
// ---------------------------------------------------------------------------

/// Deterministic shuffled k-fold partition; fold sizes differ by at most one
/// (489 cases over 5 folds → 98, 98, 98, 98, 97).
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, v) in idx.into_iter().enumerate() {
        folds[i % k].push(v);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

fn rot_matrix(ax: f64, ay: f64, az: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, bk) in b.iter().enumerate() {
                    out[i][j] += a[i][k] * bk[j];
                }
            }
        }
        out
    };
    mul(rz, mul(ry, rx))
}

fn uniform(rng: &mut ChaCha12Rng, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.gen_range(-max..=max)
    }
}

/// Jointly augments an image/label pair. Geometry runs as a single inverse
/// affine resampling pass (rotation, isotropic scale, translation about the
/// volume center) followed by axis flips; the image then gets optional
/// intensity scale/shift, additive Gaussian noise, and Gaussian smoothing.
/// The image samples trilinearly, the label nearest, both clamped to edge.
pub fn augment_pair(
    image: &VoxelGrid,
    label: &VoxelGrid,
    cfg: &AugmentConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(VoxelGrid, VoxelGrid), TrainError> {
    if label.kind != GridKind::LabelCode {
        return Err(TrainError::NotLabels);
    }
    if image.dims != label.dims {
        return Err(TrainError::DimsMismatch(image.dims, label.dims));
    }
    let ax = uniform(rng, cfg.rot_xy_max);
    let ay = uniform(rng, cfg.rot_xy_max);
    let az = uniform(rng, cfg.rot_z_max);
    let scale = 1.0 + uniform(rng, cfg.scale_max);
    let t = [
        uniform(rng, cfg.trans_xy_max),
        uniform(rng, cfg.trans_xy_max),
        uniform(rng, cfg.trans_z_max),
    ];
    let r = rot_matrix(ax, ay, az);
    // inverse of p_out = s·R·(p_src − c) + c + t
    let center = [
        (image.dims[0] as f64 - 1.0) / 2.0,
        (image.dims[1] as f64 - 1.0) / 2.0,
        (image.dims[2] as f64 - 1.0) / 2.0,
    ];
    let [nx, ny, nz] = image.dims;
    let mut img_data = vec![0f32; image.voxel_count()];
    let mut lab_data = vec![0f32; label.voxel_count()];
    let clamp = |u: f64, n: usize| u.max(0.0).min((n - 1) as f64);
    let mut w = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = [
                    (x as f64 - center[0] - t[0]) / scale,
                    (y as f64 - center[1] - t[1]) / scale,
                    (z as f64 - center[2] - t[2]) / scale,
                ];
                // R^T = R^-1
                let src = [
                    r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2] + center[0],
                    r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2] + center[1],
                    r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2] + center[2],
                ];
                let (ux, uy, uz) = (
                    clamp(src[0], nx),
                    clamp(src[1], ny),
                    clamp(src[2], nz),
                );
                img_data[w] = image.trilinear(ux, uy, uz);
                lab_data[w] = label.at(
                    (ux.round() as usize).min(nx - 1),
                    (uy.round() as usize).min(ny - 1),
                    (uz.round() as usize).min(nz - 1),
                );
                w += 1;
            }
        }
    }

    let flips = [
        rng.gen_bool(cfg.flip_prob),
        rng.gen_bool(cfg.flip_prob),
        rng.gen_bool(cfg.flip_prob),
    ];
    if flips.iter().any(|&f| f) {
        img_data = flip_volume(&img_data, image.dims, flips);
        lab_data = flip_volume(&lab_data, image.dims, flips);
    }

    if rng.gen_bool(cfg.intensity_prob) {
        let s = 1.0 + uniform(rng, cfg.intensity_scale);
        for v in &mut img_data {
            *v = (*v as f64 * s) as f32;
        }
    }
    if rng.gen_bool(cfg.intensity_prob) {
        let sh = uniform(rng, cfg.intensity_shift);
        for v in &mut img_data {
            *v = (*v as f64 + sh) as f32;
        }
    }
    if rng.gen_bool(cfg.noise_prob) && cfg.noise_std > 0.0 {
        let dist = Normal::new(0.0, cfg.noise_std).expect("valid std");
        for v in &mut img_data {
            *v = (*v as f64 + dist.sample(rng)) as f32;
        }
    }
    if rng.gen_bool(cfg.smooth_prob) && cfg.smooth_sigma.1 > 0.0 {
        let sigma = rng.gen_range(cfg.smooth_sigma.0..=cfg.smooth_sigma.1);
        img_data = gaussian_smooth(&img_data, image.dims, sigma);
    }

    let img = VoxelGrid::new(
        image.dims,
        image.spacing,
        image.origin,
        GridKind::IntensityHu,
        img_data,
    )
    .expect("dims preserved");
    let lab = VoxelGrid::new(
        label.dims,
        label.spacing,
        label.origin,
        GridKind::LabelCode,
        lab_data,
    )
    .expect("nearest sampling keeps label codes");
    Ok((img, lab))
}

fn flip_volume(data: &[f32], dims: [usize; 3], flips: [bool; 3]) -> Vec<f32> {
    let [nx, ny, nz] = dims;
    let mut out = vec![0f32; data.len()];
    for z in 0..nz {
        let sz = if flips[2] { nz - 1 - z } else { z };
        for y in 0..ny {
            let sy = if flips[1] { ny - 1 - y } else { y };
            for x in 0..nx {
                let sx = if flips[0] { nx - 1 - x } else { x };
                out[x + nx * (y + ny * z)] = data[sx + nx * (sy + ny * sz)];
            }
        }
    }
    out
}

/// Separable Gaussian blur with clamp-to-edge, radius 3σ.
pub fn gaussian_smooth(data: &[f32], dims: [usize; 3], sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let [nx, ny, nz] = dims;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as i64;
        let mut next = vec![0f32; cur.len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as i64, y as i64, z as i64];
                    let mut acc = 0f64;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let mut q = p;
                        q[axis] = (p[axis] + ki as i64 - radius).clamp(0, n - 1);
                        acc += kv * cur[idx(q[0] as usize, q[1] as usize, q[2] as usize)] as f64;
                    }
                    next[idx(x, y, z)] = acc as f32;
                }
            }
        }
        cur = next;
    }
    cur
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// One pre-sparsified training sample: active coordinates, per-voxel input
/// features, and the aligned multi-channel binary target.
pub struct PreparedCase<F: Scalar> {
    pub coords: Vec<Coord>,
    pub feats: Array2<F>,
    pub target: Array2<F>,
}

pub struct StepLog<F: Scalar> {
    /// Optimizer step index (after grad_accum micro-batches).
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: F,
    pub per_head: Vec<F>,
}

/// Runs up to `max_steps` optimizer steps over `cases` (cycled in order; one
/// optimizer step consumes `grad_accum` samples with gradients averaged).
/// Returns the last step's loss.
pub fn train_loop<F: Scalar>(
    model: &mut SparseUNet<F>,
    cases: &[PreparedCase<F>],
    cfg: &TrainConfig,
    max_steps: usize,
    mut on_step: impl FnMut(&StepLog<F>),
) -> Result<F, TrainError> {
    if cases.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let mut adam = AdamState::new(&model.store);
    let eps = F::from_f64_(cfg.dice_eps);
    let mut last = F::zero();
    let mut sample_i = 0usize;
    let micro_per_epoch = cases.len().max(cfg.grad_accum);
    for step in 0..max_steps {
        let epoch = (step * cfg.grad_accum) / micro_per_epoch;
        let lr = lr_at_epoch(cfg, epoch.min(cfg.total_epochs() - 1));
        let mut step_loss = F::zero();
        let mut step_heads: Vec<F> = Vec::new();
        for _ in 0..cfg.grad_accum {
            let case = &cases[sample_i % cases.len()];
            sample_i += 1;
            let mut pyramid = CoordinatePyramid::new();
            let level = pyramid.register(case.coords.clone(), [1, 1, 1])?;
            let st = SparseTensor {
                level,
                stride: [1, 1, 1],
                feats: case.feats.clone(),
            };
            let mut fwd = model.forward(&st, &mut pyramid, true)?;
            let (loss_var, per_head) =
                deep_supervised_loss(&mut fwd, &case.target, &mut pyramid, eps)?;
            let loss = fwd.tape.value(loss_var)[[0, 0]];
            step_loss += loss / F::from_f64_(cfg.grad_accum as f64);
            if step_heads.is_empty() {
                step_heads = per_head;
            }
            // gradient averaged over the accumulation window
            let seed = Array2::from_elem((1, 1), F::from_f64_(1.0 / cfg.grad_accum as f64));
            fwd.tape.backward(loss_var, seed, &mut model.store)?;
        }
        adamw_step(&mut model.store, &mut adam, lr, cfg);
        last = step_loss;
        on_step(&StepLog {
            step,
            epoch,
            lr,
            loss: step_loss,
            per_head: step_heads,
        });
    }
    Ok(last)
}

/// Builds a [`PreparedCase`] from dense image/label grids: active voxels are
/// those the mask keeps, features come from `feature_fn`, targets are the
/// three-channel label encoding restricted to active rows.
pub fn prepare_case<F: Scalar>(
    image: &VoxelGrid,
    label: &VoxelGrid,
    mask: &[bool],
    feature_fn: impl Fn(f32) -> F,
) -> Result<PreparedCase<F>, TrainError> {
    if image.dims != label.dims {
        return Err(TrainError::DimsMismatch(image.dims, label.dims));
    }
    let ml = crate::volume::make_multilabel(label).map_err(|_| TrainError::NotLabels)?;
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    let mut target = Vec::new();
    let mut li = 0usize;
    for z in 0..image.dims[2] {
        for y in 0..image.dims[1] {
            for x in 0..image.dims[0] {
                if mask[li] {
                    coords.push([0, x as i32, y as i32, z as i32]);
                    feats.push(feature_fn(image.data[li]));
                    for ch in 0..3 {
                        target.push(if ml.channels[ch][li] {
                            F::one()
                        } else {
                            F::zero()
                        });
                    }
                }
                li += 1;
            }
        }
    }
    let n = coords.len();
    Ok(PreparedCase {
        coords,
        feats: Array2::from_shape_vec((n, 1), feats).expect("one feature per row"),
        target: Array2::from_shape_vec((n, 3), target).expect("three channels per row"),
    })
}

/// Resamples an image/label pair to `spacing` (trilinear / nearest).
pub fn resample_pair(
    image: &VoxelGrid,
    label: &VoxelGrid,
    spacing: [f64; 3],
) -> Result<(VoxelGrid, VoxelGrid), TrainError> {
    let img = image
        .resample(spacing, ResampleMode::Trilinear)
        .map_err(|_| TrainError::DimsMismatch(image.dims, label.dims))?;
    let lab = label
        .resample(spacing, ResampleMode::Nearest)
        .map_err(|_| TrainError::DimsMismatch(image.dims, label.dims))?;
    Ok((img, lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn dice_perfect_and_disjoint() {
        let t = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let eps = 1e-5;
        let per = dice_loss_per_channel(&t, &t, eps);
        for l in per {
            assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);
        }
        let p = array![[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]];
        let per = dice_loss_per_channel(&p, &t, eps);
        for l in per {
            assert!(l > 0.999);
        }
    }

    #[test]
    fn dice_empty_empty_is_zero_loss() {
        let z = Array2::<f64>::zeros((4, 1));
        assert_abs_diff_eq!(dice_loss_value(&z, &z, 1e-5), 0.0);
    }

    #[test]
    fn dice_half_overlap_value() {
        // pred == target on one of two foreground voxels, one false positive
        let t = array![[1.0], [1.0], [0.0]];
        let p = array![[1.0], [0.0], [1.0]];
        let eps = 1e-5;
        let l = dice_loss_value(&p, &t, eps);
        // dice = (2*1 + eps)/(2 + 2 + eps)
        assert_abs_diff_eq!(l, 1.0 - (2.0 + eps) / (4.0 + eps), epsilon = 1e-12);
    }

    #[test]
    fn dice_grad_matches_finite_difference() {
        let t = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]];
        let p0 = array![[0.7, 0.2], [0.4, 0.9], [0.6, 0.5], [0.1, 0.3]];
        let eps = 1e-5;
        let mut tape = Tape::<f64>::new(true);
        let p = tape.leaf(p0.clone());
        let l = dice_loss_op(&mut tape, p, t.clone(), eps).unwrap();
        let mut store = ParamStore::<f64>::new();
        let grads = tape
            .backward(l, Array2::from_elem((1, 1), 1.0), &mut store)
            .unwrap();
        let g = grads[0].as_ref().unwrap(); // leaf is var 0
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..2 {
                let mut pp = p0.clone();
                pp[[r, c]] += h;
                let mut pm = p0.clone();
                pm[[r, c]] -= h;
                let fd = (dice_loss_value(&pp, &t, eps) - dice_loss_value(&pm, &t, eps)) / (2.0 * h);
                assert_abs_diff_eq!(g[[r, c]], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn weighted_sum_forward_and_backward() {
        let mut tape = Tape::<f64>::new(true);
        let a = tape.leaf(array![[2.0]]);
        let b = tape.leaf(array![[3.0]]);
        let s = weighted_sum_op(&mut tape, vec![(1.0, a), (0.5, b)]);
        assert_abs_diff_eq!(tape.value(s)[[0, 0]], 3.5);
        let mut store = ParamStore::<f64>::new();
        let grads = tape
            .backward(s, Array2::from_elem((1, 1), 2.0), &mut store)
            .unwrap();
        assert_abs_diff_eq!(grads[0].as_ref().unwrap()[[0, 0]], 2.0);
        assert_abs_diff_eq!(grads[1].as_ref().unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn schedule_pinned_values() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.total_epochs(), 500);
        assert_abs_diff_eq!(lr_at_epoch(&cfg, 0), 5e-4);
        assert_abs_diff_eq!(lr_at_epoch(&cfg, 50), 5e-4);
        assert_abs_diff_eq!(lr_at_epoch(&cfg, 99), 5e-4);
        assert_abs_diff_eq!(lr_at_epoch(&cfg, 300), 2.5e-4, epsilon = 1e-12);
        assert_abs_diff_eq!(lr_at_epoch(&cfg, 500), 0.0);
        // nonincreasing after warmup
        let mut prev = lr_at_epoch(&cfg, 1);
        for e in 2..520 {
            let cur = lr_at_epoch(&cfg, e);
            assert!(cur <= prev + 1e-15, "epoch {e}");
            prev = cur;
        }
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = TrainConfig {
            warmup_epochs: 4,
            ..Default::default()
        };
        assert_abs_diff_eq!(lr_at_epoch(&cfg, 0), 5e-4 * 0.25);
        assert_abs_diff_eq!(lr_at_epoch(&cfg, 1), 5e-4 * 0.5);
        assert_abs_diff_eq!(lr_at_epoch(&cfg, 3), 5e-4);
    }

    #[test]
    fn adamw_matches_hand_computation() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", array![[1.0]]);
        *store.grad_mut(id) = array![[0.5]];
        let mut state = AdamState::new(&store);
        adamw_step(&mut store, &mut state, 0.1, &cfg);
        // t=1: m=(1-b1)g, v=(1-b2)g^2, mhat=g, vhat=g^2
        let expect = 1.0 - 0.1 * 0.5 / (0.5 + cfg.adam_eps);
        assert_abs_diff_eq!(store.value(id)[[0, 0]], expect, epsilon = 1e-12);
        // grads cleared after the step
        assert_abs_diff_eq!(store.grad(id)[[0, 0]], 0.0);
    }

    #[test]
    fn adamw_decoupled_decay_only() {
        let cfg = TrainConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", array![[2.0]]);
        let mut state = AdamState::new(&store);
        // zero gradient: only the decay term moves the weight
        adamw_step(&mut store, &mut state, 0.1, &cfg);
        assert_abs_diff_eq!(store.value(id)[[0, 0]], 2.0 * (1.0 - 0.1 * 0.01), epsilon = 1e-12);
    }

    #[test]
    fn kfold_sizes_and_disjointness() {
        let folds = kfold_split(489, 5, 7);
        let mut sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![97, 98, 98, 98, 98]);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..489).collect::<Vec<_>>());
        // deterministic by seed
        assert_eq!(folds, kfold_split(489, 5, 7));
        assert_ne!(folds, kfold_split(489, 5, 8));
    }

    fn phantom_pair(n: usize) -> (VoxelGrid, VoxelGrid) {
        let mut img = vec![-1000.0f32; n * n * n];
        let mut lab = vec![0.0f32; n * n * n];
        let c = n as f64 / 2.0;
        let mut li = 0;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)
                        + (z as f64 - c).powi(2))
                    .sqrt();
                    if d < n as f64 / 4.0 {
                        img[li] = 100.0;
                        lab[li] = 1.0;
                    }
                    li += 1;
                }
            }
        }
        (
            VoxelGrid::new([n; 3], [1.0; 3], [0.0; 3], GridKind::IntensityHu, img).unwrap(),
            VoxelGrid::new([n; 3], [1.0; 3], [0.0; 3], GridKind::LabelCode, lab).unwrap(),
        )
    }

    #[test]
    fn augment_disabled_is_identity() {
        let (img, lab) = phantom_pair(10);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let (ai, al) = augment_pair(&img, &lab, &AugmentConfig::disabled(), &mut rng).unwrap();
        assert_eq!(ai.data, img.data);
        assert_eq!(al.data, lab.data);
    }

    #[test]
    fn augment_keeps_label_codes_and_is_seeded() {
        let (img, lab) = phantom_pair(12);
        let cfg = AugmentConfig::default();
        let mut r1 = ChaCha12Rng::seed_from_u64(5);
        let (a1, l1) = augment_pair(&img, &lab, &cfg, &mut r1).unwrap();
        for v in &l1.data {
            assert!(*v == 0.0 || *v == 1.0);
        }
        let mut r2 = ChaCha12Rng::seed_from_u64(5);
        let (a2, l2) = augment_pair(&img, &lab, &cfg, &mut r2).unwrap();
        assert_eq!(a1.data, a2.data);
        assert_eq!(l1.data, l2.data);
    }

    #[test]
    fn flip_only_augment_is_exact_mirror() {
        let (img, lab) = phantom_pair(6);
        let mut cfg = AugmentConfig::disabled();
        cfg.flip_prob = 1.0;
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (ai, _) = augment_pair(&img, &lab, &cfg, &mut rng).unwrap();
        let expect = flip_volume(&img.data, img.dims, [true, true, true]);
        assert_eq!(ai.data, expect);
    }

    #[test]
    fn gaussian_smooth_preserves_constant() {
        let data = vec![3.5f32; 4 * 4 * 4];
        let out = gaussian_smooth(&data, [4, 4, 4], 1.0);
        for v in out {
            assert_abs_diff_eq!(v, 3.5, epsilon = 1e-5);
        }
    }

    #[test]
    fn deep_supervision_weights_and_short_training_descends() {
        let (img, lab) = phantom_pair(8);
        let mask: Vec<bool> = img.data.iter().map(|&v| v > -500.0).collect();
        let case = prepare_case::<f64>(&img, &lab, &mask, |v| (v / 100.0) as f64).unwrap();
        let cfg = ModelConfig {
            stage_widths: vec![4, 8],
            stage_depths: vec![1, 1],
            decoder_blocks_per_stage: 1,
            ds_heads: 1,
            ..Default::default()
        };
        let mut model = SparseUNet::<f64>::build(cfg, 11).unwrap();
        let tcfg = TrainConfig {
            grad_accum: 1,
            lr: 1e-2,
            warmup_epochs: 1,
            constant_epochs: 99,
            cosine_epochs: 400,
            ..Default::default()
        };
        let mut first = None;
        let last = train_loop(&mut model, std::slice::from_ref(&case), &tcfg, 20, |log| {
            if first.is_none() {
                first = Some(log.loss);
            }
            assert_eq!(log.per_head.len(), 1);
        })
        .unwrap();
        assert!(last < first.unwrap(), "loss should decrease: {last} vs {first:?}");
    }
}
