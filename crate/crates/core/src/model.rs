//! The sparse ConvNeXtV2 U-Net: six encoder stages with widths
//! (16, 32, 64, 128, 256, 512) and depths (2, 4, 4, 8, 8, 8), a five-stage
//! decoder with summation skips, and a classification head (norm → block →
//! 1×1×1 conv, 3 channels) at every decoder stage. Downsample and upsample
//! layers are LayerNorm followed by a 2×2×2 stride-2 (transposed)
//! convolution. The stem pointwise convolution and the head classifiers
//! carry no bias; with those choices the default configuration has exactly
//! 27,473,696 parameters.

use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::ops::{self, ConvIds};
use crate::nn::tape::{ParamId, ParamStore, Tape, TapeError, VarId};
use crate::sparse::{CoordSet, CoordinatePyramid, SparseError, SparseTensor};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("inconsistent config: {0}")]
    BadConfig(String),
    #[error("empty input tensor")]
    EmptyInput,
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint manifest: {0}")]
    BadManifest(String),
    #[error("checkpoint checksum mismatch (expected {expected}, payload hashes to {actual})")]
    Checksum { expected: String, actual: String },
    #[error("shape mismatch for tensor {name}: checkpoint has {got:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_widths: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub decoder_blocks_per_stage: usize,
    pub conv_kernel: usize,
    pub down_kernel: usize,
    pub down_stride: usize,
    pub num_classes: usize,
    pub mlp_expansion: usize,
    /// How many of the finest heads enter the deep-supervision loss.
    pub ds_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            stage_widths: vec![16, 32, 64, 128, 256, 512],
            stage_depths: vec![2, 4, 4, 8, 8, 8],
            decoder_blocks_per_stage: 2,
            conv_kernel: 3,
            down_kernel: 2,
            down_stride: 2,
            num_classes: 3,
            mlp_expansion: 4,
            ds_heads: 4,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and phantom-scale training.
    pub fn tiny() -> Self {
        ModelConfig {
            stage_widths: vec![8, 16],
            stage_depths: vec![1, 1],
            decoder_blocks_per_stage: 1,
            ds_heads: 1,
            ..Default::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Closed-form parameter count, layer by layer; equals
    /// [`SparseUNet::count_params`] for any valid config (27,473,696 on the
    /// defaults) without materializing the weights.
    pub fn param_count(&self) -> usize {
        let k3 = self.conv_kernel.pow(3);
        let dk3 = self.down_kernel.pow(3);
        let block = |c: usize| {
            let e = self.mlp_expansion * c;
            (k3 * c + c) + 2 * c + (c * e + e) + 2 * e + (e * c + c)
        };
        let w = &self.stage_widths;
        let s = w.len();
        // stem: pointwise conv (no bias) + layer norm
        let mut total = self.in_channels * w[0] + 2 * w[0];
        for i in 0..s {
            total += self.stage_depths[i] * block(w[i]);
        }
        for i in 0..s - 1 {
            total += 2 * w[i] + (dk3 * w[i] * w[i + 1] + w[i + 1]); // norm + down conv
            total += 2 * w[i + 1] + (dk3 * w[i] * w[i + 1] + w[i]); // norm + up conv
            total += self.decoder_blocks_per_stage * block(w[i]);
            total += 2 * w[i] + block(w[i]) + w[i] * self.num_classes; // head, no bias
        }
        total
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stage_widths.len() != self.stage_depths.len() {
            return Err(ModelError::BadConfig(format!(
                "widths ({}) and depths ({}) differ in length",
                self.stage_widths.len(),
                self.stage_depths.len()
            )));
        }
        if self.stage_widths.is_empty() {
            return Err(ModelError::BadConfig("no stages".into()));
        }
        if self.ds_heads > self.stages().saturating_sub(1).max(1) {
            return Err(ModelError::BadConfig(format!(
                "ds_heads {} exceeds decoder stages {}",
                self.ds_heads,
                self.stages() - 1
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(ModelError::BadConfig("conv kernel must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    dw: ConvIds,
    norm: NormIds,
    expand: ConvIds,
    grn: NormIds,
    project: ConvIds,
}

#[derive(Debug, Clone, Copy)]
struct ResizeIds {
    norm: NormIds,
    conv: ConvIds,
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    norm: NormIds,
    block: BlockIds,
    classifier: ConvIds,
}

#[derive(Debug, Clone)]
struct Layout {
    stem_conv: ConvIds,
    stem_norm: NormIds,
    encoder: Vec<Vec<BlockIds>>,
    downs: Vec<ResizeIds>,
    ups: Vec<ResizeIds>,
    decoder: Vec<Vec<BlockIds>>,
    /// Indexed by decoder stage, coarsest first.
    heads: Vec<HeadIds>,
}

pub struct SparseUNet<F: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    layout: Layout,
    norm_eps: F,
}

/// One deep-supervision head output: post-sigmoid probabilities on the
/// coordinate set of the given stride. `heads[i]` in [`ForwardOutput`] lives
/// at stride `2^i` (finest first), matching the 1/2^i supervision weights.
pub struct HeadOutput {
    pub var: VarId,
    pub level: Arc<CoordSet>,
    pub stride: [u32; 3],
}

pub struct ForwardOutput<F: Scalar> {
    pub tape: Tape<F>,
    pub heads: Vec<HeadOutput>,
}

fn trunc_normal<F: Scalar>(rng: &mut ChaCha12Rng, shape: (usize, usize), std: f64) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn(shape, |_| {
        loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                return F::from_f64_(v);
            }
        }
    })
}

const INIT_STD: f64 = 0.02;

impl<F: Scalar> SparseUNet<F> {
    /// Builds the network with truncated-normal (std 0.02, clipped at ±2σ)
    /// conv/linear weights, unit norm scales, and zero biases. GRN affines
    /// start at zero so each block begins as an identity map.
    pub fn build(cfg: ModelConfig, rng_seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
        let mut store = ParamStore::new();
        let k3 = cfg.conv_kernel.pow(3);
        let dk3 = cfg.down_kernel.pow(3);

        let norm = |store: &mut ParamStore<F>, name: &str, c: usize| NormIds {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, c))),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, c))),
        };
        let grn = |store: &mut ParamStore<F>, name: &str, c: usize| NormIds {
            gamma: store.add(format!("{name}.gamma"), Array2::zeros((1, c))),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, c))),
        };

        let block = |store: &mut ParamStore<F>, rng: &mut ChaCha12Rng, name: &str, c: usize| {
            let dw = ConvIds {
                weight: store.add(format!("{name}.dw.weight"), trunc_normal(rng, (k3, c), INIT_STD)),
                bias: Some(store.add(format!("{name}.dw.bias"), Array2::zeros((1, c)))),
            };
            let n = norm(store, &format!("{name}.norm"), c);
            let e = cfg.mlp_expansion * c;
            let expand = ConvIds {
                weight: store.add(
                    format!("{name}.expand.weight"),
                    trunc_normal(rng, (c, e), INIT_STD),
                ),
                bias: Some(store.add(format!("{name}.expand.bias"), Array2::zeros((1, e)))),
            };
            let g = grn(store, &format!("{name}.grn"), e);
            let project = ConvIds {
                weight: store.add(
                    format!("{name}.project.weight"),
                    trunc_normal(rng, (e, c), INIT_STD),
                ),
                bias: Some(store.add(format!("{name}.project.bias"), Array2::zeros((1, c)))),
            };
            BlockIds {
                dw,
                norm: n,
                expand,
                grn: g,
                project,
            }
        };

        let w0 = cfg.stage_widths[0];
        let stem_conv = ConvIds {
            weight: store.add(
                "stem.conv.weight",
                trunc_normal(&mut rng, (cfg.in_channels, w0), INIT_STD),
            ),
            bias: None,
        };
        let stem_norm = norm(&mut store, "stem.norm", w0);

        let s_count = cfg.stages();
        let mut encoder = Vec::new();
        let mut downs = Vec::new();
        for s in 0..s_count {
            let c = cfg.stage_widths[s];
            let blocks = (0..cfg.stage_depths[s])
                .map(|i| block(&mut store, &mut rng, &format!("enc{s}.block{i}"), c))
                .collect();
            encoder.push(blocks);
            if s + 1 < s_count {
                let c_next = cfg.stage_widths[s + 1];
                let n = norm(&mut store, &format!("down{s}.norm"), c);
                let conv = ConvIds {
                    weight: store.add(
                        format!("down{s}.conv.weight"),
                        trunc_normal(&mut rng, (dk3 * c, c_next), INIT_STD),
                    ),
                    bias: Some(store.add(format!("down{s}.conv.bias"), Array2::zeros((1, c_next)))),
                };
                downs.push(ResizeIds { norm: n, conv });
            }
        }

        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        let mut heads = Vec::new();
        for d in 0..s_count - 1 {
            let c_coarse = cfg.stage_widths[s_count - 1 - d];
            let c_fine = cfg.stage_widths[s_count - 2 - d];
            let n = norm(&mut store, &format!("up{d}.norm"), c_coarse);
            // transposed layout: (K^3 * c_out, c_in)
            let conv = ConvIds {
                weight: store.add(
                    format!("up{d}.conv.weight"),
                    trunc_normal(&mut rng, (dk3 * c_fine, c_coarse), INIT_STD),
                ),
                bias: Some(store.add(format!("up{d}.conv.bias"), Array2::zeros((1, c_fine)))),
            };
            ups.push(ResizeIds { norm: n, conv });
            let blocks = (0..cfg.decoder_blocks_per_stage)
                .map(|i| block(&mut store, &mut rng, &format!("dec{d}.block{i}"), c_fine))
                .collect();
            decoder.push(blocks);
            let hn = norm(&mut store, &format!("head{d}.norm"), c_fine);
            let hb = block(&mut store, &mut rng, &format!("head{d}.block"), c_fine);
            let classifier = ConvIds {
                weight: store.add(
                    format!("head{d}.classifier.weight"),
                    trunc_normal(&mut rng, (c_fine, cfg.num_classes), INIT_STD),
                ),
                bias: None,
            };
            heads.push(HeadIds {
                norm: hn,
                block: hb,
                classifier,
            });
        }

        Ok(SparseUNet {
            cfg,
            store,
            layout: Layout {
                stem_conv,
                stem_norm,
                encoder,
                downs,
                ups,
                decoder,
                heads,
            },
            norm_eps: F::from_f64_(1e-6),
        })
    }

    /// Exact count of independent scalar parameters.
    pub fn count_params(&self) -> usize {
        self.store.scalar_count()
    }

    fn block_forward(
        &self,
        tape: &mut Tape<F>,
        x: VarId,
        ids: &BlockIds,
        map: &Arc<crate::sparse::KernelMap>,
        segments: &[Range<usize>],
    ) -> Result<VarId, TapeError> {
        let store = &self.store;
        let k = [self.cfg.conv_kernel; 3];
        let h = ops::depthwise_conv(tape, store, x, ids.dw, k, map.clone())?;
        let h = ops::layer_norm_op(tape, store, h, ids.norm.gamma, ids.norm.beta, self.norm_eps)?;
        let h = ops::linear_op(tape, store, h, ids.expand)?;
        let h = ops::gelu_op(tape, h);
        let h = ops::grn_op(
            tape,
            store,
            h,
            ids.grn.gamma,
            ids.grn.beta,
            self.norm_eps,
            segments.to_vec(),
        )?;
        let h = ops::linear_op(tape, store, h, ids.project)?;
        Ok(ops::add_op(tape, x, h))
    }

    /// Full multi-head forward pass. Registers the stride pyramid as it
    /// goes; the decoder reuses the encoder's levels so the summation skips
    /// are defined row-for-row. Returns the `ds_heads` finest heads,
    /// `heads[i]` at stride `2^i`.
    pub fn forward(
        &self,
        st: &SparseTensor<F>,
        pyramid: &mut CoordinatePyramid,
        recording: bool,
    ) -> Result<ForwardOutput<F>, ModelError> {
        if st.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if st.channels() != self.cfg.in_channels {
            return Err(ModelError::Tape(TapeError::ChannelMismatch {
                expected: self.cfg.in_channels,
                got: st.channels(),
            }));
        }
        let s_count = self.cfg.stages();
        let f = self.cfg.down_stride as u32;
        let kernel = [self.cfg.conv_kernel; 3];
        let down_kernel = [self.cfg.down_kernel; 3];

        let mut tape = Tape::new(recording);
        let mut x = tape.leaf(st.feats.clone());

        // stride per stage; coarser levels are registered as the encoder runs
        let mut strides = Vec::with_capacity(s_count);
        let mut stride = st.stride;
        pyramid.register(st.level.coords.clone(), stride)?;
        for _ in 0..s_count {
            strides.push(stride);
            stride = [stride[0] * f, stride[1] * f, stride[2] * f];
        }
        let mut levels: Vec<Arc<CoordSet>> = Vec::with_capacity(s_count);
        let mut segments: Vec<Vec<Range<usize>>> = Vec::with_capacity(s_count);

        // stem
        x = ops::linear_op(&mut tape, &self.store, x, self.layout.stem_conv)?;
        x = ops::layer_norm_op(
            &mut tape,
            &self.store,
            x,
            self.layout.stem_norm.gamma,
            self.layout.stem_norm.beta,
            self.norm_eps,
        )?;

        // encoder
        let mut enc_out: Vec<VarId> = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let level = pyramid.lookup(strides[s])?;
            segments.push(batch_segments(&level));
            levels.push(level);
            let map = pyramid.submanifold_map(strides[s], kernel)?;
            for ids in &self.layout.encoder[s] {
                x = self.block_forward(&mut tape, x, ids, &map, &segments[s])?;
            }
            enc_out.push(x);
            if s + 1 < s_count {
                let down = &self.layout.downs[s];
                x = ops::layer_norm_op(
                    &mut tape,
                    &self.store,
                    x,
                    down.norm.gamma,
                    down.norm.beta,
                    self.norm_eps,
                )?;
                pyramid.downsample(strides[s], [f, f, f])?;
                let smap = pyramid.strided_map(strides[s], down_kernel, [f, f, f])?;
                x = ops::strided_conv(&mut tape, &self.store, x, down.conv, down_kernel, smap)?;
            }
        }

        // decoder, coarsest stage first
        let mut heads: Vec<HeadOutput> = Vec::new();
        for d in 0..s_count - 1 {
            let fine_stage = s_count - 2 - d;
            let up = &self.layout.ups[d];
            x = ops::layer_norm_op(
                &mut tape,
                &self.store,
                x,
                up.norm.gamma,
                up.norm.beta,
                self.norm_eps,
            )?;
            let fwd_map = pyramid.strided_map(strides[fine_stage], down_kernel, [f, f, f])?;
            x = ops::transposed_conv(&mut tape, &self.store, x, up.conv, down_kernel, &fwd_map)?;
            x = ops::add_op(&mut tape, x, enc_out[fine_stage]);
            let map = pyramid.submanifold_map(strides[fine_stage], kernel)?;
            for ids in &self.layout.decoder[d] {
                x = self.block_forward(&mut tape, x, ids, &map, &segments[fine_stage])?;
            }
            // classification head at this resolution; only the finest
            // ds_heads enter the loss, so skip the rest of the compute
            if fine_stage < self.cfg.ds_heads {
                let h = &self.layout.heads[d];
                let mut y = ops::layer_norm_op(
                    &mut tape,
                    &self.store,
                    x,
                    h.norm.gamma,
                    h.norm.beta,
                    self.norm_eps,
                )?;
                y = self.block_forward(&mut tape, y, &h.block, &map, &segments[fine_stage])?;
                y = ops::linear_op(&mut tape, &self.store, y, h.classifier)?;
                y = ops::sigmoid_op(&mut tape, y);
                heads.push(HeadOutput {
                    var: y,
                    level: levels[fine_stage].clone(),
                    stride: strides[fine_stage],
                });
            }
        }
        heads.reverse(); // finest first: heads[i] at stride 2^i
        Ok(ForwardOutput { tape, heads })
    }
}

/// Contiguous row range per batch item (rows are batch-major in canonical
/// order).
pub fn batch_segments(level: &CoordSet) -> Vec<Range<usize>> {
    let mut segs = Vec::new();
    let mut start = 0usize;
    for i in 1..=level.len() {
        if i == level.len() || level.coords[i][0] != level.coords[start][0] {
            segs.push(start..i);
            start = i;
        }
    }
    segs
}

// ---------------------------------------------------------------------------
// checkpoint I/O: `<name>.ckpt.json` manifest + `<name>.ckpt.bin` payload
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    dtype: String,
    tensors: Vec<TensorEntry>,
    checksum: String,
}

fn ckpt_paths(path: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let base = path.to_string_lossy();
    let base = base
        .strip_suffix(".ckpt.json")
        .or_else(|| base.strip_suffix(".ckpt.bin"))
        .or_else(|| base.strip_suffix(".ckpt"))
        .unwrap_or(&base)
        .to_string();
    (
        std::path::PathBuf::from(format!("{base}.ckpt.json")),
        std::path::PathBuf::from(format!("{base}.ckpt.bin")),
    )
}

pub fn save_checkpoint<F: Scalar>(model: &SparseUNet<F>, path: &Path) -> Result<(), ModelError> {
    let (json_path, bin_path) = ckpt_paths(path);
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for id in model.store.ids() {
        let v = model.store.value(id);
        tensors.push(TensorEntry {
            name: model.store.name(id).to_string(),
            rows: v.nrows(),
            cols: v.ncols(),
            offset: payload.len(),
        });
        for &x in v.iter() {
            let mut buf = [0u8; 4];
            LittleEndian::write_f32(&mut buf, x.to_f64_() as f32);
            payload.extend_from_slice(&buf);
        }
    }
    let checksum = hex::encode(Sha256::digest(&payload));
    let manifest = Manifest {
        config: model.cfg.clone(),
        dtype: "f32".into(),
        tensors,
        checksum,
    };
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| ModelError::Io {
        path: json_path.display().to_string(),
        source: e,
    })?;
    fs::write(&bin_path, &payload).map_err(|e| ModelError::Io {
        path: bin_path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<SparseUNet<F>, ModelError> {
    let (json_path, _) = ckpt_paths(path);
    let json = fs::read_to_string(&json_path).map_err(|e| ModelError::Io {
        path: json_path.display().to_string(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| ModelError::BadManifest(e.to_string()))?;
    let cfg = manifest.config.clone();
    load_checkpoint_with_config(path, cfg)
}

/// Loads weights into a model built from `cfg`; tensor shapes are matched by
/// name and the first mismatch is reported.
pub fn load_checkpoint_with_config<F: Scalar>(
    path: &Path,
    cfg: ModelConfig,
) -> Result<SparseUNet<F>, ModelError> {
    let (json_path, bin_path) = ckpt_paths(path);
    let json = fs::read_to_string(&json_path).map_err(|e| ModelError::Io {
        path: json_path.display().to_string(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| ModelError::BadManifest(e.to_string()))?;
    let payload = fs::read(&bin_path).map_err(|e| ModelError::Io {
        path: bin_path.display().to_string(),
        source: e,
    })?;
    let actual = hex::encode(Sha256::digest(&payload));
    if actual != manifest.checksum {
        return Err(ModelError::Checksum {
            expected: manifest.checksum,
            actual,
        });
    }
    let mut model = SparseUNet::<F>::build(cfg, 0)?;
    let by_name: std::collections::HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let expected = model.store.value(id).dim();
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
        if (entry.rows, entry.cols) != expected {
            return Err(ModelError::ShapeMismatch {
                name,
                got: (entry.rows, entry.cols),
                expected,
            });
        }
        let n = entry.rows * entry.cols;
        if entry.offset + 4 * n > payload.len() {
            return Err(ModelError::BadManifest(format!(
                "tensor {name} runs past payload end"
            )));
        }
        let mut vals = vec![0f32; n];
        LittleEndian::read_f32_into(&payload[entry.offset..entry.offset + 4 * n], &mut vals);
        let arr = Array2::from_shape_vec((entry.rows, entry.cols), vals)
            .expect("shape checked above")
            .mapv(|v| F::from_f64_(v as f64));
        *model.store.value_mut(id) = arr;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    /// Closed-form layer-by-layer parameter count, written independently of
    /// the builder.
    fn analytic_count(cfg: &ModelConfig) -> usize {
        let k3 = cfg.conv_kernel.pow(3);
        let dk3 = cfg.down_kernel.pow(3);
        let block = |c: usize| {
            let e = cfg.mlp_expansion * c;
            (k3 * c + c) + 2 * c + (c * e + e) + 2 * e + (e * c + c)
        };
        let w = &cfg.stage_widths;
        let s = w.len();
        // stem: pointwise conv (no bias) + layer norm
        let mut total = cfg.in_channels * w[0] + 2 * w[0];
        for i in 0..s {
            total += cfg.stage_depths[i] * block(w[i]);
        }
        for i in 0..s - 1 {
            total += 2 * w[i] + (dk3 * w[i] * w[i + 1] + w[i + 1]); // norm + down conv
            total += 2 * w[i + 1] + (dk3 * w[i] * w[i + 1] + w[i]); // norm + up conv
            total += cfg.decoder_blocks_per_stage * block(w[i]);
            total += 2 * w[i] + block(w[i]) + w[i] * cfg.num_classes; // head, no bias
        }
        total
    }

    #[test]
    fn default_config_parameter_count() {
        let model = SparseUNet::<f32>::build(ModelConfig::default(), 0).unwrap();
        assert_eq!(model.count_params(), 27_473_696);
        assert_eq!(ModelConfig::default().param_count(), 27_473_696);
    }

    #[test]
    fn analytic_count_matches_builder() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig::tiny(),
            ModelConfig {
                stage_widths: vec![2, 4],
                stage_depths: vec![1, 1],
                decoder_blocks_per_stage: 1,
                ds_heads: 1,
                ..Default::default()
            },
            ModelConfig {
                stage_widths: vec![4, 8, 16],
                stage_depths: vec![2, 1, 3],
                decoder_blocks_per_stage: 2,
                ds_heads: 2,
                ..Default::default()
            },
        ] {
            let model = SparseUNet::<f32>::build(cfg.clone(), 1).unwrap();
            assert_eq!(model.count_params(), analytic_count(&cfg), "{cfg:?}");
            assert_eq!(cfg.param_count(), analytic_count(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn zero_depth_config_counts_stem_plus_heads() {
        let cfg = ModelConfig {
            stage_widths: vec![16],
            stage_depths: vec![0],
            ds_heads: 0,
            ..Default::default()
        };
        let model = SparseUNet::<f32>::build(cfg, 0).unwrap();
        // stem only: 1*16 pointwise (no bias) + 2*16 norm affine
        assert_eq!(model.count_params(), 16 + 32);
    }

    #[test]
    fn same_seed_same_params() {
        let a = SparseUNet::<f32>::build(ModelConfig::tiny(), 42).unwrap();
        let b = SparseUNet::<f32>::build(ModelConfig::tiny(), 42).unwrap();
        for (ia, ib) in a.store.ids().zip(b.store.ids()) {
            assert_eq!(a.store.value(ia), b.store.value(ib));
        }
        let c = SparseUNet::<f32>::build(ModelConfig::tiny(), 43).unwrap();
        let differs = a
            .store
            .ids()
            .zip(c.store.ids())
            .any(|(ia, ic)| a.store.value(ia) != c.store.value(ic));
        assert!(differs);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig {
            stage_widths: vec![8, 16],
            stage_depths: vec![1],
            ..Default::default()
        };
        assert!(matches!(
            SparseUNet::<f32>::build(cfg, 0),
            Err(ModelError::BadConfig(_))
        ));
    }

    fn demo_input(
        pyramid: &mut CoordinatePyramid,
    ) -> SparseTensor<f32> {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let coords: Vec<crate::sparse::Coord> = (0..50)
            .map(|_| {
                [
                    0,
                    rng.gen_range(0..12),
                    rng.gen_range(0..12),
                    rng.gen_range(0..12),
                ]
            })
            .collect();
        let level = pyramid.register(coords, [1, 1, 1]).unwrap();
        let feats = Array2::from_shape_fn((level.len(), 1), |_| rng.gen_range(-1.0f32..1.0));
        SparseTensor {
            level,
            stride: [1, 1, 1],
            feats,
        }
    }

    #[test]
    fn forward_head_contract() {
        let model = SparseUNet::<f32>::build(ModelConfig::tiny(), 3).unwrap();
        let mut pyramid = CoordinatePyramid::new();
        let st = demo_input(&mut pyramid);
        let out = model.forward(&st, &mut pyramid, false).unwrap();
        assert_eq!(out.heads.len(), 1);
        // finest head lives on the input coordinate set
        assert_eq!(out.heads[0].level.coords, st.level.coords);
        assert_eq!(out.heads[0].stride, [1, 1, 1]);
        let probs = out.tape.value(out.heads[0].var);
        assert_eq!(probs.ncols(), 3);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn forward_deterministic_replay() {
        let model = SparseUNet::<f32>::build(ModelConfig::tiny(), 3).unwrap();
        let mut p1 = CoordinatePyramid::new();
        let st1 = demo_input(&mut p1);
        let o1 = model.forward(&st1, &mut p1, false).unwrap();
        let mut p2 = CoordinatePyramid::new();
        let st2 = demo_input(&mut p2);
        let o2 = model.forward(&st2, &mut p2, false).unwrap();
        assert_eq!(o1.tape.value(o1.heads[0].var), o2.tape.value(o2.heads[0].var));
    }

    #[test]
    fn forward_rejects_empty_input() {
        let model = SparseUNet::<f32>::build(ModelConfig::tiny(), 3).unwrap();
        let mut pyramid = CoordinatePyramid::new();
        let level = pyramid.register(vec![], [1, 1, 1]).unwrap();
        let st = SparseTensor {
            level,
            stride: [1, 1, 1],
            feats: Array2::zeros((0, 1)),
        };
        assert!(matches!(
            model.forward(&st, &mut pyramid, false),
            Err(ModelError::EmptyInput)
        ));
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = SparseUNet::<f32>::build(ModelConfig::tiny(), 9).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        let mut p1 = CoordinatePyramid::new();
        let st1 = demo_input(&mut p1);
        let o1 = model.forward(&st1, &mut p1, false).unwrap();
        let mut p2 = CoordinatePyramid::new();
        let st2 = demo_input(&mut p2);
        let o2 = loaded.forward(&st2, &mut p2, false).unwrap();
        assert_eq!(o1.tape.value(o1.heads[0].var), o2.tape.value(o2.heads[0].var));
    }

    #[test]
    fn checkpoint_truncation_fails_checksum() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = SparseUNet::<f32>::build(ModelConfig::tiny(), 9).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bin = dir.path().join("m.ckpt.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(ModelError::Checksum { .. })
        ));
    }

    #[test]
    fn cross_config_load_names_offender() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = SparseUNet::<f32>::build(ModelConfig::tiny(), 9).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let other = ModelConfig {
            stage_widths: vec![4, 16],
            stage_depths: vec![1, 1],
            decoder_blocks_per_stage: 1,
            ds_heads: 1,
            ..Default::default()
        };
        match load_checkpoint_with_config::<f32>(&path, other) {
            Err(ModelError::ShapeMismatch { name, .. }) => {
                assert_eq!(name, "stem.conv.weight");
            }
            other => panic!("expected shape mismatch, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn batch_segments_split_on_batch_index() {
        let set = CoordSet::from_coords(vec![
            [0, 0, 0, 0],
            [0, 1, 0, 0],
            [1, 0, 0, 0],
            [2, 0, 0, 0],
        ]);
        assert_eq!(batch_segments(&set), vec![0..2, 2..3, 3..4]);
    }
}
