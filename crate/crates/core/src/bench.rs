//! Sparse-vs-dense forward benchmark harness. Both arms run the same
//! convolution stack with identical weights: a pointwise stem, `layers`
//! submanifold 3×3×3 convolutions, and one stride-2 downsampling convolution.
//! The sparse arm runs over kernel maps on the active set; the dense arm runs
//! the full-grid reference convolutions with inactive voxels zero-filled.

use std::time::Instant;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::memtrack;
use crate::nn::dense::{dense_strided_conv, dense_subm_conv};
use crate::nn::ops::{conv_forward, ConvParams};
use crate::sparse::{
    build_strided_map, build_submanifold_map, downsample_coords, Coord, CoordSet, DenseVolume,
};
use crate::Scalar;

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    /// Cube edge length in voxels.
    pub size: usize,
    /// Target active fraction, e.g. 0.1 for 10%.
    pub occupancy: f64,
    pub batch: usize,
    pub channels: usize,
    /// Number of submanifold conv layers before the strided one.
    pub layers: usize,
    /// Timed repetitions (after warmup).
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Arms predicted to need more than this many bytes report OOM instead
    /// of allocating.
    pub mem_limit_bytes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            size: 128,
            occupancy: 0.1,
            batch: 1,
            channels: 8,
            layers: 2,
            reps: 5,
            warmup: 1,
            seed: 0,
            mem_limit_bytes: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmStats {
    pub mode: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub peak_bytes: usize,
    pub oom: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub active_voxels: usize,
    pub arms: Vec<ArmStats>,
}

impl BenchReport {
    pub fn arm(&self, mode: &str) -> Option<&ArmStats> {
        self.arms.iter().find(|a| a.mode == mode)
    }
}

/// Union of seeded random ellipsoids, trimmed so the active fraction equals
/// `round(occupancy · size³)` voxels exactly (never above the target).
pub fn random_blob_mask(size: usize, occupancy: f64, seed: u64) -> Vec<bool> {
    let n = size * size * size;
    let target = ((occupancy * n as f64).round() as usize).min(n);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut mask = vec![false; n];
    let mut count = 0usize;
    let mut order: Vec<usize> = Vec::new(); // activation order, for exact trimming
    while count < target {
        let c = [
            rng.gen_range(0.0..size as f64),
            rng.gen_range(0.0..size as f64),
            rng.gen_range(0.0..size as f64),
        ];
        let a = [
            rng.gen_range(size as f64 / 32.0..size as f64 / 8.0),
            rng.gen_range(size as f64 / 32.0..size as f64 / 8.0),
            rng.gen_range(size as f64 / 32.0..size as f64 / 8.0),
        ];
        let lo = |i: usize| (c[i] - a[i]).floor().max(0.0) as usize;
        let hi = |i: usize| ((c[i] + a[i]).ceil() as usize).min(size - 1);
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    let d2 = ((x as f64 - c[0]) / a[0]).powi(2)
                        + ((y as f64 - c[1]) / a[1]).powi(2)
                        + ((z as f64 - c[2]) / a[2]).powi(2);
                    let li = x + size * (y + size * z);
                    if d2 <= 1.0 && !mask[li] {
                        mask[li] = true;
                        order.push(li);
                        count += 1;
                    }
                }
            }
        }
    }
    while count > target {
        mask[order.pop().expect("count tracks order")] = false;
        count -= 1;
    }
    mask
}

struct Workload<F: Scalar> {
    stem: ConvParams<F>,
    convs: Vec<ConvParams<F>>,
    down: ConvParams<F>,
}

fn make_workload<F: Scalar>(cfg: &BenchConfig) -> Workload<F> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let c = cfg.channels;
    let mut rand_w = |rows: usize, cols: usize| {
        Array2::from_shape_fn((rows, cols), |_| F::from_f64_(rng.gen_range(-0.5..0.5)))
    };
    Workload {
        stem: ConvParams {
            kernel: [1, 1, 1],
            weight: rand_w(1, c),
            bias: Some(rand_w(1, c)),
        },
        convs: (0..cfg.layers)
            .map(|_| ConvParams {
                kernel: [3, 3, 3],
                weight: rand_w(27 * c, c),
                bias: Some(rand_w(1, c)),
            })
            .collect(),
        down: ConvParams {
            kernel: [2, 2, 2],
            weight: rand_w(8 * c, 2 * c),
            bias: Some(rand_w(1, 2 * c)),
        },
    }
}

fn mask_coords(mask: &[bool], size: usize, batch: usize) -> Vec<Coord> {
    let mut coords = Vec::new();
    for b in 0..batch as i32 {
        let mut li = 0usize;
        for z in 0..size {
            for y in 0..size {
                for x in 0..size {
                    if mask[li] {
                        coords.push([b, x as i32, y as i32, z as i32]);
                    }
                    li += 1;
                }
            }
        }
    }
    coords
}

fn input_features<F: Scalar>(n: usize, seed: u64) -> Array2<F> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xfeed);
    Array2::from_shape_fn((n, 1), |_| F::from_f64_(rng.gen_range(-1.0..1.0)))
}

fn track<F: Scalar>(a: &Array2<F>) -> usize {
    let b = a.len() * std::mem::size_of::<F>();
    memtrack::on_alloc(b);
    b
}

fn sparse_pass<F: Scalar>(
    x0: &Array2<F>,
    w: &Workload<F>,
    maps: &SparseMaps,
) -> Array2<F> {
    let mut tracked = 0usize;
    let mut x = x0.dot(&w.stem.weight) + &w.stem.bias.as_ref().expect("stem bias").row(0);
    tracked += track(&x);
    for p in &w.convs {
        x = conv_forward(&x, p, &maps.subm, false).expect("channels match");
        tracked += track(&x);
    }
    let out = conv_forward(&x, &w.down, &maps.strided, false).expect("channels match");
    tracked += track(&out);
    memtrack::on_free(tracked);
    out
}

struct SparseMaps {
    subm: crate::sparse::KernelMap,
    strided: crate::sparse::KernelMap,
}

fn build_maps(coords: &[Coord]) -> SparseMaps {
    let fine = CoordSet::from_coords(coords.to_vec());
    let coarse = CoordSet::from_coords(downsample_coords(&fine.coords, [1, 1, 1], [2, 2, 2]));
    SparseMaps {
        subm: build_submanifold_map(&fine, [1, 1, 1], [3, 3, 3]),
        strided: build_strided_map(&fine, &coarse, [1, 1, 1], [2, 2, 2])
            .expect("aligned coarse set"),
    }
}

fn dense_pass<F: Scalar>(vol: &DenseVolume<F>, w: &Workload<F>) -> DenseVolume<F> {
    // pointwise stem, same-size
    let c = w.stem.weight.ncols();
    let mut stemmed = DenseVolume::filled(vol.dims, c, F::zero());
    memtrack::on_alloc(stemmed.bytes());
    let nvox = vol.dims[0] * vol.dims[1] * vol.dims[2];
    let bias = w.stem.bias.as_ref().expect("stem bias");
    for co in 0..c {
        let wv = w.stem.weight[[0, co]];
        let b = bias[[0, co]];
        for i in 0..nvox {
            stemmed.data[co * nvox + i] = vol.data[i] * wv + b;
        }
    }
    let mut cur = stemmed;
    let mut freed = cur.bytes();
    for p in &w.convs {
        let next = dense_subm_conv(&cur, p);
        memtrack::on_alloc(next.bytes());
        freed += next.bytes();
        cur = next;
    }
    let out = dense_strided_conv(&cur, &w.down, [2, 2, 2]);
    memtrack::on_alloc(out.bytes());
    freed += out.bytes();
    memtrack::on_free(freed);
    out
}

fn time_reps(cfg: &BenchConfig, mut f: impl FnMut()) -> (f64, f64, usize) {
    for _ in 0..cfg.warmup {
        f();
    }
    memtrack::reset_peak();
    let mut times = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t0 = Instant::now();
        f();
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
    (mean, var.sqrt(), memtrack::peak_bytes())
}

/// Runs all three arms: `sparse` (prebuilt kernel maps), `sparse+map`
/// (map construction inside the timed region), and `dense`.
pub fn run_bench<F: Scalar>(cfg: &BenchConfig) -> BenchReport {
    let mask = random_blob_mask(cfg.size, cfg.occupancy, cfg.seed);
    let coords = mask_coords(&mask, cfg.size, cfg.batch);
    let active = coords.len();
    let w = make_workload::<F>(cfg);
    let mut arms = Vec::new();

    let set = CoordSet::from_coords(coords.clone());
    let x0 = input_features::<F>(set.len(), cfg.seed);
    let sparse_bytes_est = active * (1 + cfg.channels * (cfg.layers + 3)) * std::mem::size_of::<F>();
    if sparse_bytes_est > cfg.mem_limit_bytes {
        arms.push(ArmStats {
            mode: "sparse".into(),
            mean_ms: 0.0,
            std_ms: 0.0,
            peak_bytes: 0,
            oom: true,
        });
        arms.push(ArmStats {
            mode: "sparse+map".into(),
            mean_ms: 0.0,
            std_ms: 0.0,
            peak_bytes: 0,
            oom: true,
        });
    } else {
        let maps = build_maps(&set.coords);
        let (mean, std, peak) = time_reps(cfg, || {
            let out = sparse_pass(&x0, &w, &maps);
            std::hint::black_box(&out);
        });
        arms.push(ArmStats {
            mode: "sparse".into(),
            mean_ms: mean,
            std_ms: std,
            peak_bytes: peak,
            oom: false,
        });
        let (mean, std, peak) = time_reps(cfg, || {
            let maps = build_maps(&set.coords);
            let out = sparse_pass(&x0, &w, &maps);
            std::hint::black_box(&out);
        });
        arms.push(ArmStats {
            mode: "sparse+map".into(),
            mean_ms: mean,
            std_ms: std,
            peak_bytes: peak,
            oom: false,
        });
    }

    // dense arm works per batch item on the full grid
    let nvox = cfg.size * cfg.size * cfg.size;
    let dense_bytes_est = nvox
        * (1 + cfg.channels * (cfg.layers + 1) + 2 * cfg.channels / 8)
        * std::mem::size_of::<F>()
        * cfg.batch;
    if dense_bytes_est > cfg.mem_limit_bytes {
        arms.push(ArmStats {
            mode: "dense".into(),
            mean_ms: 0.0,
            std_ms: 0.0,
            peak_bytes: 0,
            oom: true,
        });
    } else {
        let mut vol = DenseVolume::filled([cfg.size; 3], 1, F::zero());
        for (row, c) in set.coords.iter().enumerate() {
            if c[0] == 0 {
                let i = vol.idx(0, c[1] as usize, c[2] as usize, c[3] as usize);
                vol.data[i] = x0[[row, 0]];
            }
        }
        let (mean, std, peak) = time_reps(cfg, || {
            memtrack::on_alloc(vol.bytes());
            for _ in 0..cfg.batch {
                let out = dense_pass(&vol, &w);
                std::hint::black_box(&out);
            }
            memtrack::on_free(vol.bytes());
        });
        arms.push(ArmStats {
            mode: "dense".into(),
            mean_ms: mean,
            std_ms: std,
            peak_bytes: peak,
            oom: false,
        });
    }

    BenchReport {
        config: cfg.clone(),
        active_voxels: active,
        arms,
    }
}

fn fmt_arm_fields(a: &ArmStats) -> (String, String, String) {
    if a.oom {
        ("OOM".into(), "OOM".into(), "OOM".into())
    } else {
        (
            format!("{:.3}", a.mean_ms),
            format!("{:.3}", a.std_ms),
            a.peak_bytes.to_string(),
        )
    }
}

pub fn emit_csv(report: &BenchReport) -> String {
    let mut out =
        String::from("mode,size,occupancy,batch,active_voxels,mean_ms,std_ms,peak_bytes\n");
    for a in &report.arms {
        let (mean, std, peak) = fmt_arm_fields(a);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.mode,
            report.config.size,
            report.config.occupancy,
            report.config.batch,
            report.active_voxels,
            mean,
            std,
            peak
        ));
    }
    out
}

pub fn emit_markdown(report: &BenchReport) -> String {
    let mut out = String::from(
        "| mode | size | occupancy | batch | active | mean ms | std ms | peak bytes |\n\
         |------|------|-----------|-------|--------|---------|--------|------------|\n",
    );
    for a in &report.arms {
        let (mean, std, peak) = fmt_arm_fields(a);
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            a.mode,
            report.config.size,
            report.config.occupancy,
            report.config.batch,
            report.active_voxels,
            mean,
            std,
            peak
        ));
    }
    out
}
