//! CLI-level acceptance checks:
//! 1: the parameter-count command reports the reference model size quickly
//! 8: two deterministic segmentation runs produce byte-identical output

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use sparseseg_core::model::{save_checkpoint, ModelConfig, SparseUNet};
use sparseseg_core::volume::{store_volume, GridKind, ResampleMode, VoxelGrid};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparseseg"))
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sparseseg-accept-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn acceptance_1_param_count() {
    let start = Instant::now();
    let out = bin().arg("param-count").output().unwrap();
    let elapsed = start.elapsed();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.trim(), "27473696", "unexpected output: {stdout}");
    assert!(
        elapsed.as_secs_f64() < 1.0,
        "param-count took {:?}, budget is 1 s",
        elapsed
    );
    println!(
        "ACCEPTANCE 1 parameter count 27473696 in {:.0} ms: PASS",
        elapsed.as_secs_f64() * 1000.0
    );
}

fn phantom_image(n: usize, seed: u64) -> VoxelGrid {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let c = n as f64 / 2.0;
    let a = n as f64 / 4.0;
    let mut img = vec![-1000.0f32; n * n * n];
    let mut li = 0;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let d2 = ((x as f64 - c) / a).powi(2)
                    + ((y as f64 - c) / a).powi(2)
                    + ((z as f64 - c) / a).powi(2);
                if d2 <= 1.0 {
                    img[li] = 100.0 + rng.gen_range(-20.0..20.0);
                }
                li += 1;
            }
        }
    }
    VoxelGrid::new([n; 3], [1.0; 3], [0.0; 3], GridKind::IntensityHu, img).unwrap()
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("reading {}: {e}", p.display()))
}

#[test]
fn acceptance_8_deterministic_segmentation() {
    let dir = scratch("det");
    let cfg = ModelConfig {
        stage_widths: vec![4, 8],
        stage_depths: vec![1, 1],
        decoder_blocks_per_stage: 1,
        ds_heads: 1,
        ..Default::default()
    };
    let model = SparseUNet::<f32>::build(cfg, 8).unwrap();
    let ckpt = dir.join("model");
    save_checkpoint(&model, &ckpt).unwrap();

    let high = phantom_image(24, 80);
    let low = high.resample([2.0; 3], ResampleMode::Trilinear).unwrap();
    let high_p = dir.join("high.rvol");
    let low_p = dir.join("low.rvol");
    store_volume(&high, &high_p).unwrap();
    store_volume(&low, &low_p).unwrap();

    let roi_p = dir.join("roi.json");
    run_ok(
        bin()
            .args(["roi", "--model"])
            .arg(&ckpt)
            .arg("--in")
            .arg(&low_p)
            .arg("--out")
            .arg(&roi_p)
            .args(["--window", "0,200", "--dilate", "3", "--min-size", "1"]),
    );

    let seg = |out: &Path| {
        run_ok(
            bin()
                .args(["segment", "--model"])
                .arg(&ckpt)
                .arg("--in")
                .arg(&high_p)
                .arg("--roi")
                .arg(&roi_p)
                .arg("--out")
                .arg(out)
                .args(["--window", "0,200", "--deterministic", "--seed", "7"]),
        )
    };
    let out1 = dir.join("seg1.rvol");
    let out2 = dir.join("seg2.rvol");
    let log1 = seg(&out1);
    let log2 = seg(&out2);
    assert_eq!(log1, log2, "run logs differ");
    let b1 = read(&out1);
    let b2 = read(&out2);
    assert!(!b1.is_empty());
    assert_eq!(b1, b2, "segmentation outputs are not byte-identical");
    std::fs::remove_dir_all(&dir).ok();
    println!(
        "ACCEPTANCE 8 deterministic segmentation ({} identical bytes over two runs): PASS",
        b1.len()
    );
}
