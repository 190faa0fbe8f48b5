//! Command-line front end for the sparse segmentation engine.
//!
//! Exit codes: 0 on success, 1 on any runtime failure (bad data, missing
//! files, model errors), 2 on invalid usage (clap).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use sparseseg_core::bench::{emit_csv, emit_markdown, run_bench, BenchConfig};
use sparseseg_core::model::{
    load_checkpoint, save_checkpoint, ModelConfig, SparseUNet,
};
use sparseseg_core::pipeline::{
    apply_hu_window, compute_percentile_range, components_from_roi_file, connected_components,
    dilate, dsc_multilabel, filter_components, lift_to_highres, load_roi_file, mask_to_voxels,
    normalize_intensity, predict_roi, reassemble, roi_file_from_components, save_roi_file,
    segment_component, truth_multilabel,
};
use sparseseg_core::train::{
    augment_pair, kfold_split, lr_at_epoch, prepare_case, train_loop, TrainConfig,
};
use sparseseg_core::volume::{
    load_volume, make_multilabel, store_volume, GridKind, MultiLabelMask, ResampleMode, VoxelGrid,
};

#[derive(Parser)]
#[command(
    name = "sparseseg",
    about = "Two-stage sparse CT kidney/tumour segmentation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Resample a volume to a new spacing (trilinear; labels nearest).
    Resample(ResampleArgs),
    /// Print the percentile HU window of one or more volumes.
    Percentiles(PercentilesArgs),
    /// Report (and optionally store) the active-voxel mask for a window.
    Sparsify(SparsifyArgs),
    /// Train a model on a directory of cases.
    Train(TrainArgs),
    /// Stage 1: predict regions of interest on a low-resolution volume.
    Roi(RoiArgs),
    /// Stage 2: segment a high-resolution volume inside lifted ROIs.
    Segment(SegmentArgs),
    /// Score a predicted label volume against ground truth.
    Eval(EvalArgs),
    /// Sparse-vs-dense forward benchmark.
    Bench(BenchArgs),
    /// Print the model's parameter count.
    ParamCount(ParamCountArgs),
    /// Run quick internal consistency checks.
    Selftest,
}

fn parse_triple(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("cannot parse '{s}' as three comma-separated numbers"))?;
    if parts.len() != 3 {
        bail!("expected three comma-separated numbers, got '{s}'");
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn parse_window(s: &str) -> Result<(f32, f32)> {
    let parts: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("cannot parse '{s}' as LO,HI"))?;
    if parts.len() != 2 || parts[0] >= parts[1] {
        bail!("window must be LO,HI with LO < HI, got '{s}'");
    }
    Ok((parts[0], parts[1]))
}

fn load_model_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => {
            let json = std::fs::read_to_string(p)
                .with_context(|| format!("reading model config {}", p.display()))?;
            serde_json::from_str(&json).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

#[derive(Args)]
struct ResampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// Target spacing in mm as X,Y,Z (e.g. 1.99,1.99,1.99).
    #[arg(long)]
    spacing: String,
    /// Force nearest-neighbour sampling (required for label volumes).
    #[arg(long)]
    nearest: bool,
}

fn cmd_resample(a: &ResampleArgs) -> Result<()> {
    let grid = load_volume(&a.input)?;
    let spacing = parse_triple(&a.spacing)?;
    let mode = if a.nearest || grid.kind == GridKind::LabelCode {
        ResampleMode::Nearest
    } else {
        ResampleMode::Trilinear
    };
    let out = grid.resample(spacing, mode)?;
    store_volume(&out, &a.output)?;
    println!(
        "resampled {:?} @ {:?} -> {:?} @ {:?}",
        grid.dims, grid.spacing, out.dims, out.spacing
    );
    Ok(())
}

#[derive(Args)]
struct PercentilesArgs {
    /// Input volumes; percentiles are taken over the pooled voxels.
    #[arg(long = "in", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    lo: f64,
    #[arg(long, default_value_t = 99.5)]
    hi: f64,
    /// Pool only voxels where the case's label volume is foreground.
    #[arg(long)]
    foreground_only: bool,
}

fn cmd_percentiles(a: &PercentilesArgs) -> Result<()> {
    let mut pool = Vec::new();
    for path in &a.inputs {
        let grid = load_volume(path)?;
        if a.foreground_only {
            let label_path = path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join("label.rvol");
            let label = load_volume(&label_path)
                .with_context(|| format!("--foreground-only needs {}", label_path.display()))?;
            if label.dims != grid.dims {
                bail!("label dims {:?} differ from image {:?}", label.dims, grid.dims);
            }
            pool.extend(
                grid.data
                    .iter()
                    .zip(label.data.iter())
                    .filter(|(_, &l)| l > 0.0)
                    .map(|(&v, _)| v),
            );
        } else {
            pool.extend_from_slice(&grid.data);
        }
    }
    let (lo, hi) = compute_percentile_range(&pool, a.lo, a.hi)?;
    println!("{}", serde_json::json!({ "lo": lo, "hi": hi }));
    Ok(())
}

#[derive(Args)]
struct SparsifyArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// HU window as LO,HI.
    #[arg(long)]
    window: String,
    /// Optional output mask volume (0/1 label codes).
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

fn cmd_sparsify(a: &SparsifyArgs) -> Result<()> {
    let grid = load_volume(&a.input)?;
    let (lo, hi) = parse_window(&a.window)?;
    let mask = apply_hu_window(&grid, lo, hi);
    let active = mask.iter().filter(|&&m| m).count();
    let total = mask.len();
    println!(
        "{}",
        serde_json::json!({
            "active": active,
            "total": total,
            "removed_fraction": 1.0 - active as f64 / total as f64,
        })
    );
    if let Some(out) = &a.output {
        let data: Vec<f32> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let mg = VoxelGrid::new(grid.dims, grid.spacing, grid.origin, GridKind::LabelCode, data)?;
        store_volume(&mg, out)?;
    }
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of case subdirectories, each with image.rvol + label.rvol.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint base path to write (e.g. runs/low -> runs/low.ckpt.*).
    #[arg(long = "out")]
    output: PathBuf,
    /// Training config JSON; defaults match the built-in schedule.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model architecture JSON; defaults to the full network.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Held-out fold index (requires --folds).
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Cap on optimizer steps; 0 runs the full schedule.
    #[arg(long, default_value_t = 0)]
    steps: usize,
    /// HU window LO,HI; computed from the data when omitted.
    #[arg(long)]
    window: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Loss log CSV; defaults next to the checkpoint.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn discover_cases(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut cases: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading case directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("image.rvol").exists() && p.join("label.rvol").exists())
        .collect();
    cases.sort();
    if cases.is_empty() {
        bail!("no cases with image.rvol + label.rvol under {}", dir.display());
    }
    Ok(cases)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let tcfg: TrainConfig = match &a.config {
        None => TrainConfig {
            seed: a.seed,
            ..Default::default()
        },
        Some(p) => {
            let json = std::fs::read_to_string(p)
                .with_context(|| format!("reading train config {}", p.display()))?;
            serde_json::from_str(&json).with_context(|| format!("parsing {}", p.display()))?
        }
    };
    let mcfg = load_model_config(a.model_config.as_deref())?;
    let all = discover_cases(&a.data)?;
    let train_idx: Vec<usize> = match a.fold {
        None => (0..all.len()).collect(),
        Some(f) => {
            if f >= a.folds {
                bail!("--fold {f} out of range for --folds {}", a.folds);
            }
            let folds = kfold_split(all.len(), a.folds, tcfg.seed);
            (0..all.len()).filter(|i| !folds[f].contains(i)).collect()
        }
    };

    // window from pooled training intensities unless given
    let window = match &a.window {
        Some(w) => parse_window(w)?,
        None => {
            let mut pool = Vec::new();
            for &i in &train_idx {
                let img = load_volume(&all[i].join("image.rvol"))?;
                pool.extend_from_slice(&img.data);
            }
            compute_percentile_range(&pool, 0.5, 99.5)?
        }
    };
    eprintln!("window: [{}, {}]", window.0, window.1);

    let mut rng = ChaCha12Rng::seed_from_u64(tcfg.seed);
    let mut prepared = Vec::new();
    for &i in &train_idx {
        let img = load_volume(&all[i].join("image.rvol"))?;
        let lab = load_volume(&all[i].join("label.rvol"))?;
        let (img, lab) = if a.no_augment {
            (img, lab)
        } else {
            augment_pair(&img, &lab, &tcfg.augment, &mut rng)?
        };
        let mask = apply_hu_window(&img, window.0, window.1);
        if !mask.iter().any(|&m| m) {
            bail!("case {} has no active voxels in the window", all[i].display());
        }
        prepared.push(prepare_case::<f32>(&img, &lab, &mask, |v| {
            normalize_intensity(v, window.0, window.1)
        })?);
    }

    let mut model = SparseUNet::<f32>::build(mcfg, tcfg.seed)?;
    let steps_per_epoch = prepared.len().max(tcfg.grad_accum) / tcfg.grad_accum;
    let full = tcfg.total_epochs() * steps_per_epoch.max(1);
    let max_steps = if a.steps == 0 { full } else { a.steps.min(full) };
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| a.output.with_extension("loss.csv"));
    let mut log = String::from("step,epoch,lr,loss\n");
    let last = train_loop(&mut model, &prepared, &tcfg, max_steps, |s| {
        log.push_str(&format!("{},{},{},{}\n", s.step, s.epoch, s.lr, s.loss));
    })?;
    std::fs::write(&log_path, log)
        .with_context(|| format!("writing {}", log_path.display()))?;
    save_checkpoint(&model, &a.output)?;
    println!(
        "trained {} steps on {} cases, final loss {last}, lr(last epoch) {}",
        max_steps,
        prepared.len(),
        lr_at_epoch(&tcfg, tcfg.total_epochs() - 1)
    );
    Ok(())
}

#[derive(Args)]
struct RoiArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    /// Dilation ball diameter in voxels.
    #[arg(long, default_value_t = 11)]
    dilate: usize,
    #[arg(long, default_value_t = 50)]
    min_size: usize,
    #[arg(long, default_value_t = 26)]
    connectivity: usize,
    /// HU window LO,HI; computed from this volume when omitted.
    #[arg(long)]
    window: Option<String>,
}

fn cmd_roi(a: &RoiArgs) -> Result<()> {
    let model = load_checkpoint::<f32>(&a.model)?;
    let grid = load_volume(&a.input)?;
    let window = match &a.window {
        Some(w) => parse_window(w)?,
        None => compute_percentile_range(&grid.data, 0.5, 99.5)?,
    };
    let roi = predict_roi(&model, &grid, window, a.threshold)?;
    let dilated = dilate(&roi, grid.dims, a.dilate);
    let comps = connected_components(&dilated, grid.dims, a.connectivity)?;
    let comps = filter_components(comps, a.min_size);
    let file = roi_file_from_components(&comps, &grid);
    save_roi_file(&file, &a.output)?;
    println!(
        "{}",
        serde_json::json!({
            "components": comps.len(),
            "sizes": comps.iter().map(|c| c.size()).collect::<Vec<_>>(),
        })
    );
    Ok(())
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    /// High-resolution image volume.
    #[arg(long = "in")]
    input: PathBuf,
    /// ROI file produced by `roi` on the low-resolution grid.
    #[arg(long)]
    roi: PathBuf,
    /// Output label volume.
    #[arg(long = "out")]
    output: PathBuf,
    /// HU window LO,HI; computed from this volume when omitted.
    #[arg(long)]
    window: Option<String>,
    /// Per-component active voxel capacity.
    #[arg(long, default_value_t = 4_000_000)]
    max_component_voxels: usize,
    /// Kept for reproducibility bookkeeping; inference is already
    /// deterministic.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn multilabel_to_codes(m: &MultiLabelMask) -> Vec<f32> {
    (0..m.voxel_count())
        .map(|i| {
            if !m.channels[0][i] {
                0.0
            } else if !m.channels[1][i] {
                1.0 // kidney only
            } else if m.channels[2][i] {
                2.0 // tumour
            } else {
                3.0 // cyst
            }
        })
        .collect()
}

fn cmd_segment(a: &SegmentArgs) -> Result<()> {
    let model = load_checkpoint::<f32>(&a.model)?;
    let high = load_volume(&a.input)?;
    let roi = load_roi_file(&a.roi)?;
    let window = match &a.window {
        Some(w) => parse_window(w)?,
        None => compute_percentile_range(&high.data, 0.5, 99.5)?,
    };
    let low = VoxelGrid::filled(roi.grid_dims, roi.spacing_mm, GridKind::IntensityHu, 0.0)
        .map(|mut g| {
            g.origin = high.origin; // the two grids share a physical frame
            g
        })?;
    let comps = components_from_roi_file(&roi)?;
    let mut preds = Vec::new();
    for comp in &comps {
        let lifted = lift_to_highres(comp, &low, &high);
        let voxels = mask_to_voxels(&lifted, high.dims);
        if voxels.is_empty() {
            continue;
        }
        preds.push(segment_component(
            &model,
            &high,
            &voxels,
            window,
            a.max_component_voxels,
        )?);
    }
    let merged = reassemble(&preds, high.dims)?;
    let out = VoxelGrid::new(
        high.dims,
        high.spacing,
        high.origin,
        GridKind::LabelCode,
        multilabel_to_codes(&merged),
    )?;
    store_volume(&out, &a.output)?;
    println!(
        "{}",
        serde_json::json!({
            "components_segmented": preds.len(),
            "foreground_voxels": merged.channels[0].iter().filter(|&&v| v).count(),
        })
    );
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Optional metrics CSV output (also printed to stdout).
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let pred = load_volume(&a.pred)?;
    let truth = load_volume(&a.truth)?;
    if pred.dims != truth.dims {
        bail!("pred dims {:?} differ from truth {:?}", pred.dims, truth.dims);
    }
    let pm = make_multilabel(&pred)?;
    let tm = truth_multilabel(&truth)?;
    let (per, all) = dsc_multilabel(&pm, &tm);
    let mut csv = String::from("channel,dsc\n");
    for (name, v) in [
        ("kidney_and_masses", per[0]),
        ("masses", per[1]),
        ("tumour", per[2]),
        ("all", all),
    ] {
        csv.push_str(&format!("{name},{v}\n"));
    }
    print!("{csv}");
    if let Some(out) = &a.output {
        std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchFormat {
    Csv,
    Markdown,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0.1)]
    occupancy: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = BenchFormat::Csv)]
    format: BenchFormat,
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    if a.reps < 5 {
        bail!("--reps must be at least 5 for a meaningful spread");
    }
    let cfg = BenchConfig {
        size: a.size,
        occupancy: a.occupancy,
        batch: a.batch,
        channels: a.channels,
        layers: a.layers,
        reps: a.reps,
        warmup: a.warmup,
        seed: a.seed,
        mem_limit_bytes: usize::MAX,
    };
    let report = run_bench::<f32>(&cfg);
    let text = match a.format {
        BenchFormat::Csv => emit_csv(&report),
        BenchFormat::Markdown => emit_markdown(&report),
    };
    print!("{text}");
    if let Some(out) = &a.output {
        std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

#[derive(Args)]
struct ParamCountArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_param_count(a: &ParamCountArgs) -> Result<()> {
    let cfg = load_model_config(a.config.as_deref())?;
    cfg.validate()?;
    println!("{}", cfg.param_count());
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    // quick end-to-end sanity checks, seconds not minutes
    let count = ModelConfig::default().param_count();
    if count != 27_473_696 {
        bail!("default parameter count {count} != 27473696");
    }
    println!("param-count: ok ({count})");

    let cfg = ModelConfig {
        stage_widths: vec![4, 8],
        stage_depths: vec![1, 1],
        decoder_blocks_per_stage: 1,
        ds_heads: 1,
        ..Default::default()
    };
    if SparseUNet::<f32>::build(cfg.clone(), 1)?.count_params() != cfg.param_count() {
        bail!("builder and closed-form parameter counts disagree");
    }
    println!("count-formula: ok");

    let model = SparseUNet::<f32>::build(cfg, 1)?;
    let grid = VoxelGrid::filled([8, 8, 8], [1.0; 3], GridKind::IntensityHu, 100.0)?;
    let roi = predict_roi(&model, &grid, (0.0, 200.0), 0.1)?;
    if roi.len() != 512 {
        bail!("roi mask has wrong length");
    }
    println!("forward: ok");

    let mask = vec![true; 512];
    let comps = connected_components(&mask, [8, 8, 8], 26)?;
    if comps.len() != 1 || comps[0].size() != 512 {
        bail!("connected components failed on a full mask");
    }
    println!("components: ok");
    println!("selftest passed");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Resample(a) => cmd_resample(a),
        Cmd::Percentiles(a) => cmd_percentiles(a),
        Cmd::Sparsify(a) => cmd_sparsify(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Roi(a) => cmd_roi(a),
        Cmd::Segment(a) => cmd_segment(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::ParamCount(a) => cmd_param_count(a),
        Cmd::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
