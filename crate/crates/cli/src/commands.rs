use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use log::info;
use serde::Serialize;

use evblur_core::attention::{grad_check_with, AttentionParams, GradCheckConfig};
use evblur_core::edi::{edi_deblur, edi_sequence, EdiConfig};
use evblur_core::io;
use evblur_core::metrics::MetricReport;
use evblur_core::represent::{event_mask, sbt, scer, stack, EventMask, ScerGrid};
use evblur_core::simulate::scene::TranslatingSquare;
use evblur_core::simulate::{augment_voxels, sample_thresholds, synthesize_blur, FrameSequence, SimConfig, Simulator};
use evblur_core::{EventStream, IntensityImage, ThresholdMap, VoxelGrid};

use crate::config::{
    expand_frames, AugmentArgs, FileSettings, InvertArgs, SimArgs, WindowArgs, DEFAULT_T0, DEFAULT_T1,
};
use crate::Failure;

/// Tags an error with the stage it came from.
pub trait StageExt<T> {
    fn stage(self, name: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> StageExt<T> for Result<T, E> {
    fn stage(self, name: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Stage(name, e.into()))
    }
}

fn usage<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Usage(e.into()))
}

fn load_frames(pattern: &str, t0: u64, t1: u64) -> Result<FrameSequence, Failure> {
    let paths = usage(expand_frames(pattern))?;
    info!("loading {} frames", paths.len());
    let frames = paths
        .iter()
        .map(|p| io::read_image(p).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()
        .stage("frames")?;
    FrameSequence::uniform(frames, t0, t1).stage("frames")
}

fn mask_image(mask: &EventMask) -> IntensityImage {
    let pixels = mask.values().iter().map(|&v| v as f64).collect();
    IntensityImage::new(mask.width(), mask.height(), pixels).expect("binary mask is in range")
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let w = w.parse().map_err(|e| format!("width: {e}"))?;
    let h = h.parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

#[derive(Debug, Args)]
pub struct SceneCmd {
    /// Directory receiving frame_NNN.pgm
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub frames: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// Total horizontal travel of the square, pixels
    #[arg(long, default_value_t = 12)]
    pub travel: usize,
}

pub fn scene(cmd: &SceneCmd) -> Result<(), Failure> {
    let scene = TranslatingSquare {
        width: cmd.width,
        height: cmd.height,
        frames: cmd.frames,
        travel: cmd.travel,
        side: TranslatingSquare::default()
            .side
            .min(cmd.width.saturating_sub(cmd.travel))
            .min(cmd.height),
        ..TranslatingSquare::default()
    };
    let seq = scene.render(DEFAULT_T0, DEFAULT_T1).stage("scene")?;
    fs::create_dir_all(&cmd.out_dir).stage("scene")?;
    for (i, frame) in seq.frames().iter().enumerate() {
        io::write_image(frame, cmd.out_dir.join(format!("frame_{i:03}.pgm"))).stage("scene")?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SimulateCmd {
    /// Glob matching the sharp frames, sorted lexicographically
    #[arg(long)]
    pub frames: String,
    /// Output event file (.evt1, or .csv)
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the sampled threshold map
    #[arg(long)]
    pub thresholds_out: Option<PathBuf>,
    #[command(flatten)]
    pub window: WindowArgs,
    #[command(flatten)]
    pub sim: SimArgs,
}

fn simulate_stage(seq: &FrameSequence, sim: &SimConfig) -> Result<(ThresholdMap, EventStream), Failure> {
    let (w, h) = seq.dims();
    let thresholds = sample_thresholds(w, h, sim).stage("simulate")?;
    let events = Simulator::from(sim).simulate(seq, &thresholds).stage("simulate")?;
    info!("simulated {} events", events.len());
    Ok((thresholds, events))
}

pub fn simulate(cmd: &SimulateCmd, file: &FileSettings) -> Result<(), Failure> {
    let (t0, t1) = cmd.window.resolve(file);
    let seq = load_frames(&cmd.frames, t0, t1)?;
    let (thresholds, events) = simulate_stage(&seq, &cmd.sim.resolve(file))?;
    io::write_events(&events, &cmd.out).stage("simulate")?;
    if let Some(path) = &cmd.thresholds_out {
        io::write_thresholds(&thresholds, path).stage("simulate")?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BlurCmd {
    #[arg(long)]
    pub frames: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn blur(cmd: &BlurCmd) -> Result<(), Failure> {
    let seq = load_frames(&cmd.frames, 0, 1_000_000)?;
    io::write_image(&synthesize_blur(&seq), &cmd.out).stage("blur")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Representation {
    Scer,
    Sbt,
    Stack,
}

#[derive(Debug, Args)]
pub struct ScerCmd {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Representation::Scer)]
    pub kind: Representation,
    /// Bin count for SBT; defaults to 2N
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long, env = "EVBLUR_N")]
    pub n: Option<usize>,
    #[arg(long, env = "EVBLUR_SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub augment: AugmentArgs,
}

fn augment_stage(grid: VoxelGrid, augment: Option<SimConfig>) -> Result<VoxelGrid, Failure> {
    match augment {
        Some(cfg) => augment_voxels(&grid, &cfg, cfg.seed).stage("augment"),
        None => Ok(grid),
    }
}

pub fn scer_cmd(cmd: &ScerCmd, file: &FileSettings) -> Result<(), Failure> {
    let events = io::read_events(&cmd.events).stage("events")?;
    let n = cmd
        .n
        .or(file.n)
        .unwrap_or(evblur_core::represent::DEFAULT_HALF_INTERVALS);
    let grid = match cmd.kind {
        Representation::Scer => scer(&events, n).map(ScerGrid::into_grid),
        Representation::Sbt => sbt(&events, cmd.bins.unwrap_or(2 * n)),
        Representation::Stack => Ok(stack(&events)),
    }
    .stage("scer")?;
    let base = SimConfig {
        seed: cmd.seed.or(file.seed).unwrap_or(0),
        ..SimConfig::default()
    };
    let grid = augment_stage(grid, cmd.augment.resolve(file, base))?;
    io::write_voxels(&grid, &cmd.out).stage("scer")
}

#[derive(Debug, Args)]
pub struct MaskCmd {
    /// SCER voxel grid (.vox)
    #[arg(long)]
    pub scer: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Nearest-neighbour resize to WIDTHxHEIGHT
    #[arg(long, value_parser = parse_size)]
    pub resize: Option<(usize, usize)>,
}

pub fn mask(cmd: &MaskCmd) -> Result<(), Failure> {
    let grid = io::read_voxels(&cmd.scer).stage("mask")?;
    let mut mask = event_mask(&ScerGrid::from_voxels(grid).stage("mask")?);
    if let Some((w, h)) = cmd.resize {
        mask = mask.resize_nearest(w, h).stage("mask")?;
    }
    io::write_image(&mask_image(&mask), &cmd.out).stage("mask")
}

#[derive(Debug, Args)]
pub struct EdiCmd {
    #[arg(long)]
    pub blur: PathBuf,
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-pixel threshold map (.pfg) used instead of the scalar threshold
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Also write all 2N+1 latent frames here
    #[arg(long = "sequence")]
    pub sequence_dir: Option<PathBuf>,
    #[command(flatten)]
    pub invert: InvertArgs,
}

pub fn edi(cmd: &EdiCmd, file: &FileSettings) -> Result<(), Failure> {
    let blur = io::read_image(&cmd.blur).stage("blur")?;
    let events = io::read_events(&cmd.events).stage("events")?;
    let oracle = cmd
        .thresholds
        .as_ref()
        .map(io::read_thresholds)
        .transpose()
        .stage("thresholds")?;
    let inv = cmd.invert.resolve(file);
    let config = EdiConfig {
        half_intervals: inv.n,
        threshold: inv.threshold(oracle),
        clamp: inv.clamp,
    };
    let sharp = edi_deblur(&blur, &events, &config).stage("edi")?;
    io::write_image(&sharp.to_intensity(), &cmd.out).stage("edi")?;
    if let Some(dir) = &cmd.sequence_dir {
        let seq = edi_sequence(&blur, &events, &config).stage("edi")?;
        fs::create_dir_all(dir).stage("edi")?;
        for (i, frame) in seq.frames.iter().enumerate() {
            io::write_image(&frame.to_intensity(), dir.join(format!("latent_{i:03}.pgm"))).stage("edi")?;
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub baseline_psnr: Option<f64>,
    #[arg(long)]
    pub baseline_ssim: Option<f64>,
}

pub fn eval(cmd: &EvalCmd) -> Result<(), Failure> {
    let pred = io::read_image(&cmd.pred).stage("eval")?;
    let gt = io::read_image(&cmd.gt).stage("eval")?;
    let report = MetricReport::compare(&pred, &gt)
        .and_then(|r| r.with_baseline(cmd.baseline_psnr, cmd.baseline_ssim))
        .stage("eval")?;
    println!("{}", serde_json::to_string(&report).stage("eval")?);
    Ok(())
}

#[derive(Debug, Args)]
pub struct AttnCheckCmd {
    #[arg(long, default_value_t = 4)]
    pub h: usize,
    #[arg(long, default_value_t = 4)]
    pub w: usize,
    /// Feature channels
    #[arg(long = "C", default_value_t = 8)]
    pub channels: usize,
    /// Inner (attention) channels
    #[arg(long = "c", default_value_t = 4)]
    pub inner: usize,
    /// MLP expansion ratio
    #[arg(long, default_value_t = 2)]
    pub r: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Check these parameters instead of random ones
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Write the checked parameters as ATP1
    #[arg(long)]
    pub params_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct AttnCheckLine {
    max_rel_err: f64,
    max_abs_err: f64,
    worst_group: &'static str,
    worst_index: usize,
    tol: f64,
    pass: bool,
}

pub fn attn_check(cmd: &AttnCheckCmd) -> Result<(), Failure> {
    let params = match &cmd.params {
        Some(path) => AttentionParams::read(path).stage("attn-check")?,
        None => AttentionParams::random(cmd.channels, cmd.inner, cmd.r, cmd.heads, cmd.seed).stage("attn-check")?,
    };
    if let Some(path) = &cmd.params_out {
        params.write(path).stage("attn-check")?;
    }
    let config = GradCheckConfig {
        height: cmd.h,
        width: cmd.w,
        step: cmd.step,
        tol: cmd.tol,
        seed: cmd.seed,
    };
    let report = grad_check_with(&params, &config, |_| {}).stage("attn-check")?;
    let line = AttnCheckLine {
        max_rel_err: report.max_rel_err,
        max_abs_err: report.max_abs_err,
        worst_group: report.worst.0,
        worst_index: report.worst.1,
        tol: report.tol,
        pass: report.pass,
    };
    println!("{}", serde_json::to_string(&line).stage("attn-check")?);
    if !report.pass {
        return Err(Failure::Stage(
            "attn-check",
            anyhow::anyhow!(
                "max relative error {:.3e} exceeds {:.1e}",
                report.max_rel_err,
                report.tol
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PipelineCmd {
    #[arg(long)]
    pub frames: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Invert with the true per-pixel thresholds instead of the scalar c
    #[arg(long, env = "EVBLUR_ORACLE_THRESHOLDS", num_args = 0..=1, default_missing_value = "true")]
    pub oracle_thresholds: Option<bool>,
    #[command(flatten)]
    pub window: WindowArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    #[command(flatten)]
    pub invert: InvertArgs,
    #[command(flatten)]
    pub augment: AugmentArgs,
}

#[derive(Serialize)]
struct ReportLine<'a> {
    image: &'a str,
    #[serde(flatten)]
    metrics: MetricReport,
}

pub fn pipeline(cmd: &PipelineCmd, file: &FileSettings) -> Result<(), Failure> {
    let (t0, t1) = cmd.window.resolve(file);
    let sim = cmd.sim.resolve(file);
    let inv = cmd.invert.resolve(file);
    let oracle = cmd.oracle_thresholds.or(file.oracle_thresholds).unwrap_or(false);
    let augment = cmd.augment.resolve(file, sim.clone());
    let out = |name: &str| cmd.out_dir.join(name);

    let seq = load_frames(&cmd.frames, t0, t1)?;
    let middle = seq.middle().stage("frames")?.clone();
    fs::create_dir_all(&cmd.out_dir)
        .with_context(|| format!("creating {}", cmd.out_dir.display()))
        .stage("output")?;

    info!("stage blur");
    let blur_path = out("blur.pgm");
    io::write_image(&synthesize_blur(&seq), &blur_path).stage("blur")?;
    // invert the blur as stored so `edi` on the artifacts reproduces sharp.pgm
    let blur = io::read_image(&blur_path).stage("blur")?;

    info!("stage simulate");
    let (thresholds, events) = simulate_stage(&seq, &sim)?;
    io::write_events(&events, out("events.evt1")).stage("simulate")?;
    io::write_thresholds(&thresholds, out("thresholds.pfg")).stage("simulate")?;

    info!("stage scer");
    let grid = scer(&events, inv.n).stage("scer")?;
    let mask = event_mask(&grid);
    let voxels = augment_stage(grid.into_grid(), augment)?;
    io::write_voxels(&voxels, out("scer.vox")).stage("scer")?;
    io::write_image(&mask_image(&mask), out("mask.pgm")).stage("mask")?;

    info!("stage edi");
    let oracle_map = if oracle {
        Some(io::read_thresholds(out("thresholds.pfg")).stage("edi")?)
    } else {
        None
    };
    let config = EdiConfig {
        half_intervals: inv.n,
        threshold: inv.threshold(oracle_map),
        clamp: inv.clamp,
    };
    let sharp_path = out("sharp.pgm");
    let sharp = edi_deblur(&blur, &events, &config).stage("edi")?;
    io::write_image(&sharp.to_intensity(), &sharp_path).stage("edi")?;
    let sharp = io::read_image(&sharp_path).stage("edi")?;

    info!("stage eval");
    let baseline = MetricReport::compare(&blur, &middle).stage("eval")?;
    let restored = MetricReport::compare(&sharp, &middle)
        // a perfect baseline leaves the DSSIM reduction undefined, so it is omitted
        .and_then(|r| r.with_baseline(Some(baseline.psnr), baseline.ssim.filter(|&s| s < 1.0)))
        .stage("eval")?;
    write_report(
        &out("report.jsonl"),
        &[
            ReportLine {
                image: "blur",
                metrics: baseline,
            },
            ReportLine {
                image: "sharp",
                metrics: restored,
            },
        ],
    )
    .stage("eval")
}

fn write_report(path: &Path, lines: &[ReportLine]) -> anyhow::Result<()> {
    let mut text = String::new();
    for line in lines {
        text.push_str(&serde_json::to_string(line)?);
        text.push('\n');
    }
    fs::File::create(path)?.write_all(text.as_bytes())?;
    print!("{text}");
    Ok(())
}
