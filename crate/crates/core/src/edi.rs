//! Event-based double integral inversion.
//!
//! With `E_i` the signed polarity sum between the window midpoint and sample
//! instant `i` (see [`ScerGrid`]), a blurry frame is the mean of the latent
//! frames `L(i) = L(N) exp(c E_i)`:
//!
//! ```text
//! B = L(N) / (2N + 1) * Σ_{i=0}^{2N} exp(c E_i)
//! ```
//!
//! so `L(N) = (2N + 1) B / D` with `D = Σ exp(c E_i)`. Everything here is in
//! linear intensity; the log offset used by the simulator plays no part.

use crate::error::{Error, Result};
use crate::model::{EventStream, IntensityImage, LatentImage, ThresholdMap, VoxelGrid};
use crate::represent::{scer, ScerGrid};

/// Contrast threshold used by the inversion.
#[derive(Debug, Clone, PartialEq)]
pub enum Threshold {
    Scalar(f64),
    /// Per-pixel thresholds, e.g. the true map used to simulate the events.
    Map(ThresholdMap),
}

impl Threshold {
    fn validate(&self, width: usize, height: usize) -> Result<()> {
        match self {
            Threshold::Scalar(c) if !(*c > 0.0 && c.is_finite()) => {
                Err(Error::param(format!("contrast threshold must be positive, got {c}")))
            }
            Threshold::Map(m) if m.dims() != (width, height) => Err(Error::dims(format!(
                "threshold map is {:?}, events are {width}x{height}",
                m.dims()
            ))),
            _ => Ok(()),
        }
    }

    fn at(&self, pixel: usize) -> f64 {
        match self {
            Threshold::Scalar(c) => *c,
            Threshold::Map(m) => m.values()[pixel],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdiConfig {
    pub half_intervals: usize,
    pub threshold: Threshold,
    pub clamp: bool,
}

impl Default for EdiConfig {
    fn default() -> Self {
        EdiConfig {
            half_intervals: 3,
            threshold: Threshold::Scalar(0.2),
            clamp: false,
        }
    }
}

/// The `2N + 1` latent frames recovered by [`edi_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub frames: Vec<LatentImage>,
    pub timestamps: Vec<u64>,
}

impl LatentSequence {
    pub fn middle(&self) -> &LatentImage {
        &self.frames[self.frames.len() / 2]
    }
}

fn check_inputs(stream: &EventStream, half_intervals: usize, threshold: &Threshold) -> Result<()> {
    if half_intervals < 1 {
        return Err(Error::param("EDI needs N >= 1"));
    }
    let (w, h) = stream.dims();
    threshold.validate(w, h)
}

fn denominator_from_scer(grid: &ScerGrid, threshold: &Threshold) -> Vec<f64> {
    let g = grid.grid();
    (0..g.plane_len())
        .map(|pix| {
            let c = threshold.at(pix);
            (0..g.channels()).map(|k| (c * g.channel(k)[pix]).exp()).sum::<f64>() + 1.0
        })
        .collect()
}

/// `D = Σ_{i=0}^{2N} exp(c E_i)` per pixel, as a one-channel grid.
pub fn edi_denominator(stream: &EventStream, half_intervals: usize, threshold: &Threshold) -> Result<VoxelGrid> {
    check_inputs(stream, half_intervals, threshold)?;
    let grid = scer(stream, half_intervals)?;
    let (w, h) = stream.dims();
    VoxelGrid::new(w, h, 1, denominator_from_scer(&grid, threshold))
}

fn check_blur(blur: &IntensityImage, stream: &EventStream) -> Result<()> {
    if blur.dims() != stream.dims() {
        return Err(Error::dims(format!(
            "blurry image is {:?}, events are {:?}",
            blur.dims(),
            stream.dims()
        )));
    }
    Ok(())
}

fn finish(width: usize, height: usize, mut pixels: Vec<f64>, clamp: bool) -> Result<LatentImage> {
    if clamp {
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }
    LatentImage::new(width, height, pixels)
}

/// Latent sharp frame at the window midpoint: `L(N) = (2N + 1) B / D`.
pub fn edi_deblur(blur: &IntensityImage, stream: &EventStream, config: &EdiConfig) -> Result<LatentImage> {
    check_blur(blur, stream)?;
    let d = edi_denominator(stream, config.half_intervals, &config.threshold)?;
    let scale = (2 * config.half_intervals + 1) as f64;
    let pixels = blur
        .pixels()
        .iter()
        .zip(d.values())
        .map(|(b, d)| b * (scale / d))
        .collect();
    finish(blur.width(), blur.height(), pixels, config.clamp)
}

/// All `2N + 1` latent frames, `L(i) = L(N) exp(c E_i)`.
pub fn edi_sequence(blur: &IntensityImage, stream: &EventStream, config: &EdiConfig) -> Result<LatentSequence> {
    check_blur(blur, stream)?;
    check_inputs(stream, config.half_intervals, &config.threshold)?;
    let n = config.half_intervals;
    let grid = scer(stream, n)?;
    let d = denominator_from_scer(&grid, &config.threshold);
    let scale = (2 * n + 1) as f64;
    let (w, h) = blur.dims();
    let middle: Vec<f64> = blur.pixels().iter().zip(&d).map(|(b, d)| b * (scale / d)).collect();

    let span = stream.duration() as u128;
    let mut frames = Vec::with_capacity(2 * n + 1);
    let mut timestamps = Vec::with_capacity(2 * n + 1);
    for i in 0..=2 * n {
        let pixels = middle
            .iter()
            .enumerate()
            .map(|(pix, &l)| {
                let (x, y) = (pix % w, pix / w);
                l * (config.threshold.at(pix) * grid.sample_offset(i, x, y)).exp()
            })
            .collect();
        frames.push(finish(w, h, pixels, config.clamp)?);
        let offset = (2 * i as u128 * span + 2 * n as u128) / (4 * n as u128);
        timestamps.push(stream.t_start() + offset as u64);
    }
    Ok(LatentSequence { frames, timestamps })
}
