//! Event-to-voxel representations (SCER, SBT, Stack), the binary event mask
//! and mask-gated feature mixing.
//!
//! Interval arithmetic is done in integers: with `T = t_end - t_start` and
//! `q = 2N (t - t_start)`, the boundary between sub-intervals `k` and `k + 1`
//! sits at `q = (k + 1) T`, so membership tests never round.

use crate::error::{Error, Result};
use crate::model::{EventStream, VoxelGrid};

/// Default half-interval count; gives a six-channel SCER.
pub const DEFAULT_HALF_INTERVALS: usize = 3;

/// Symmetric cumulative event representation: `2N` channels of signed
/// polarity sums between the window midpoint and each of the other `2N`
/// sample instants.
///
/// Channel `k < N` holds `-Σ p` over `[t_k, f]`; channel `k >= N` holds
/// `+Σ p` over `[f, t_{k+1}]`, where `t_i = t_start + i T / 2N` and `f` is the
/// midpoint. The all-zero middle tensor is not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ScerGrid {
    half_intervals: usize,
    grid: VoxelGrid,
}

impl ScerGrid {
    pub fn from_voxels(grid: VoxelGrid) -> Result<Self> {
        if !grid.channels().is_multiple_of(2) {
            return Err(Error::param(format!(
                "SCER needs an even channel count, got {}",
                grid.channels()
            )));
        }
        Ok(ScerGrid {
            half_intervals: grid.channels() / 2,
            grid,
        })
    }

    /// `N`.
    pub fn half_intervals(&self) -> usize {
        self.half_intervals
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.grid
    }

    /// The signed accumulation for sample instant `i` in `0..=2N`, with the
    /// implicit zero at `i = N` reinserted.
    pub fn sample_offset(&self, i: usize, x: usize, y: usize) -> f64 {
        let n = self.half_intervals;
        match i.cmp(&n) {
            std::cmp::Ordering::Less => self.grid.get(i, x, y),
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => self.grid.get(i - 1, x, y),
        }
    }
}

fn window(stream: &EventStream) -> Result<u128> {
    match stream.duration() {
        0 => Err(Error::param("event window is empty (t_start == t_end)")),
        t => Ok(t as u128),
    }
}

pub fn scer(stream: &EventStream, half_intervals: usize) -> Result<ScerGrid> {
    let n = half_intervals;
    if n < 1 {
        return Err(Error::param("SCER needs N >= 1"));
    }
    let span = window(stream)?;
    let (width, height) = stream.dims();
    let plane = width * height;
    let channels = 2 * n;
    let mut values = vec![0.0; plane * channels];
    let mid = n as u128 * span;

    for e in stream.events() {
        let q = 2 * n as u128 * (e.t - stream.t_start()) as u128;
        let pix = e.y as usize * width + e.x as usize;
        let p = e.p.as_f64();
        if q <= mid {
            // channels k with k T <= q, i.e. k in 0..=floor(q / T)
            let last = (q / span) as usize;
            for k in 0..=last.min(n - 1) {
                values[k * plane + pix] -= p;
            }
        }
        if q >= mid {
            // channels k >= N with q <= (k + 1) T
            let first = (q.div_ceil(span) as usize).saturating_sub(1).max(n);
            for k in first..channels {
                values[k * plane + pix] += p;
            }
        }
    }
    ScerGrid::from_voxels(VoxelGrid::new(width, height, channels, values)?)
}

/// Stacking based on time: per-bin polarity histogram over half-open bins,
/// the last bin closed at `t_end`.
pub fn sbt(stream: &EventStream, bins: usize) -> Result<VoxelGrid> {
    if bins < 1 {
        return Err(Error::param("SBT needs at least one bin"));
    }
    let span = window(stream)?;
    let (width, height) = stream.dims();
    let plane = width * height;
    let mut values = vec![0.0; plane * bins];
    for e in stream.events() {
        let offset = (e.t - stream.t_start()) as u128;
        let bin = ((offset * bins as u128 / span) as usize).min(bins - 1);
        values[bin * plane + e.y as usize * width + e.x as usize] += e.p.as_f64();
    }
    VoxelGrid::new(width, height, bins, values)
}

/// Single-channel sum of every polarity in the window.
pub fn stack(stream: &EventStream) -> VoxelGrid {
    let (width, height) = stream.dims();
    let mut values = vec![0.0; width * height];
    for e in stream.events() {
        values[e.y as usize * width + e.x as usize] += e.p.as_f64();
    }
    VoxelGrid::new(width, height, 1, values).expect("stream dims are non-zero")
}

/// Rebuilds SCER from a `2N`-bin SBT by prefix sums outward from the middle.
///
/// Matches [`scer`] exactly unless an event sits on an interior bin boundary:
/// SBT counts it once, SCER's closed intervals count it on both sides.
pub fn scer_from_sbt(sbt: &VoxelGrid) -> Result<ScerGrid> {
    let bins = sbt.channels();
    if !bins.is_multiple_of(2) {
        return Err(Error::param(format!("SCER needs an even bin count, got {bins}")));
    }
    let n = bins / 2;
    let plane = sbt.plane_len();
    let mut values = vec![0.0; plane * bins];
    let mut acc = vec![0.0; plane];
    for k in (0..n).rev() {
        for (a, v) in acc.iter_mut().zip(sbt.channel(k)) {
            *a -= v;
        }
        values[k * plane..(k + 1) * plane].copy_from_slice(&acc);
    }
    acc.fill(0.0);
    for k in n..bins {
        for (a, v) in acc.iter_mut().zip(sbt.channel(k)) {
            *a += v;
        }
        values[k * plane..(k + 1) * plane].copy_from_slice(&acc);
    }
    ScerGrid::from_voxels(VoxelGrid::new(sbt.width(), sbt.height(), bins, values)?)
}

/// Binary map, 0 where events occurred and 1 elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl EventMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width * height != values.len() || values.is_empty() {
            return Err(Error::dims(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidValue("event mask must be binary".into()));
        }
        Ok(EventMask { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    /// Nearest-neighbour resampling to another pyramid level.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<EventMask> {
        if width == 0 || height == 0 {
            return Err(Error::param("cannot resize mask to an empty grid"));
        }
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                values.push(self.values[sy * self.width + sx]);
            }
        }
        EventMask::new(width, height, values)
    }
}

/// Mask from the outermost SCER channels: a pixel is 0 when
/// `|ch_0| + |ch_{2N-1}| > 0`. Magnitudes keep opposite-signed sums from
/// cancelling.
pub fn event_mask(scer: &ScerGrid) -> EventMask {
    let grid = scer.grid();
    let first = grid.channel(0);
    let last = grid.channel(grid.channels() - 1);
    let values = first
        .iter()
        .zip(last)
        .map(|(a, b)| u8::from(a.abs() + b.abs() <= 0.0))
        .collect();
    EventMask::new(grid.width(), grid.height(), values).expect("SCER dims are non-zero")
}

fn check_gate_shapes(enc: &VoxelGrid, dec: &VoxelGrid, mask: &EventMask) -> Result<()> {
    if !enc.same_shape(dec) {
        return Err(Error::dims(format!(
            "encoder {}x{}x{} vs decoder {}x{}x{}",
            enc.width(),
            enc.height(),
            enc.channels(),
            dec.width(),
            dec.height(),
            dec.channels()
        )));
    }
    if (enc.width(), enc.height()) != mask.dims() {
        return Err(Error::dims(format!(
            "features are {}x{}, mask is {:?}",
            enc.width(),
            enc.height(),
            mask.dims()
        )));
    }
    Ok(())
}

/// The two gated terms `(enc ⊙ m, dec ⊙ (1 - m))`, mask broadcast over
/// channels.
pub fn emgc_gates(enc: &VoxelGrid, dec: &VoxelGrid, mask: &EventMask) -> Result<(VoxelGrid, VoxelGrid)> {
    check_gate_shapes(enc, dec, mask)?;
    let plane = enc.plane_len();
    let m = mask.values();
    let gated_enc = enc
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| v * m[i % plane] as f64)
        .collect();
    let gated_dec = dec
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| v * (1 - m[i % plane]) as f64)
        .collect();
    Ok((
        VoxelGrid::new(enc.width(), enc.height(), enc.channels(), gated_enc)?,
        VoxelGrid::new(dec.width(), dec.height(), dec.channels(), gated_dec)?,
    ))
}

/// `enc ⊙ m + dec ⊙ (1 - m) + enc + dec`.
pub fn emgc_combine(enc: &VoxelGrid, dec: &VoxelGrid, mask: &EventMask) -> Result<VoxelGrid> {
    let (gated_enc, gated_dec) = emgc_gates(enc, dec, mask)?;
    let values = gated_enc
        .values()
        .iter()
        .zip(gated_dec.values())
        .zip(enc.values().iter().zip(dec.values()))
        .map(|((ge, gd), (e, d))| ge + gd + e + d)
        .collect();
    VoxelGrid::new(enc.width(), enc.height(), enc.channels(), values)
}
