//! Domain types shared by every stage: events, intensity images, voxel grids
//! and per-pixel contrast thresholds.
//!
//! All types validate their invariants on construction and are immutable
//! afterwards, apart from consuming accessors.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default offset added before taking logarithms of intensities.
pub const DEFAULT_LOG_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn from_sign(sign: i64) -> Result<Self> {
        match sign {
            1 => Ok(Polarity::Positive),
            -1 => Ok(Polarity::Negative),
            other => Err(Error::InvalidPolarity(other)),
        }
    }

    pub fn sign(self) -> i32 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.sign() as f64
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

/// A single brightness-change event. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Event { t, x, y, p }
    }

    fn canonical_key(&self) -> (u64, u16, u16, Polarity) {
        (self.t, self.y, self.x, self.p)
    }
}

impl Ord for Event {
    /// Canonical order: time, then row, then column, then polarity.
    fn cmp(&self, other: &Self) -> Ordering {
        self.canonical_key().cmp(&other.canonical_key())
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Events triggered inside one exposure window `[t_start, t_end]`, kept in
/// canonical order so that equal streams serialize identically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    t_start: u64,
    t_end: u64,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates and sorts `events` into canonical order.
    pub fn new(width: u16, height: u16, t_start: u64, t_end: u64, mut events: Vec<Event>) -> Result<Self> {
        events.sort_unstable();
        Self::from_canonical(width, height, t_start, t_end, events)
    }

    /// Like [`EventStream::new`] but rejects input that is not already in
    /// canonical order.
    pub fn from_canonical(width: u16, height: u16, t_start: u64, t_end: u64, events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param(format!("empty pixel grid {width}x{height}")));
        }
        if t_start > t_end {
            return Err(Error::param(format!("window start {t_start} is after end {t_end}")));
        }
        for (index, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::OutOfBounds {
                    index,
                    x: e.x as u32,
                    y: e.y as u32,
                    width,
                    height,
                });
            }
            if e.t < t_start || e.t > t_end {
                return Err(Error::TimestampOutOfWindow {
                    index,
                    t: e.t,
                    t_start,
                    t_end,
                });
            }
            if index > 0 && events[index - 1] > *e {
                return Err(Error::Unsorted { index });
            }
        }
        Ok(EventStream {
            width,
            height,
            t_start,
            t_end,
            events,
        })
    }

    pub fn empty(width: u16, height: u16, t_start: u64, t_end: u64) -> Result<Self> {
        Self::from_canonical(width, height, t_start, t_end, Vec::new())
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    /// `(width, height)` as `usize`.
    pub fn dims(&self) -> (usize, usize) {
        (self.width as usize, self.height as usize)
    }

    pub fn t_start(&self) -> u64 {
        self.t_start
    }

    pub fn t_end(&self) -> u64 {
        self.t_end
    }

    pub fn duration(&self) -> u64 {
        self.t_end - self.t_start
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// The same stream with every polarity inverted.
    pub fn flipped(&self) -> Self {
        let events = self.events.iter().map(|e| Event { p: e.p.flipped(), ..*e }).collect();
        // flipping polarity can reorder events that share (t, y, x)
        EventStream::new(self.width, self.height, self.t_start, self.t_end, events)
            .expect("flipping preserves bounds and window")
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidValue(format!("{what}: non-finite value at index {i}"))),
        None => Ok(()),
    }
}

fn check_len(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::param(format!("empty grid {width}x{height}")));
    }
    if width * height * channels != len {
        return Err(Error::dims(format!(
            "{width}x{height}x{channels} grid needs {} values, got {len}",
            width * height * channels
        )));
    }
    Ok(())
}

/// Single-channel linear intensity image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl IntensityImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        check_len(width, height, 1, pixels.len())?;
        check_finite(&pixels, "intensity image")?;
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue(format!(
                "intensity {} at index {i} is outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(IntensityImage { width, height, pixels })
    }

    /// Clamps every value into `[0, 1]`. Non-finite values are rejected.
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<f64>) -> Result<Self> {
        check_len(width, height, 1, pixels.len())?;
        check_finite(&pixels, "intensity image")?;
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(IntensityImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
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

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }
}

/// Finite, non-negative linear intensity without the `[0, 1]` ceiling.
///
/// Inversion outputs live here: the reconstructed latent frame can exceed the
/// display range when the blurry input is near saturation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl LatentImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        check_len(width, height, 1, pixels.len())?;
        check_finite(&pixels, "latent image")?;
        if let Some(i) = pixels.iter().position(|v| *v < 0.0) {
            return Err(Error::InvalidValue(format!(
                "negative intensity {} at index {i}",
                pixels[i]
            )));
        }
        Ok(LatentImage { width, height, pixels })
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

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Clamps into the display range.
    pub fn to_intensity(&self) -> IntensityImage {
        IntensityImage::from_clamped(self.width, self.height, self.pixels.clone())
            .expect("latent image invariants imply a valid clamped image")
    }
}

impl From<IntensityImage> for LatentImage {
    fn from(img: IntensityImage) -> Self {
        LatentImage {
            width: img.width,
            height: img.height,
            pixels: img.pixels,
        }
    }
}

/// `ln(I + eps)` per pixel.
pub fn log_intensity(image: &IntensityImage, eps: f64) -> Result<Vec<f64>> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::param(format!("log offset must be positive, got {eps}")));
    }
    Ok(image.pixels.iter().map(|v| (v + eps).ln()).collect())
}

/// `H x W x K` real-valued grid. Storage is row-major within a channel,
/// channels outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::param("voxel grid needs at least one channel"));
        }
        check_len(width, height, channels, values.len())?;
        check_finite(&values, "voxel grid")?;
        Ok(VoxelGrid {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, channel: usize, x: usize, y: usize) -> f64 {
        self.values[channel * self.plane_len() + y * self.width + x]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[channel * n..(channel + 1) * n]
    }

    pub fn same_shape(&self, other: &VoxelGrid) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Per-pixel positive contrast thresholds, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ThresholdMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_len(width, height, 1, values.len())?;
        check_finite(&values, "threshold map")?;
        if let Some(i) = values.iter().position(|c| *c <= 0.0) {
            return Err(Error::InvalidValue(format!(
                "contrast threshold {} at index {i} is not positive",
                values[i]
            )));
        }
        Ok(ThresholdMap { width, height, values })
    }

    pub fn uniform(width: usize, height: usize, c: f64) -> Result<Self> {
        Self::new(width, height, vec![c; width * height])
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}
