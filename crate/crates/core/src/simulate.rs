//! Event generation from a sharp frame sequence, blur synthesis by frame
//! averaging, and voxel-level noise augmentation.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{
    log_intensity, Event, EventStream, IntensityImage, Polarity, ThresholdMap, VoxelGrid, DEFAULT_LOG_EPS,
};

/// Smallest contrast threshold a sampled map may contain.
pub const MIN_THRESHOLD: f64 = 0.01;

/// Default value written into every channel of a hot pixel.
pub const DEFAULT_HOT_VALUE: f64 = 10.0;

/// Slack, in log-intensity units, under which a crossing that lands exactly
/// on a frame value still fires. Absorbs rounding in `r += c`.
const CROSSING_TOL: f64 = 1e-9;

/// Sharp frames sampled uniformly over an exposure window.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<IntensityImage>,
    timestamps: Vec<u64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<IntensityImage>, timestamps: Vec<u64>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::param(format!("need at least 2 frames, got {}", frames.len())));
        }
        if frames.len() != timestamps.len() {
            return Err(Error::dims(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        let dims = frames[0].dims();
        if let Some(i) = frames.iter().position(|f| f.dims() != dims) {
            return Err(Error::dims(format!(
                "frame {i} is {:?}, frame 0 is {dims:?}",
                frames[i].dims()
            )));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::param(format!(
                "timestamps not strictly increasing at frame {}",
                i + 1
            )));
        }
        let span = (timestamps[timestamps.len() - 1] - timestamps[0]) as f64;
        let step = span / (timestamps.len() - 1) as f64;
        for (i, &t) in timestamps.iter().enumerate() {
            let ideal = timestamps[0] as f64 + i as f64 * step;
            if (t as f64 - ideal).abs() > 1.0 {
                return Err(Error::param(format!(
                    "non-uniform timestamps: frame {i} at {t}, expected {ideal:.1}"
                )));
            }
        }
        Ok(FrameSequence { frames, timestamps })
    }

    /// Assigns timestamps uniformly over `[t_start, t_end]`, rounded to the
    /// nearest microsecond.
    pub fn uniform(frames: Vec<IntensityImage>, t_start: u64, t_end: u64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::param(format!("need at least 2 frames, got {}", frames.len())));
        }
        if t_end <= t_start {
            return Err(Error::param(format!("empty window [{t_start}, {t_end}]")));
        }
        let intervals = (frames.len() - 1) as u128;
        let span = (t_end - t_start) as u128;
        let timestamps = (0..frames.len() as u128)
            .map(|i| t_start + ((2 * i * span + intervals) / (2 * intervals)) as u64)
            .collect();
        Self::new(frames, timestamps)
    }

    pub fn frames(&self) -> &[IntensityImage] {
        &self.frames
    }

    pub fn timestamps(&self) -> &[u64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn t_start(&self) -> u64 {
        self.timestamps[0]
    }

    pub fn t_end(&self) -> u64 {
        self.timestamps[self.timestamps.len() - 1]
    }

    /// Index of the middle frame. Only defined for an odd frame count.
    pub fn middle_index(&self) -> Result<usize> {
        if self.frames.len().is_multiple_of(2) {
            return Err(Error::param(format!(
                "{} frames has no middle frame; need 2N+1",
                self.frames.len()
            )));
        }
        Ok(self.frames.len() / 2)
    }

    pub fn middle(&self) -> Result<&IntensityImage> {
        Ok(&self.frames[self.middle_index()?])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub mu_c: f64,
    pub sigma_c: f64,
    pub eps: f64,
    pub seed: u64,
    pub hot_pixels: usize,
    pub hot_value: f64,
    pub noise_std: f64,
    /// Dead time after an event during which a pixel cannot fire. 0 disables.
    pub refractory_us: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mu_c: 0.2,
            sigma_c: 0.03,
            eps: DEFAULT_LOG_EPS,
            seed: 0,
            hot_pixels: 0,
            hot_value: DEFAULT_HOT_VALUE,
            noise_std: 0.0,
            refractory_us: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_c > 0.0 && self.mu_c.is_finite()) {
            return Err(Error::param(format!(
                "threshold mean must be positive, got {}",
                self.mu_c
            )));
        }
        if !(self.sigma_c >= 0.0 && self.sigma_c.is_finite()) {
            return Err(Error::param(format!(
                "threshold stddev must be >= 0, got {}",
                self.sigma_c
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::param(format!("log offset must be positive, got {}", self.eps)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::param(format!(
                "noise stddev must be >= 0, got {}",
                self.noise_std
            )));
        }
        if !self.hot_value.is_finite() {
            return Err(Error::param("hot pixel value must be finite"));
        }
        Ok(())
    }
}

/// Per-pixel thresholds drawn i.i.d. from `N(mu_c, sigma_c^2)`, clamped below
/// at [`MIN_THRESHOLD`].
pub fn sample_thresholds(width: usize, height: usize, config: &SimConfig) -> Result<ThresholdMap> {
    config.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::param(format!("empty grid {width}x{height}")));
    }
    let normal = Normal::new(config.mu_c, config.sigma_c).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let values = (0..width * height)
        .map(|_| normal.sample(&mut rng).max(MIN_THRESHOLD))
        .collect();
    ThresholdMap::new(width, height, values)
}

/// Threshold-crossing event simulator.
///
/// Log intensity is interpolated linearly in time between frames. Each pixel
/// keeps a reference level `r`, starting at its first-frame value; whenever
/// the signal reaches `r + c` (or `r - c`) an event fires at the interpolated
/// time and `r` moves by exactly `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Simulator {
    pub eps: f64,
    pub refractory_us: u64,
}

impl Default for Simulator {
    fn default() -> Self {
        Simulator {
            eps: DEFAULT_LOG_EPS,
            refractory_us: 0,
        }
    }
}

impl From<&SimConfig> for Simulator {
    fn from(config: &SimConfig) -> Self {
        Simulator {
            eps: config.eps,
            refractory_us: config.refractory_us,
        }
    }
}

impl Simulator {
    pub fn simulate(&self, seq: &FrameSequence, thresholds: &ThresholdMap) -> Result<EventStream> {
        let (width, height) = seq.dims();
        if thresholds.dims() != (width, height) {
            return Err(Error::dims(format!(
                "frames are {width}x{height}, thresholds are {:?}",
                thresholds.dims()
            )));
        }
        let w16 = u16::try_from(width).map_err(|_| Error::param("frame width exceeds 16 bits"))?;
        let h16 = u16::try_from(height).map_err(|_| Error::param("frame height exceeds 16 bits"))?;

        let logs = seq
            .frames()
            .iter()
            .map(|f| log_intensity(f, self.eps))
            .collect::<Result<Vec<_>>>()?;
        let times = seq.timestamps();

        let mut events = Vec::new();
        let mut signal = vec![0.0; logs.len()];
        for y in 0..height {
            for x in 0..width {
                let idx = y * width + x;
                for (s, frame) in signal.iter_mut().zip(&logs) {
                    *s = frame[idx];
                }
                let c = thresholds.values()[idx];
                self.pixel_crossings(&signal, times, c, |t, p| {
                    events.push(Event::new(t, x as u16, y as u16, p))
                });
            }
        }
        EventStream::new(w16, h16, seq.t_start(), seq.t_end(), events)
    }

    /// Crossings for one pixel's log-intensity samples, in time order.
    pub fn pixel_crossings(&self, signal: &[f64], times: &[u64], c: f64, mut emit: impl FnMut(u64, Polarity)) {
        let mut reference = signal[0];
        let mut last_fired: Option<u64> = None;
        let mut fire = |t: u64, p: Polarity| {
            let blocked = self.refractory_us > 0 && last_fired.is_some_and(|prev| t < prev + self.refractory_us);
            if !blocked {
                emit(t, p);
                last_fired = Some(t);
            }
        };
        for k in 0..signal.len() - 1 {
            let (a, b) = (signal[k], signal[k + 1]);
            let (t0, t1) = (times[k] as f64, times[k + 1] as f64);
            let at = |level: f64| {
                let frac = ((level - a) / (b - a)).clamp(0.0, 1.0);
                (t0 + frac * (t1 - t0)).round() as u64
            };
            if b > a {
                while reference + c <= b + CROSSING_TOL {
                    reference += c;
                    fire(at(reference), Polarity::Positive);
                }
            } else if b < a {
                while reference - c >= b - CROSSING_TOL {
                    reference -= c;
                    fire(at(reference), Polarity::Negative);
                }
            }
        }
    }
}

/// [`Simulator::simulate`] without a refractory period.
pub fn simulate_events(seq: &FrameSequence, thresholds: &ThresholdMap, eps: f64) -> Result<EventStream> {
    Simulator { eps, refractory_us: 0 }.simulate(seq, thresholds)
}

/// Pixel-wise arithmetic mean of all frames in linear intensity.
pub fn synthesize_blur(seq: &FrameSequence) -> IntensityImage {
    let (width, height) = seq.dims();
    let first = seq.frames()[0].pixels();
    let n = seq.len() as f64;
    // accumulate offsets from the first frame so identical frames average exactly
    let mut acc = vec![0.0; first.len()];
    for frame in &seq.frames()[1..] {
        for ((a, &v), &v0) in acc.iter_mut().zip(frame.pixels()).zip(first) {
            *a += v - v0;
        }
    }
    let pixels = first.iter().zip(&acc).map(|(&v0, &d)| v0 + d / n).collect();
    IntensityImage::from_clamped(width, height, pixels).expect("mean of valid frames is finite")
}

/// Training-style augmentation: additive Gaussian noise on every cell, then
/// `hot_pixels` distinct pixels overwritten with `hot_value` in all channels.
pub fn augment_voxels(grid: &VoxelGrid, config: &SimConfig, seed: u64) -> Result<VoxelGrid> {
    if !(config.noise_std >= 0.0 && config.noise_std.is_finite()) {
        return Err(Error::param(format!(
            "noise stddev must be >= 0, got {}",
            config.noise_std
        )));
    }
    if !config.hot_value.is_finite() {
        return Err(Error::param("hot pixel value must be finite"));
    }
    let plane = grid.plane_len();
    if config.hot_pixels > plane {
        return Err(Error::param(format!(
            "{} hot pixels requested on a {plane}-pixel grid",
            config.hot_pixels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = grid.values().to_vec();
    if config.noise_std > 0.0 {
        let normal = Normal::new(0.0, config.noise_std).map_err(|e| Error::param(e.to_string()))?;
        for v in &mut values {
            *v += normal.sample(&mut rng);
        }
    }
    for pixel in index::sample(&mut rng, plane, config.hot_pixels) {
        for ch in 0..grid.channels() {
            values[ch * plane + pixel] = config.hot_value;
        }
    }
    VoxelGrid::new(grid.width(), grid.height(), grid.channels(), values)
}

pub mod scene {
    //! Synthetic test scenes.

    use super::*;

    /// A checker-textured square translating horizontally over a flat
    /// background.
    ///
    /// The background and the two texture tones are 8-bit values chosen so
    /// their log intensities sit just above multiples of `lattice_step` apart.
    /// With `lattice_step` equal to the simulator threshold, frame-to-frame
    /// changes then trigger whole numbers of events with almost no residual.
    #[derive(Debug, Clone, PartialEq)]
    pub struct TranslatingSquare {
        pub width: usize,
        pub height: usize,
        pub frames: usize,
        pub side: usize,
        pub travel: usize,
        pub cell: usize,
        pub background: u8,
        /// Lattice multiples of the two texture tones above the background.
        pub steps: (u32, u32),
        pub lattice_step: f64,
        pub eps: f64,
    }

    impl Default for TranslatingSquare {
        fn default() -> Self {
            TranslatingSquare {
                width: 128,
                height: 128,
                frames: 7,
                side: 48,
                travel: 12,
                cell: 8,
                background: 64,
                steps: (2, 4),
                lattice_step: 0.2,
                eps: DEFAULT_LOG_EPS,
            }
        }
    }

    impl TranslatingSquare {
        /// 8-bit tones `(background, low, high)`.
        pub fn tones(&self) -> Result<(u8, u8, u8)> {
            let level = |q: u8| (q as f64 / 255.0 + self.eps).ln();
            let base = level(self.background);
            let lowest_above = |k: u32, min_excess: f64| -> Result<(u8, f64)> {
                let target = base + k as f64 * self.lattice_step;
                (self.background..=255)
                    .map(|q| (q, level(q) - target))
                    .find(|&(_, excess)| excess >= min_excess)
                    .ok_or_else(|| Error::param(format!("tone {k} steps above background exceeds 8 bits")))
            };
            let (low, low_excess) = lowest_above(self.steps.0, 0.0)?;
            let (high, _) = lowest_above(self.steps.1, low_excess)?;
            Ok((self.background, low, high))
        }

        pub fn render(&self, t_start: u64, t_end: u64) -> Result<FrameSequence> {
            if self.frames < 2 || self.side == 0 || self.cell == 0 {
                return Err(Error::param("scene needs >= 2 frames and non-zero square/cell size"));
            }
            if self.side + self.travel > self.width || self.side > self.height {
                return Err(Error::param("square does not fit in the frame"));
            }
            let (bg, low, high) = self.tones()?;
            let to_unit = |q: u8| q as f64 / 255.0;
            let top = (self.height - self.side) / 2;
            let left0 = (self.width - self.side - self.travel) / 2;
            let mut frames = Vec::with_capacity(self.frames);
            for i in 0..self.frames {
                let shift = (i * self.travel + (self.frames - 1) / 2) / (self.frames - 1);
                let left = left0 + shift;
                let mut pixels = vec![to_unit(bg); self.width * self.height];
                for y in top..top + self.side {
                    for x in left..left + self.side {
                        let (u, v) = ((x - left) / self.cell, (y - top) / self.cell);
                        pixels[y * self.width + x] = to_unit(if (u + v) % 2 == 0 { low } else { high });
                    }
                }
                frames.push(IntensityImage::new(self.width, self.height, pixels)?);
            }
            FrameSequence::uniform(frames, t_start, t_end)
        }
    }
}
