//! Fixtures shared by the criterion benches.

pub use evblur_core;

use evblur_core::simulate::scene::TranslatingSquare;
use evblur_core::simulate::{sample_thresholds, simulate_events, synthesize_blur, FrameSequence, SimConfig};
use evblur_core::{EventStream, IntensityImage};

pub struct Scene {
    pub frames: FrameSequence,
    pub blur: IntensityImage,
    pub events: EventStream,
    pub config: SimConfig,
}

/// The default translating square with thresholds drawn from `seed`.
pub fn scene(side: usize, seed: u64) -> Scene {
    let square = TranslatingSquare {
        width: side,
        height: side,
        side: side * 3 / 8,
        travel: side / 10,
        ..TranslatingSquare::default()
    };
    let frames = square.render(0, 60_000).expect("scene fits");
    let config = SimConfig {
        seed,
        ..SimConfig::default()
    };
    let (w, h) = frames.dims();
    let thresholds = sample_thresholds(w, h, &config).expect("valid config");
    let events = simulate_events(&frames, &thresholds, config.eps).expect("valid frames");
    let blur = synthesize_blur(&frames);
    Scene {
        frames,
        blur,
        events,
        config,
    }
}
