//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evblur_core::attention::{
    eica_forward, grad_check, grad_check_with, AttentionParams, FeatureGrid, GradCheckConfig,
};
use evblur_core::edi::{edi_deblur, edi_sequence, EdiConfig, Threshold};
use evblur_core::metrics::{dssim_reduction, psnr, rmse_reduction};
use evblur_core::represent::{sbt, scer, scer_from_sbt, stack};
use evblur_core::simulate::scene::TranslatingSquare;
use evblur_core::simulate::{sample_thresholds, simulate_events, synthesize_blur, FrameSequence, SimConfig, Simulator};
use evblur_core::{EventStream, IntensityImage, ThresholdMap};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(
        elapsed < limit,
        format!("{detail}, {:.2}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()),
    )
}

/// (psnr, ssim, printed rmse %, printed dssim %) against the best method.
struct Row(f64, f64, f64, f64);

const GOPRO_BEST: (f64, f64) = (35.46, 0.972);
const GOPRO: [Row; 15] = [
    Row(28.70, 0.858, 54.1, 80.3),
    Row(29.06, 0.940, 52.1, 53.3),
    Row(29.08, 0.914, 52.0, 67.4),
    Row(29.55, 0.934, 49.4, 57.6),
    Row(30.26, 0.934, 45.1, 57.6),
    Row(31.02, 0.936, 40.0, 56.3),
    Row(31.20, 0.940, 38.8, 53.3),
    Row(31.60, 0.940, 35.9, 53.3),
    Row(31.79, 0.949, 34.5, 45.1),
    Row(31.85, 0.948, 34.0, 46.2),
    Row(32.06, 0.953, 32.4, 40.4),
    Row(32.66, 0.959, 27.6, 31.7),
    Row(32.71, 0.959, 27.1, 31.7),
    Row(32.99, 0.935, 24.8, 56.9),
    Row(33.69, 0.961, 18.4, 28.2),
];
const REBLUR_BEST: (f64, f64) = (38.12, 0.975);
const REBLUR: [Row; 5] = [
    Row(35.10, 0.961, 29.4, 35.9),
    Row(35.58, 0.965, 25.4, 28.6),
    Row(36.52, 0.964, 16.8, 30.6),
    Row(36.87, 0.970, 13.4, 16.7),
    Row(37.68, 0.973, 4.9, 7.4),
];

fn table_arithmetic() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cells = 0;
    for (best, rows) in [(GOPRO_BEST, &GOPRO[..]), (REBLUR_BEST, &REBLUR[..])] {
        for Row(p, s, rmse, dssim) in rows {
            let r = rmse_reduction(best.0, *p);
            let d = dssim_reduction(best.1, *s).map_err(|e| e.to_string())?;
            worst = worst.max((r - rmse).abs()).max((d - dssim).abs());
            cells += 2;
        }
    }
    let ok = worst <= 0.15;
    within(
        start.elapsed(),
        Duration::from_secs(1),
        format!("{cells} cells, max deviation {worst:.3} pp (tol 0.15)"),
    )
    .and_then(|d| check(ok, d))
}

fn edi_no_event_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for n in 1..=4 {
        for _ in 0..10 {
            let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
            let pixels = (0..w * h).map(|_| rng.random_range(0.0..=1.0)).collect();
            let blur = IntensityImage::new(w, h, pixels).unwrap();
            let stream = EventStream::empty(w as u16, h as u16, 0, rng.random_range(1..100_000)).unwrap();
            let config = EdiConfig {
                half_intervals: n,
                threshold: Threshold::Scalar(rng.random_range(0.05..0.5)),
                clamp: false,
            };
            let out = edi_deblur(&blur, &stream, &config).map_err(|e| e.to_string())?;
            if out
                .pixels()
                .iter()
                .zip(blur.pixels())
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Err(format!("output differs from blur at N={n}, {w}x{h}"));
            }
            checked += w * h;
        }
    }
    Ok(format!("{checked} pixels bit-identical over 40 images, N in 1..=4"))
}

fn round_trip() -> Outcome {
    let start = Instant::now();
    let seq = TranslatingSquare::default()
        .render(0, 60_000)
        .map_err(|e| e.to_string())?;
    let (w, h) = seq.dims();
    let blur = synthesize_blur(&seq);
    let middle = seq.middle().map_err(|e| e.to_string())?.clone();

    let uniform = ThresholdMap::uniform(w, h, 0.2).unwrap();
    let events = simulate_events(&seq, &uniform, 1e-3).map_err(|e| e.to_string())?;
    let sharp = edi_deblur(&blur, &events, &EdiConfig::default()).map_err(|e| e.to_string())?;
    let fixed = psnr(&sharp.to_intensity(), &middle).unwrap();

    let sim = SimConfig {
        seed: 2024,
        ..SimConfig::default()
    };
    let map = sample_thresholds(w, h, &sim).unwrap();
    let events = simulate_events(&seq, &map, sim.eps).map_err(|e| e.to_string())?;
    let config = EdiConfig {
        threshold: Threshold::Map(map),
        ..EdiConfig::default()
    };
    let sharp = edi_deblur(&blur, &events, &config).map_err(|e| e.to_string())?;
    let random = psnr(&sharp.to_intensity(), &middle).unwrap();
    let baseline = psnr(&blur, &middle).unwrap();

    within(
        start.elapsed(),
        Duration::from_secs(10),
        format!(
            "fixed c {fixed:.2} dB (>= 40), random c with oracle map {random:.2} dB (>= 38), blur alone {baseline:.2} dB"
        ),
    )
    .and_then(|d| check(fixed >= 40.0 && random >= 38.0, d))
}

fn sequence_mean_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = 1 + case % 3;
        let stream = oracle::random_stream(&mut rng, 24, 400, n);
        let (w, h) = stream.dims();
        let blur = IntensityImage::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
        let threshold = if rng.random_bool(0.5) {
            Threshold::Scalar(rng.random_range(0.05..0.5))
        } else {
            Threshold::Map(ThresholdMap::new(w, h, (0..w * h).map(|_| rng.random_range(0.05..0.5)).collect()).unwrap())
        };
        let config = EdiConfig {
            half_intervals: n,
            threshold,
            clamp: false,
        };
        let seq = edi_sequence(&blur, &stream, &config).map_err(|e| e.to_string())?;
        let count = seq.frames.len() as f64;
        for (pix, b) in blur.pixels().iter().enumerate() {
            let mean = seq.frames.iter().map(|f| f.pixels()[pix]).sum::<f64>() / count;
            worst = worst.max((mean - b).abs());
        }
    }
    check(
        worst <= 1e-6,
        format!("100 cases, max |mean - blur| = {worst:.2e} (tol 1e-6)"),
    )
}

struct Corpus {
    scer_mismatch: usize,
    from_sbt_checked: usize,
    from_sbt_mismatch: usize,
    stack_mismatch: usize,
    outer_checked: usize,
    outer_mismatch: usize,
    midpoint_streams: usize,
    midpoint_mismatch: usize,
}

/// Criteria 5 and 6 share one randomized corpus.
fn representation_corpus() -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut c = Corpus {
        scer_mismatch: 0,
        from_sbt_checked: 0,
        from_sbt_mismatch: 0,
        stack_mismatch: 0,
        outer_checked: 0,
        outer_mismatch: 0,
        midpoint_streams: 0,
        midpoint_mismatch: 0,
    };
    for case in 0..10_000 {
        let n = 1 + case % 3;
        let stream = oracle::random_stream(&mut rng, 64, 500, n);
        let grid = scer(&stream, n).unwrap();
        if grid.grid().values() != &oracle::scer_bruteforce(&stream, n)[..] {
            c.scer_mismatch += 1;
        }
        let bins = sbt(&stream, 2 * n).unwrap();
        if !oracle::hits_interior_boundary(&stream, n) {
            c.from_sbt_checked += 1;
            if scer_from_sbt(&bins).unwrap() != grid {
                c.from_sbt_mismatch += 1;
            }
        }

        let total = stack(&stream);
        let plane = total.plane_len();
        let summed: Vec<f64> = (0..plane)
            .map(|p| (0..2 * n).map(|k| bins.channel(k)[p]).sum())
            .collect();
        if total.values() != &summed[..] {
            c.stack_mismatch += 1;
        }
        // an event exactly at the midpoint lies in both closed outer intervals
        let mut at_mid = vec![0.0; plane];
        let mid = oracle::midpoint_events(&stream);
        for e in &mid {
            at_mid[e.y as usize * stream.dims().0 + e.x as usize] += e.p.sign() as f64;
        }
        let outer: Vec<f64> = (0..plane)
            .map(|p| grid.grid().channel(2 * n - 1)[p] - grid.grid().channel(0)[p])
            .collect();
        if mid.is_empty() {
            c.outer_checked += 1;
            if outer != total.values() {
                c.outer_mismatch += 1;
            }
        } else {
            c.midpoint_streams += 1;
            let expected: Vec<f64> = total.values().iter().zip(&at_mid).map(|(s, m)| s + m).collect();
            if outer != expected {
                c.midpoint_mismatch += 1;
            }
        }
    }
    c
}

fn scer_oracle(c: &Corpus) -> Outcome {
    check(
        c.scer_mismatch == 0 && c.from_sbt_mismatch == 0,
        format!(
            "10000 streams: {} SCER mismatches; scer_from_sbt on {} boundary-free streams: {} mismatches",
            c.scer_mismatch, c.from_sbt_checked, c.from_sbt_mismatch
        ),
    )
}

fn representation_identities(c: &Corpus) -> Outcome {
    check(
        c.stack_mismatch == 0 && c.outer_mismatch == 0 && c.midpoint_mismatch == 0,
        format!(
            "stack vs sum of SBT: {} mismatches in 10000; ch_2N-1 - ch_0 vs stack: {} mismatches in {} midpoint-free streams; \
             {} streams with midpoint events match stack + midpoint sum with {} mismatches",
            c.stack_mismatch, c.outer_mismatch, c.outer_checked, c.midpoint_streams, c.midpoint_mismatch
        ),
    )
}

fn simulator_crossings() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eps = 1e-3;
    let sim = Simulator::default();
    let (mut count_errors, mut worst_dt, mut total) = (0, 0.0f64, 0);
    for _ in 0..1000 {
        let frames = rng.random_range(2..=6);
        let c = rng.random_range(0.05..0.5);
        let rising = rng.random_bool(0.5);
        // strictly monotone intensities, kept clear of whole multiples of c
        let values = loop {
            let mut vals: Vec<f64> = (0..frames).map(|_| rng.random_range(0.0..=1.0)).collect();
            vals.sort_by(f64::total_cmp);
            if !rising {
                vals.reverse();
            }
            let logs: Vec<f64> = vals.iter().map(|v| (v + eps).ln()).collect();
            let ratio = (logs[frames - 1] - logs[0]).abs() / c;
            let monotone = logs.windows(2).all(|w| w[0] != w[1]);
            if monotone && (ratio - ratio.round()).abs() > 1e-6 {
                break vals;
            }
        };
        let images = values
            .iter()
            .map(|&v| IntensityImage::filled(1, 1, v).unwrap())
            .collect();
        let seq = FrameSequence::uniform(images, 0, rng.random_range(1_000..2_000_000)).unwrap();
        let events = sim.simulate(&seq, &ThresholdMap::uniform(1, 1, c).unwrap()).unwrap();
        // the simulator works from the stored values, so logs are recomputed from them
        let logs: Vec<f64> = seq.frames().iter().map(|f| (f.pixels()[0] + eps).ln()).collect();
        let expected = ((logs[frames - 1] - logs[0]).abs() / c).floor() as usize;
        let want = oracle::ramp_crossings(&logs, seq.timestamps(), c);
        assert_eq!(want.len(), expected);
        if events.len() != expected {
            count_errors += 1;
            continue;
        }
        for (e, t) in events.events().iter().zip(&want) {
            worst_dt = worst_dt.max((e.t as f64 - t).abs());
        }
        total += expected;
    }
    check(
        count_errors == 0 && worst_dt <= 1.0,
        format!("1000 ramps, {total} events, {count_errors} count mismatches, max |dt| = {worst_dt:.3} us (tol 1)"),
    )
}

fn attention_grad_check() -> Outcome {
    let start = Instant::now();
    let p = AttentionParams::random(8, 4, 2, 1, 17).map_err(|e| e.to_string())?;
    let report = grad_check(&p, (4, 4), 1e-5, 17).map_err(|e| e.to_string())?;
    let config = GradCheckConfig {
        seed: 17,
        ..GradCheckConfig::default()
    };
    let mutated = grad_check_with(&p, &config, |g| g.params.w_k[(1, 2)] *= 1.01).map_err(|e| e.to_string())?;
    let groups = report.groups.len();
    within(
        start.elapsed(),
        Duration::from_secs(5),
        format!(
            "{groups} groups, max rel err {:.2e} (tol 1e-5); mutated w_k rejected: {} (worst {})",
            report.max_rel_err, !mutated.pass, mutated.worst.0
        ),
    )
    .and_then(|d| {
        check(
            report.pass && groups == 18 && !mutated.pass && mutated.worst.0 == "w_k",
            d,
        )
    })
}

fn attention_map_size() -> Outcome {
    let p = AttentionParams::random(8, 4, 2, 1, 3).unwrap();
    let mut shapes = Vec::new();
    for side in [4, 8, 16, 32] {
        let img = FeatureGrid::random(side, side, 8, 1).unwrap();
        let evt = FeatureGrid::random(side, side, 8, 2).unwrap();
        let (_, map) = eica_forward(&img, &evt, &p).map_err(|e| e.to_string())?;
        shapes.push((side * side, map.shape()));
    }
    let ok = shapes.iter().all(|(_, s)| *s == (4, 4));
    let listed: Vec<String> = shapes.iter().map(|(hw, (r, c))| format!("hw={hw}: {r}x{c}")).collect();
    check(ok, listed.join(", "))
}

fn run_pipeline(bin: &str, frames: &Path, out: &Path) -> Result<(), String> {
    let status = Command::new(bin)
        .args(["pipeline", "--frames"])
        .arg(frames.join("*.pgm"))
        .arg("--out-dir")
        .arg(out)
        .args(["--seed", "99", "--noise-std", "0.1", "--hot-pixels", "5"])
        .env_remove("EVBLUR_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    Ok(())
}

fn pipeline_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_evblur");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let frames = dir.path().join("frames");
    let status = Command::new(bin)
        .args(["scene", "--out-dir"])
        .arg(&frames)
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err("scene rendering failed".into());
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(bin, &frames, &a)?;
    run_pipeline(bin, &frames, &b)?;
    let mut names: Vec<_> = fs::read_dir(&a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut differing = Vec::new();
    for name in &names {
        if fs::read(a.join(name)).unwrap() != fs::read(b.join(name)).ok().unwrap_or_default() {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    check(
        names.len() == 7 && differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", names.len()),
    )
}

fn main() {
    let corpus = representation_corpus();
    let criteria: Vec<Criterion> = vec![
        ("table arithmetic", Box::new(table_arithmetic)),
        ("EDI no-event identity", Box::new(edi_no_event_identity)),
        ("end-to-end round trip", Box::new(round_trip)),
        ("sequence-mean identity", Box::new(sequence_mean_identity)),
        ("SCER oracle equivalence", Box::new(|| scer_oracle(&corpus))),
        (
            "representation identities",
            Box::new(|| representation_identities(&corpus)),
        ),
        ("simulator crossing oracle", Box::new(simulator_crossings)),
        ("attention gradient check", Box::new(attention_grad_check)),
        ("attention map is c x c", Box::new(attention_map_size)),
        ("pipeline determinism", Box::new(pipeline_determinism)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
