use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evblur_core::io;
use tempfile::TempDir;

fn evblur() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evblur"));
    for (key, _) in std::env::vars() {
        if key.starts_with("EVBLUR_") {
            cmd.env_remove(key);
        }
    }
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn evblur")
}

fn render_scene(dir: &Path, travel: usize) -> PathBuf {
    let frames = dir.join("frames");
    let out = run(evblur()
        .args(["scene", "--width", "48", "--height", "40", "--travel"])
        .arg(travel.to_string())
        .arg("--out-dir")
        .arg(&frames));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    frames
}

fn pattern(frames: &Path) -> String {
    frames.join("*.pgm").to_string_lossy().into_owned()
}

fn report_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn help_and_version() {
    let out = run(evblur().arg("--version"));
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("evblur "));
    let out = run(evblur().arg("--help"));
    let help = String::from_utf8_lossy(&out.stdout).into_owned();
    for sub in [
        "simulate",
        "blur",
        "scer",
        "mask",
        "edi",
        "eval",
        "attn-check",
        "pipeline",
    ] {
        assert!(help.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn static_scene_restores_to_the_blur() {
    let dir = TempDir::new().unwrap();
    let frames = render_scene(dir.path(), 0);
    let out_dir = dir.path().join("out");
    let out = run(evblur()
        .args(["pipeline", "--frames", &pattern(&frames), "--out-dir"])
        .arg(&out_dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(out_dir.join("sharp.pgm")).unwrap(),
        fs::read(out_dir.join("blur.pgm")).unwrap()
    );
    let events = io::read_events(out_dir.join("events.evt1")).unwrap();
    assert!(events.is_empty());
    let mask = io::read_image(out_dir.join("mask.pgm")).unwrap();
    assert!(mask.pixels().iter().all(|&v| v == 1.0));
    let lines = report_lines(&out_dir.join("report.jsonl"));
    assert_eq!(lines[1]["image"], "sharp");
    assert_eq!(lines[1]["psnr"], 99.0);
    assert_eq!(lines[1]["ssim"], 1.0);
}

#[test]
fn moving_scene_beats_the_blur_and_stages_reproduce() {
    let dir = TempDir::new().unwrap();
    let frames = render_scene(dir.path(), 12);
    let out_dir = dir.path().join("out");
    let out = run(evblur()
        .args(["pipeline", "--frames", &pattern(&frames), "--sigma-c", "0", "--out-dir"])
        .arg(&out_dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = report_lines(&out_dir.join("report.jsonl"));
    let (blur, sharp) = (lines[0]["psnr"].as_f64().unwrap(), lines[1]["psnr"].as_f64().unwrap());
    assert!(sharp > blur + 10.0, "sharp {sharp} dB, blur {blur} dB");
    assert!(lines[1]["rmse_reduction"].as_f64().unwrap() > 0.0);

    let again = dir.path().join("again");
    fs::create_dir_all(&again).unwrap();
    let events = out_dir.join("events.evt1");
    let ok = |o: Output| assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    ok(run(evblur()
        .args(["blur", "--frames", &pattern(&frames), "--out"])
        .arg(again.join("blur.pgm"))));
    ok(run(evblur()
        .args(["simulate", "--frames", &pattern(&frames), "--sigma-c", "0", "--out"])
        .arg(again.join("events.evt1"))));
    ok(run(evblur()
        .arg("scer")
        .arg("--events")
        .arg(&events)
        .arg("--out")
        .arg(again.join("scer.vox"))));
    ok(run(evblur()
        .arg("mask")
        .arg("--scer")
        .arg(again.join("scer.vox"))
        .arg("--out")
        .arg(again.join("mask.pgm"))));
    ok(run(evblur()
        .arg("edi")
        .arg("--blur")
        .arg(out_dir.join("blur.pgm"))
        .arg("--events")
        .arg(&events)
        .arg("--out")
        .arg(again.join("sharp.pgm"))));
    for name in ["blur.pgm", "events.evt1", "scer.vox", "mask.pgm", "sharp.pgm"] {
        assert_eq!(
            fs::read(out_dir.join(name)).unwrap(),
            fs::read(again.join(name)).unwrap(),
            "{name}"
        );
    }

    let out = run(evblur()
        .arg("eval")
        .arg("--pred")
        .arg(out_dir.join("sharp.pgm"))
        .arg("--gt")
        .arg(frames.join("frame_003.pgm"))
        .args(["--baseline-psnr", "30", "--baseline-ssim", "0.9"]));
    ok(out.clone());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["psnr", "ssim", "rmse_reduction", "dssim_reduction"] {
        assert!(v[key].is_number(), "{key}");
    }
    assert_eq!(v["psnr"].as_f64().unwrap(), sharp);
}

#[test]
fn malformed_numeric_flag_is_a_usage_error() {
    let out = run(evblur().args(["pipeline", "--frames", "x/*.pgm", "--out-dir", "y", "--n", "three"]));
    assert_eq!(out.status.code(), Some(2));
    let out = run(evblur().args(["attn-check", "--tol", "tiny"]));
    assert_eq!(out.status.code(), Some(2));
    let out = run(evblur()
        .args(["pipeline", "--frames", "x/*.pgm", "--out-dir", "y"])
        .env("EVBLUR_SEED", "-4"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_frames_and_bad_config_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("none").join("*.pgm");
    let out = run(evblur()
        .args(["pipeline", "--frames"])
        .arg(&missing)
        .arg("--out-dir")
        .arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "not_a_key = 1\n").unwrap();
    let frames = render_scene(dir.path(), 0);
    let out = run(evblur()
        .arg("--config")
        .arg(&cfg)
        .args(["pipeline", "--frames", &pattern(&frames), "--out-dir"])
        .arg(dir.path().join("o")));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_failure_names_the_stage() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("events.evt1");
    fs::write(&bad, b"EVT1 truncated").unwrap();
    let blur = dir.path().join("blur.pgm");
    fs::write(&blur, b"P5\n2 2\n255\n\x00\x40\x80\xff").unwrap();
    let out = run(evblur()
        .arg("edi")
        .arg("--blur")
        .arg(&blur)
        .arg("--events")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("s.pgm")));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage events failed"));
}

fn scer_channels(dir: &Path, events: &Path, config: Option<&Path>, env_n: Option<&str>, flag_n: Option<&str>) -> usize {
    let target = dir.join("probe.vox");
    let mut cmd = evblur();
    if let Some(cfg) = config {
        cmd.arg("--config").arg(cfg);
    }
    cmd.arg("scer").arg("--events").arg(events).arg("--out").arg(&target);
    if let Some(n) = env_n {
        cmd.env("EVBLUR_N", n);
    }
    if let Some(n) = flag_n {
        cmd.args(["--n", n]);
    }
    let out = run(&mut cmd);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    io::read_voxels(&target).unwrap().channels()
}

#[test]
fn flags_beat_env_beat_file_beat_defaults() {
    let dir = TempDir::new().unwrap();
    let frames = render_scene(dir.path(), 4);
    let events = dir.path().join("e.evt1");
    let out = run(evblur()
        .args(["simulate", "--frames", &pattern(&frames), "--out"])
        .arg(&events));
    assert!(out.status.success());
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "n = 2\n").unwrap();

    assert_eq!(scer_channels(dir.path(), &events, None, None, None), 6);
    assert_eq!(scer_channels(dir.path(), &events, Some(&cfg), None, None), 4);
    assert_eq!(scer_channels(dir.path(), &events, Some(&cfg), Some("1"), None), 2);
    assert_eq!(scer_channels(dir.path(), &events, Some(&cfg), Some("1"), Some("5")), 10);
}

#[test]
fn attn_check_reports_json() {
    let dir = TempDir::new().unwrap();
    let params = dir.path().join("p.atp");
    let out = run(evblur()
        .args(["attn-check", "--seed", "3", "--params-out"])
        .arg(&params));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pass"], true);
    assert!(v["max_rel_err"].as_f64().unwrap() <= 1e-5);
    let out = run(evblur().args(["attn-check", "--params"]).arg(&params));
    assert!(out.status.success());
}

#[test]
fn mask_resize() {
    let dir = TempDir::new().unwrap();
    let frames = render_scene(dir.path(), 12);
    let events = dir.path().join("e.evt1");
    assert!(run(evblur()
        .args(["simulate", "--frames", &pattern(&frames), "--out"])
        .arg(&events))
    .status
    .success());
    let vox = dir.path().join("s.vox");
    assert!(
        run(evblur().arg("scer").arg("--events").arg(&events).arg("--out").arg(&vox))
            .status
            .success()
    );
    let mask = dir.path().join("m.pgm");
    let out = run(evblur()
        .arg("mask")
        .arg("--scer")
        .arg(&vox)
        .arg("--out")
        .arg(&mask)
        .args(["--resize", "24x20"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = io::read_image(&mask).unwrap();
    assert_eq!(img.dims(), (24, 20));
    assert!(img.pixels().contains(&0.0));
    let out = run(evblur()
        .arg("mask")
        .arg("--scer")
        .arg(&vox)
        .arg("--out")
        .arg(&mask)
        .args(["--resize", "24by20"]));
    assert_eq!(out.status.code(), Some(2));
}
