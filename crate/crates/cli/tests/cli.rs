use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 7

[model]
frames = 14
base_width = 8
latent_downscale = 4
ref_embed_dim = 8
resolutions = [8, 12]
vae_width = 8
vae_lora_rank = 2
disc_width = 4

[sampler]
steps = 4

[data]
count = 1
held_out = 2
frames = 40
height = 32
width = 32
"#;

fn bivsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bivsr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bivsr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Config, synthetic dataset and an untrained model in a fresh directory.
fn workspace() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    ok(&["--config", s(&cfg), "synth-data", "--out", s(&dir.path().join("data"))]);
    let model = dir.path().join("model.ckpt");
    ok(&["--config", s(&cfg), "init", "--out", s(&model)]);
    (dir, cfg, model)
}

fn frame_bytes(dir: &Path) -> Vec<Vec<u8>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    paths.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

#[test]
fn long_upscale_keeps_every_frame_and_evaluates() {
    let (dir, cfg, model) = workspace();
    let video = dir.path().join("data/held_out/0000");
    let out = dir.path().join("out");
    ok(&[
        "--config", s(&cfg), "upscale", "--model", s(&model), "--input", s(&video.join("lq")),
        "--output", s(&out), "--long", "--enhancer", &format!("oracle:{}", s(&video.join("hq"))),
    ]);
    let frames = frame_bytes(&out);
    assert_eq!(frames.len(), 40);
    assert_eq!(std::fs::read_dir(video.join("lq")).unwrap().count(), 40);

    let report = dir.path().join("report.json");
    ok(&[
        "--config", s(&cfg), "eval", "--pred", s(&out), "--gt", s(&video), "--flows", s(&video),
        "--report", s(&report),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    for key in ["\"psnr\"", "\"ssim\"", "\"e_warp\"", "\"config_hash\""] {
        assert!(text.contains(key), "{key} missing from {text}");
    }
}

#[test]
fn same_seed_gives_identical_frames_and_effective_config_reproduces_them() {
    let (dir, cfg, model) = workspace();
    // A single 14-frame clip cut from a held-out video.
    let clip = dir.path().join("clip");
    std::fs::create_dir_all(&clip).unwrap();
    let lq = dir.path().join("data/held_out/0001/lq");
    for i in 1..=14 {
        let name = format!("{i:06}.png");
        std::fs::copy(lq.join(&name), clip.join(&name)).unwrap();
    }
    let run = |config: &Path, out: &str| {
        let out = dir.path().join(out);
        ok(&[
            "--config", s(config), "upscale", "--model", s(&model), "--input", s(&clip), "--output", s(&out),
            "--seed", "3", "--tile-size", "4", "--tile-overlap", "2",
        ]);
        frame_bytes(&out)
    };
    let a = run(&cfg, "a");
    let b = run(&cfg, "b");
    assert_eq!(a.len(), 14);
    assert_eq!(a, b);

    let effective = dir.path().join("effective.toml");
    std::fs::write(&effective, ok(&["--config", s(&cfg), "print-config"]).stdout).unwrap();
    assert_eq!(run(&effective, "c"), a);

    let other = dir.path().join("d");
    ok(&[
        "--config", s(&cfg), "upscale", "--model", s(&model), "--input", s(&clip), "--output", s(&other),
        "--seed", "4", "--tile-size", "4", "--tile-overlap", "2",
    ]);
    assert_ne!(frame_bytes(&other), a);
}

#[test]
fn frame_by_frame_with_oracle_returns_ground_truth() {
    let (dir, cfg, _) = workspace();
    let video = dir.path().join("data/held_out/0000");
    let out = dir.path().join("fbf");
    ok(&[
        "--config", s(&cfg), "upscale", "--frame-by-frame", "--input", s(&video.join("lq")),
        "--output", s(&out), "--enhancer", &format!("oracle:{}", s(&video.join("hq"))),
    ]);
    assert_eq!(frame_bytes(&out), frame_bytes(&video.join("hq")));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = bivsr(&["upscale", "--model", s(&missing), "--input", s(&missing), "--output", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(bivsr(&["upscale", "--bogus"]).status.code(), Some(2));
    assert_eq!(bivsr(&["--config", s(&missing), "print-config"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let frames = dir.path().join("frames");
    std::fs::create_dir_all(&frames).unwrap();
    let out = bivsr(&["upscale", "--model", s(&bad), "--input", s(&frames), "--output", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}
