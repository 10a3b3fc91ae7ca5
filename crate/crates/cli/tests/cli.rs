//! End-to-end runs of the `weathercity` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use weathercity_core::buffer::ColorImage;
use weathercity_core::io::{load_depth, load_image, save_image, BitDepth, Manifest};
use weathercity_core::pipeline::{CameraEntry, CameraPath};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_weathercity"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
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

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["make-synthetic", "--out-dir", s(dir), "--gaussians", "120", "--width", "32", "--height", "24"];
    args.extend_from_slice(extra);
    ok(&args);
}

/// Every file under `dir`, relative path → bytes.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Camera path with one pinned camera per manifest view.
fn cameras_from_manifest(manifest: &Path, out: &Path) {
    let m = Manifest::load(manifest).unwrap();
    let path = CameraPath {
        cameras: m
            .views
            .iter()
            .filter(|v| !v.held_out)
            .map(|v| CameraEntry {
                frame: Some(v.frame),
                camera: v.camera.clone(),
            })
            .collect(),
    };
    std::fs::write(out, path.to_toml()).unwrap();
}

#[test]
fn make_synthetic_is_deterministic_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, &["--frames", "5", "--seed", "3"]);
    synth(&b, &["--frames", "5", "--seed", "3"]);
    assert_eq!(tree(&a), tree(&b));
    let m = Manifest::load(a.join("manifest.toml")).unwrap();
    let mut frames: Vec<usize> = m.views.iter().map(|v| v.frame).collect();
    frames.dedup();
    frames.sort();
    frames.dedup();
    assert_eq!(frames, vec![0, 1, 2, 3, 4]);

    let c = tmp.path().join("c");
    synth(&c, &["--frames", "5", "--seed", "4"]);
    assert_ne!(tree(&a), tree(&c));
    // Refuses to mix into an existing dataset.
    let again = run(&["make-synthetic", "--out-dir", s(&a)]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn zero_iteration_training_reproduces_the_init_archive() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--frames", "3"]);
    let out = tmp.path().join("out.wcty");
    ok(&[
        "train", "--manifest", s(&data.join("manifest.toml")), "--scene-init", s(&data.join("init.wcty")),
        "--out", s(&out), "--iterations", "0",
    ]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(data.join("init.wcty")).unwrap());
    let resumed = tmp.path().join("resumed.wcty");
    ok(&[
        "train", "--manifest", s(&data.join("manifest.toml")), "--scene-init", s(&out), "--out", s(&resumed),
        "--iterations", "0",
    ]);
    assert_eq!(std::fs::read(&resumed).unwrap(), std::fs::read(&out).unwrap());
}

#[test]
fn training_writes_archive_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--frames", "3"]);
    let config = tmp.path().join("train.toml");
    std::fs::write(&config, "iterations = 25\nseed = 4\nparallel = false\n").unwrap();
    let out = tmp.path().join("nested/out.wcty");
    let res = ok(&[
        "train", "--manifest", s(&data.join("manifest.toml")), "--scene-init", s(&data.join("init.wcty")),
        "--config", s(&config), "--out", s(&out),
    ]);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert_eq!(stdout.matches("held_out").count(), 3, "{stdout}");
    let metrics = std::fs::read_to_string(tmp.path().join("nested/out.wcty.metrics.log")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.starts_with("step=")).count(), 25);
    assert_ne!(std::fs::read(&out).unwrap(), std::fs::read(data.join("init.wcty")).unwrap());

    // A config naming a weather the scene lacks is an input error, and
    // nothing is written.
    std::fs::write(&config, "iterations = 5\nweathers = [\"foggy\"]\n").unwrap();
    let bad = tmp.path().join("bad/out.wcty");
    let res = run(&[
        "train", "--manifest", s(&data.join("manifest.toml")), "--scene-init", s(&data.join("init.wcty")),
        "--config", s(&config), "--out", s(&bad),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!tmp.path().join("bad").exists());
}

#[test]
fn render_is_reproducible_and_fog_grows_with_depth() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--frames", "3"]);
    let cams = tmp.path().join("cams.toml");
    cameras_from_manifest(&data.join("manifest.toml"), &cams);
    let scene = data.join("truth.wcty");

    let clear = tmp.path().join("clear");
    ok(&["render", "--scene", s(&scene), "--cameras", s(&cams), "--out-dir", s(&clear), "--depth"]);
    let names: Vec<PathBuf> = tree(&clear).into_iter().map(|(p, _)| p).collect();
    assert_eq!(names.len(), 6, "{names:?}");

    let snowy = tmp.path().join("snowy.toml");
    std::fs::write(
        &snowy,
        "weather = \"snowy\"\nframes = 4\n[snow]\ncount = 3000\n[wind]\nmagnitude = 2.0\ntilt = 0.2\n",
    )
    .unwrap();
    let (a, b) = (tmp.path().join("snow_a"), tmp.path().join("snow_b"));
    for dir in [&a, &b] {
        ok(&[
            "render", "--scene", s(&scene), "--cameras", s(&cams), "--timeline", s(&snowy), "--out-dir", s(dir),
            "--seed", "9", "--deterministic",
        ]);
    }
    assert_eq!(tree(&a).len(), 4);
    assert_eq!(tree(&a), tree(&b));
    let c = tmp.path().join("snow_c");
    ok(&[
        "render", "--scene", s(&scene), "--cameras", s(&cams), "--timeline", s(&snowy), "--out-dir", s(&c), "--seed",
        "10",
    ]);
    assert_ne!(tree(&a), tree(&c));

    // Fog: the fraction of the original color left at a pixel must fall
    // as its depth grows.
    let foggy = tmp.path().join("foggy.toml");
    std::fs::write(&foggy, "[fog]\ndensity = 0.2\ncolor = [0.8, 0.8, 0.85]\n").unwrap();
    let fogged = tmp.path().join("fogged");
    ok(&["render", "--scene", s(&scene), "--cameras", s(&cams), "--timeline", s(&foggy), "--out-dir", s(&fogged)]);
    let plain = load_image(clear.join("frame_00000.png")).unwrap();
    let fog = load_image(fogged.join("frame_00000.png")).unwrap();
    let depth = load_depth(clear.join("depth/frame_00000.wdep")).unwrap();
    let fog_color = [0.8, 0.8, 0.85];
    let mut samples: Vec<(f64, f64)> = Vec::new();
    for y in 0..plain.height {
        for x in 0..plain.width {
            let (p, f) = (plain.get(x, y), fog.get(x, y));
            let c = (0..3).max_by(|&i, &j| (p[i] - fog_color[i]).abs().total_cmp(&(p[j] - fog_color[j]).abs())).unwrap();
            let gap = p[c] - fog_color[c];
            if depth.get(x, y) > 0.5 && gap.abs() > 0.2 {
                samples.push((depth.get(x, y), (f[c] - fog_color[c]) / gap));
            }
        }
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(samples.len() > 20, "{} usable pixels", samples.len());
    let k = samples.len() / 4;
    let near: f64 = samples[..k].iter().map(|s| s.1).sum::<f64>() / k as f64;
    let far: f64 = samples[samples.len() - k..].iter().map(|s| s.1).sum::<f64>() / k as f64;
    assert!(far < near - 0.05, "near keeps {near:.3}, far keeps {far:.3}");
    // Closed form at the median sample (8-bit output).
    let (d, kept) = samples[samples.len() / 2];
    assert!((kept - (-0.2 * d).exp()).abs() < 0.05, "depth {d}: kept {kept}");
}

#[test]
fn render_failures_leave_no_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--frames", "3"]);
    let cams = tmp.path().join("cams.toml");
    cameras_from_manifest(&data.join("manifest.toml"), &cams);
    let scene = data.join("truth.wcty");

    // Validation failure: unknown node in an edit.
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[[edits]]\nframe = 1\nnode = \"ghost\"\nvisible = false\n").unwrap();
    let out = tmp.path().join("never");
    let res = run(&["render", "--scene", s(&scene), "--cameras", s(&cams), "--timeline", s(&bad), "--out-dir", s(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("ghost"));
    assert!(!out.exists());

    // Runtime failure on the second frame: its path is a directory.
    let out = tmp.path().join("partial");
    std::fs::create_dir_all(out.join("frame_00001.png")).unwrap();
    let res = run(&["render", "--scene", s(&scene), "--cameras", s(&cams), "--out-dir", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.join("frame_00000.png").exists());

    // Missing inputs and bad flags are input errors.
    let res = run(&["render", "--scene", "/nonexistent.wcty", "--cameras", s(&cams), "--out-dir", s(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(run(&["render", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

fn write_set(dir: &Path, images: &[ColorImage]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, img) in images.iter().enumerate() {
        save_image(img, dir.join(format!("{i:03}.png")), BitDepth::Sixteen).unwrap();
    }
}

#[test]
fn eval_reports_psnr_and_ssim() {
    let tmp = tempfile::tempdir().unwrap();
    let images: Vec<ColorImage> = (0..3)
        .map(|k| ColorImage::from_fn(24, 16, |x, y| [0.1 + 0.02 * x as f64, 0.2 + 0.03 * y as f64, 0.1 * k as f64 + 0.3]))
        .collect();
    let (t, same, shifted) = (tmp.path().join("t"), tmp.path().join("same"), tmp.path().join("shift"));
    write_set(&t, &images);
    write_set(&same, &images);
    write_set(&shifted, &images.iter().map(|i| i.map(|v| v + 0.1)).collect::<Vec<_>>());

    let res = ok(&["eval", "--renders", s(&same), "--targets", s(&t)]);
    let text = String::from_utf8_lossy(&res.stdout).to_string();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r[3], "inf");
        assert_eq!(r[4], "1.000000");
    }
    assert_eq!(std::fs::read_to_string(same.join("eval_report.txt")).unwrap(), text);

    let report = tmp.path().join("report.txt");
    let res = ok(&["eval", "--renders", s(&shifted), "--targets", s(&t), "--report", s(&report)]);
    let text = String::from_utf8_lossy(&res.stdout).to_string();
    for line in text.lines().skip(1) {
        let psnr: f64 = line.split('\t').nth(3).unwrap().parse().unwrap();
        assert!((psnr - 20.0).abs() < 0.01, "{line}");
    }
    assert!(report.exists());

    std::fs::remove_file(t.join("002.png")).unwrap();
    let res = run(&["eval", "--renders", s(&same), "--targets", s(&t)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("mismatch"));
}
