use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tammatte_cli::commands::{
    hash_tree, Manifest, CHECKPOINT, EFFECTIVE_CONFIG, LOSSES, MANIFEST, VAL_METRICS,
};
use tammatte_cli::config::RunConfig;
use tammatte_core::metrics::MetricsReport;

const SMALL: [&str; 10] = [
    "--set",
    "synth.train_clips=2",
    "--set",
    "synth.val_clips=1",
    "--set",
    "synth.frames=5",
    "--set",
    "synth.height=24",
    "--set",
    "synth.width=24",
];

fn tam_matte(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tam-matte"))
        .args(args)
        .env("TAM_MATTE_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tam_matte(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", p(out)];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    tam_matte(&args)
}

#[test]
fn synth_writes_manifest_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(synth(&a, &[]).status.success());
    assert!(synth(&b, &[]).status.success());
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(a.join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest.clips.len(), 3);
    assert!(a.join("train/clip_0001/alpha/0004.png").exists());
    assert!(a.join("val/clip_0000/flow/0000.tnsr").exists());
    for c in &manifest.clips {
        assert_eq!(c.files, hash_tree(&a.join(&c.path)).unwrap());
    }
    assert_eq!(hash_tree(&a).unwrap(), hash_tree(&b).unwrap());
}

#[test]
fn synth_refuses_non_empty_output_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert!(synth(&out, &[]).status.success());
    let again = synth(&out, &[]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert!(synth(&out, &["--force"]).status.success());
}

#[test]
fn short_clips_and_unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let short = synth(&dir.path().join("x"), &["--set", "synth.frames=4"]);
    assert!(!short.status.success());
    assert!(String::from_utf8_lossy(&short.stderr).contains("synth.frames"));
    let bad = synth(&dir.path().join("y"), &["--set", "synth.colour=1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("colour"));
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(synth(&data, &[]).status.success());
    let mut args = vec!["train", "--data", p(&data), "--out", p(&run)];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(&[
        "--set",
        "train.steps=2",
        "--set",
        "train.batch_size=2",
        "--set",
        "train.crop=16",
    ]);
    ok(&args);
    for f in [
        EFFECTIVE_CONFIG,
        LOSSES,
        CHECKPOINT,
        VAL_METRICS,
        "model.ckpt.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let effective: RunConfig =
        serde_json::from_str(&fs::read_to_string(run.join(EFFECTIVE_CONFIG)).unwrap()).unwrap();
    assert_eq!(effective.train.steps, 2);
    let reparsed = RunConfig::load(Some(&run.join(EFFECTIVE_CONFIG)), &[]).unwrap();
    assert_eq!(reparsed, effective);
    assert_eq!(
        fs::read_to_string(run.join(LOSSES))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let clip = data.join("val/clip_0000");
    let pred = dir.path().join("pred");
    ok(&[
        "infer",
        "--ckpt",
        p(&run.join(CHECKPOINT)),
        "--clip",
        p(&clip),
        "--dilate",
        "11",
        "--out",
        p(&pred),
    ]);
    assert_eq!(fs::read_dir(pred.join("alpha")).unwrap().count(), 5);
    let img = image::open(pred.join("alpha/0000.png")).unwrap();
    assert_eq!(img.color(), image::ColorType::L16);

    let csv = dir.path().join("m.csv");
    let out = ok(&[
        "eval",
        "--pred",
        p(&pred),
        "--gt",
        p(&clip),
        "--csv",
        p(&csv),
    ]);
    let report: MetricsReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report.sad.is_finite() && report.messdt.is_some());
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 6);
}

#[test]
fn eval_of_ground_truth_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(synth(&data, &[]).status.success());
    let clip = data.join("train/clip_0000");
    let out = ok(&["eval", "--pred", p(&clip), "--gt", p(&clip)]);
    let r: MetricsReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!([r.ssda, r.dtssd, r.mse, r.sad], [0.0; 4]);
    assert_eq!(r.messdt, Some(0.0));
}

#[test]
fn eval_names_mismatched_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(synth(&data, &[]).status.success());
    let clip = data.join("train/clip_0000");
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    fs::copy(clip.join("alpha/0000.png"), pred.join("0000.png")).unwrap();
    let out = tam_matte(&["eval", "--pred", p(&pred), "--gt", p(&clip)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&pred)));
}

#[test]
fn composite_with_opaque_alpha_returns_foreground() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(synth(&data, &[]).status.success());
    let clip = data.join("train/clip_0000");
    let ones = dir.path().join("ones.png");
    image::ImageBuffer::from_pixel(24, 24, image::Luma([u16::MAX]))
        .save(&ones)
        .unwrap();
    let out = dir.path().join("c.png");
    let fg = clip.join("fg/0002.png");
    ok(&[
        "composite",
        "--fg",
        p(&fg),
        "--bg",
        p(&clip.join("bg/0002.png")),
        "--alpha",
        p(&ones),
        "--out",
        p(&out),
    ]);
    assert_eq!(
        image::open(&out).unwrap().to_rgb8(),
        image::open(&fg).unwrap().to_rgb8()
    );

    // The generator's frames are composites of its own planes.
    let frame = dir.path().join("f.png");
    ok(&[
        "composite",
        "--fg",
        p(&fg),
        "--bg",
        p(&clip.join("bg/0002.png")),
        "--alpha",
        p(&clip.join("alpha/0002.png")),
        "--out",
        p(&frame),
    ]);
    let a = image::open(&frame).unwrap().to_rgb8();
    let b = image::open(clip.join("frames/0002.png")).unwrap().to_rgb8();
    assert!(a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .all(|(x, y)| x.abs_diff(*y) <= 1));
}

#[test]
fn gradcheck_exits_zero() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("model_width4"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = tam_matte(&[
        "infer",
        "--ckpt",
        "/nonexistent/model.ckpt",
        "--clip",
        p(dir.path()),
        "--out",
        p(dir.path()),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.ckpt"));
}
