use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn wedepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wedepth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = wedepth(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Returns the error category of a failed invocation.
fn fails(args: &[&str]) -> String {
    let out = wedepth(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    let rest = lines[0].strip_prefix("error: ").expect("error prefix");
    rest.split(':').next().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small run configuration over a freshly generated 32×32 dataset.
fn setup(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    ok(&["gen-data", "--out", s(&data), "--train", "4", "--test", "2", "--height", "32", "--width", "32"]);
    let cfg_path = root.join("run.json");
    ok(&["init-config", "--out", s(&cfg_path)]);
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["model"]["resolution"] = serde_json::json!([32, 32]);
    cfg["model"]["channels"] = serde_json::json!([4, 6, 8, 10]);
    cfg["model"]["enhancer"] = serde_json::json!({"patch": 8, "width": 16, "heads": 2, "layers": 4});
    cfg["model"]["patterns"] = 4.into();
    cfg["model"]["decoder_hidden"] = 4.into();
    cfg["schedule"]["epochs"] = 3.into();
    cfg["schedule"]["warmup_epochs"] = 1.into();
    cfg["schedule"]["batch_size"] = 2.into();
    cfg["data"] = s(&data).into();
    cfg["output"] = s(&root.join("run")).into();
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    cfg_path
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let summary: Value = serde_json::from_str(&ok(&["train", "--config", s(&cfg), "--deterministic"])).unwrap();
    assert_eq!(summary["steps"], 6);
    let ckpt = dir.path().join("run/checkpoint");
    assert!(ckpt.join("manifest.json").is_file());
    let log = fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let report: Value = serde_json::from_str(&ok(&["eval", "--checkpoint", s(&ckpt), "--json"])).unwrap();
    assert_eq!(report["valid_pixel_count"].as_u64().unwrap() > 0, true);
    let d1 = report["delta1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&d1));
    assert!(ok(&["eval", "--checkpoint", s(&ckpt), "--split", "train"]).contains("AbsRel"));

    let out = dir.path().join("pred");
    let rgb = dir.path().join("data/00004/rgb.wtns");
    ok(&["infer", "--checkpoint", s(&ckpt), "--image", s(&rgb), "--out", s(&out)]);
    assert!(out.read_dir().unwrap().count() > 0);

    let png = dir.path().join("img.png");
    image::RgbImage::from_fn(32, 32, |x, y| image::Rgb([x as u8 * 8, y as u8 * 8, 90]))
        .save(&png)
        .unwrap();
    ok(&["infer", "--checkpoint", s(&ckpt), "--image", s(&png), "--out", s(&dir.path().join("pred2"))]);
}

#[test]
fn resume_continues_the_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    ok(&["train", "--config", s(&cfg), "--max-steps", "3", "--out", s(&dir.path().join("a"))]);
    let summary: Value = serde_json::from_str(&ok(&[
        "train",
        "--config",
        s(&cfg),
        "--max-steps",
        "5",
        "--out",
        s(&dir.path().join("b")),
        "--resume",
        s(&dir.path().join("a/checkpoint")),
    ]))
    .unwrap();
    assert_eq!(summary["steps"], 5);
    let log = fs::read_to_string(dir.path().join("b/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn gradcheck_passes_on_the_plain_stack() {
    let out = ok(&[
        "gradcheck",
        "--no-partition",
        "--no-enhance",
        "--no-inject-patterns",
        "--no-inject-image",
    ]);
    assert!(out.lines().last().unwrap().starts_with("rel "));
}

#[test]
fn failures_print_one_categorized_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(fails(&["train", "--config", s(&missing)]), "io");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"seed\": 1, \"surprise\": true}").unwrap();
    assert_eq!(fails(&["train", "--config", s(&bad)]), "format");

    let cfg = setup(dir.path());
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["model"]["resolution"] = serde_json::json!([40, 40]);
    fs::write(&cfg, v.to_string()).unwrap();
    assert_eq!(fails(&["train", "--config", s(&cfg)]), "config");

    assert_eq!(fails(&["eval", "--checkpoint", s(&dir.path().join("none"))]), "io");
    assert_eq!(fails(&["gradcheck", "--eps=-1"]), "harness");
    assert_eq!(fails(&["train", "--bogus"]), "usage");
}
