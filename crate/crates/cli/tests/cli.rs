use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
figures = 2
tessellation = 1
train_frames = 3
test_frames = 2
width = 96
height = 96

[mix]
batch_size = 4
crop_size = 24

[net]
crop_size = 24
blocks = [{ channels = 8, stride = 2 }, { channels = 8, stride = 2 }]

[training]
steps = 4
"#;

fn densesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densesim")).args(args).output().expect("run densesim")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn figures_transfer_dataset_preview_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let figs = dir.path().join("figs");
    let o = densesim(&["gen-figures", "--config", &cfg, "--out", &s(&figs)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(figs.join("reference.obj").is_file() && figs.join("figure_001.rig.json").is_file());

    let out = dir.path().join("uv/figure_000.obj");
    let o = densesim(&[
        "transfer-uv",
        "--reference",
        &s(&figs.join("reference.obj")),
        "--figure",
        &s(&figs.join("figure_000.obj")),
        "--out",
        &s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&out).unwrap().contains("\nvt "));

    let data = dir.path().join("data");
    let o = densesim(&["gen-dataset", "--config", &cfg, "--out", &s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let frame = data.join("sim_test/00000");
    assert!(frame.join("uv.bin").is_file());
    assert!(!data.join("real_train/00000/uv.bin").exists());

    let prev = dir.path().join("preview");
    let o = densesim(&["preview", "--frame", &s(&frame), "--out", &s(&prev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(prev.join("uv.png").is_file() && prev.join("normals.png").is_file());

    // Ground truth scored against itself.
    let report = dir.path().join("report.json");
    let gt = s(&data.join("sim_test"));
    let o = densesim(&["eval", "--pred-dir", &gt, "--gt-dir", &gt, "--ref-mesh", &s(&figs.join("reference.obj")), "--report", &s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["gps_mean"].as_f64(), Some(1.0));
    assert_eq!(r["gps_ap"].as_f64(), Some(1.0));
    assert_eq!(r["iou_mean"].as_f64(), Some(1.0));
    assert_eq!(r["oks_mean"].as_f64(), Some(1.0));
    assert_eq!(r["uv_l2_mean"].as_f64(), Some(0.0));
    assert_eq!(r["add_degrees"].as_f64(), Some(0.0));
}

#[test]
fn train_toy_writes_checkpoint_csv_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("run/model.dsck");
    let o = densesim(&["train-toy", "--config", &cfg, "--steps", "5", "--seed", "3", "--out", &s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&std::fs::read(&ckpt).unwrap()[..4], b"DSCK");
    let csv = std::fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(ckpt.with_extension("json").is_file());

    let report = dir.path().join("eval.json");
    let o = densesim(&["eval", "--checkpoint", &s(&ckpt), "--config", &cfg, "--report", &s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ablate_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("abl");
    let o = densesim(&["ablate", "--config", &cfg, "--axis", "mix_ratio", "--values", "1.0,0.5,0.0", "--out", &s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("ablation_mix_ratio.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("mix_ratio,ADD,L2,IOU,OKS"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = s(&dir.path().join("x"));
    // Empty ablation list and unknown axis are configuration errors.
    assert_eq!(code(&densesim(&["ablate", "--config", &cfg, "--axis", "mix_ratio", "--values", "--out", &out])), 2);
    assert_eq!(code(&densesim(&["ablate", "--config", &cfg, "--axis", "depth", "--values", "1", "--out", &out])), 2);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[mix]\nsim_fraction = 1.5\n").unwrap();
    assert_eq!(code(&densesim(&["gen-dataset", "--config", &s(&bad), "--out", &out])), 2);
    assert_eq!(code(&densesim(&["no-such-command"])), 2);
    // Missing inputs are data errors.
    assert_eq!(code(&densesim(&["preview", "--frame", &s(&dir.path().join("nothing")), "--out", &out])), 3);
    let junk = dir.path().join("junk.dsck");
    std::fs::write(&junk, b"DSCKjunk").unwrap();
    assert_eq!(code(&densesim(&["eval", "--checkpoint", &s(&junk), "--config", &cfg, "--report", &out])), 3);
}

#[test]
fn dataset_from_figure_directory_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let figs = dir.path().join("figs");
    let o = densesim(&["gen-figures", "--config", &cfg, "--count", "3", "--seed", "5", "--out-dir", &s(&figs)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(figs.join("figure_002.obj").is_file() && !figs.join("figure_003.obj").exists());

    // Landmarks given explicitly match the sidecar, so the outputs agree.
    let fig = s(&figs.join("figure_001.obj"));
    let a = dir.path().join("a/figure_001.obj");
    let b = dir.path().join("b/figure_001.obj");
    let reference = s(&figs.join("reference.obj"));
    let o = densesim(&["transfer-uv", "--ref", &reference, "--target", &fig, "--out", &s(&a)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lm = s(&figs.join("figure_001.landmarks"));
    let o = densesim(&["transfer-uv", "--ref", &reference, "--target", &fig, "--landmarks", &lm, "--out", &s(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let data = dir.path().join("data");
    let o = densesim(&[
        "gen-dataset", "--config", &cfg, "--figures-dir", &s(&figs), "--count", "2", "--width", "80", "--height", "64",
        "--fov", "50", "--out-dir", &s(&data),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("sim_train/00001").is_dir() && !data.join("sim_train/00002").exists());
    let ann: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("sim_test/00000/annotations.json")).unwrap()).unwrap();
    assert_eq!(ann["width"].as_u64(), Some(80));
    assert_eq!(ann["height"].as_u64(), Some(64));
    assert_eq!(ann["camera"]["fov_y"].as_f64(), Some(50.0));
    for inst in ann["instances"].as_array().unwrap() {
        assert!(inst["figure"].as_u64().unwrap() < 3);
    }

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = densesim(&["gen-dataset", "--config", &cfg, "--figures-dir", &s(&empty), "--out", &s(&data)]);
    assert_eq!(code(&o), 3);
}
