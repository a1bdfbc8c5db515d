use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[dataset]
counts = { U = 200, A = 200, B = 100, S = 100, T = 100, O = 100 }

[train]
iterations = 30
lr = 1e-3
report_interval = 10
model = { hidden_sizes = [16, 16], omega_0 = 1.0, seed = 0 }
batch = { types = { U = 16, A = 16, B = 8, S = 8, T = 8, O = 8 }, reg_only = 4 }

[camera]
width = 16
height = 12

[vstar]
hidden_sizes = [16, 16]
iterations = 5
points_per_step = 16

[pointcloud]
n_p = 40
n_v = 8

[validate]
n_samples = 100
"#;

fn pddf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pddf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = pddf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = s(&cfg).to_string();
    (dir, cfg)
}

#[test]
fn dataset_then_info() {
    let (dir, cfg) = setup();
    let data = dir.path().join("sphere.ddfd");
    let summary = ok_json(&[
        "--config",
        &cfg,
        "extract-data",
        "--mesh",
        "analytic:sphere:0.9",
        "--out",
        s(&data),
    ]);
    assert_eq!(summary["samples"], 800);
    let info = ok_json(&["info", s(&data)]);
    assert_eq!(info["kind"], "dataset");
    assert_eq!(info["samples"], 800);
}

#[test]
fn fit_is_byte_identical_across_thread_counts() {
    let (dir, cfg) = setup();
    let run = |threads: &str, name: &str| {
        let ckpt = dir.path().join(format!("{name}.ddfm"));
        let log = dir.path().join(format!("{name}.jsonl"));
        ok_json(&[
            "--config",
            &cfg,
            "--threads",
            threads,
            "fit",
            "--mesh",
            "analytic:sphere:0.9",
            "--out",
            s(&ckpt),
            "--log",
            s(&log),
        ]);
        (std::fs::read(ckpt).unwrap(), std::fs::read(log).unwrap())
    };
    let a = run("1", "a");
    assert_eq!(a, run("1", "b"));
    assert_eq!(a, run("3", "c"));
    let info = ok_json(&["info", s(&dir.path().join("a.ddfm"))]);
    assert_eq!(info["kind"], "checkpoint");
}

#[test]
fn seed_flag_changes_the_fit() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a.ddfm");
    let b = dir.path().join("b.ddfm");
    ok_json(&[
        "--config",
        &cfg,
        "--seed",
        "1",
        "fit",
        "--mesh",
        "analytic:sphere:0.9",
        "--out",
        s(&a),
    ]);
    ok_json(&[
        "--config",
        &cfg,
        "--seed",
        "2",
        "fit",
        "--mesh",
        "analytic:sphere:0.9",
        "--out",
        s(&b),
    ]);
    assert_ne!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn render_analytic_sphere() {
    let (dir, cfg) = setup();
    let stem = dir.path().join("view");
    let summary = ok_json(&[
        "--config",
        &cfg,
        "render",
        "--model",
        "analytic:sphere:1",
        "--camera",
        "0,0,3",
        "--out",
        s(&stem),
        "--maps",
        "depth,xi,normals,curvature",
    ]);
    assert_eq!(summary["written"].as_array().unwrap().len(), 5);
    for ext in [
        "depth.pfm",
        "xi.pfm",
        "normals.png",
        "mean_curvature.pfm",
        "gaussian_curvature.pfm",
    ] {
        assert!(dir.path().join(format!("view.{ext}")).exists(), "{ext}");
    }
    let depth = pddf::renderer::read_pfm(std::fs::File::open(dir.path().join("view.depth.pfm")).unwrap()).unwrap();
    assert_eq!((depth.width, depth.height), (16, 12));
    assert!(min_value(&depth.data) > 1.9);
}

fn min_value(data: &[f32]) -> f32 {
    data.iter().copied().fold(f32::INFINITY, f32::min)
}

#[test]
fn compose_render_two_spheres() {
    let (dir, cfg) = setup();
    let scene = dir.path().join("scene.json");
    std::fs::write(
        &scene,
        r#"[
            {"source": {"analytic": {"shape": "sphere", "center": [0, 0, 0], "radius": 1}}, "scale": 0.3, "translation": [-0.4, 0, 0]},
            {"source": {"analytic": {"shape": "sphere", "center": [0, 0, 0], "radius": 1}}, "scale": 0.3, "translation": [0.4, 0, 0]}
        ]"#,
    )
    .unwrap();
    let stem = dir.path().join("scene");
    let summary = ok_json(&[
        "--config",
        &cfg,
        "compose-render",
        "--scene",
        s(&scene),
        "--out",
        s(&stem),
    ]);
    assert_eq!(summary["parts"], 2);
    assert!(dir.path().join("scene.depth.pfm").exists());
}

#[test]
fn point_cloud_metrics_and_udf_are_deterministic() {
    let (dir, cfg) = setup();
    let run = |threads: &str, name: &str| {
        let pc = dir.path().join(format!("{name}.xyz"));
        ok_json(&[
            "--config",
            &cfg,
            "--threads",
            threads,
            "sample-pc",
            "--model",
            "analytic:sphere:0.9",
            "--out",
            s(&pc),
        ]);
        std::fs::read(pc).unwrap()
    };
    let a = run("1", "a");
    assert_eq!(a, run("4", "b"));
    let m = ok_json(&[
        "metrics",
        "--pred",
        s(&dir.path().join("a.xyz")),
        "--ref",
        s(&dir.path().join("b.xyz")),
    ]);
    assert_eq!(m["chamfer_x1000"], 0.0);
    assert_eq!(m["f_tau_x100"], 100.0);

    let pts = dir.path().join("a.xyz");
    let udf = |threads: &str, name: &str| {
        let vs = dir.path().join(format!("{name}.ddfv"));
        let out = dir.path().join(format!("{name}.udf"));
        ok_json(&[
            "--config",
            &cfg,
            "--threads",
            threads,
            "extract-udf",
            "--model",
            "analytic:sphere:0.9",
            "--out",
            s(&vs),
            "--points",
            s(&pts),
            "--udf-out",
            s(&out),
        ]);
        (std::fs::read(vs).unwrap(), std::fs::read(out).unwrap())
    };
    assert_eq!(udf("1", "u1"), udf("2", "u2"));
}

#[test]
fn validate_exit_codes() {
    let (dir, cfg) = setup();
    let summary = ok_json(&["--config", &cfg, "validate", "--model", "analytic:sphere:0.9"]);
    assert_eq!(summary["pass"], true);
    assert_eq!(summary["reports"].as_array().unwrap().len(), 4);

    let ckpt = dir.path().join("m.ddfm");
    ok_json(&[
        "--config",
        &cfg,
        "fit",
        "--mesh",
        "analytic:sphere:0.9",
        "--out",
        s(&ckpt),
    ]);
    let out = pddf(&[
        "--config",
        &cfg,
        "validate",
        "--model",
        s(&ckpt),
        "--checks",
        "gradnorm",
    ]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    let expected = if summary["pass"] == true { 0 } else { 1 };
    assert_eq!(out.status.code(), Some(expected));
}

#[test]
fn errors_map_to_exit_codes() {
    let (dir, cfg) = setup();
    let code = |args: &[&str]| pddf(args).status.code();
    assert_eq!(code(&["render", "--model", "analytic:cone:1", "--out", "x"]), Some(2));
    assert_eq!(
        code(&[
            "render",
            "--model",
            "analytic:sphere:1",
            "--camera",
            "0,0",
            "--out",
            "x"
        ]),
        Some(2)
    );
    assert_eq!(
        code(&["validate", "--model", "analytic:sphere:1", "--checks", "nope"]),
        Some(2)
    );
    assert_eq!(code(&["info", s(&dir.path().join("missing"))]), Some(3));
    let junk = dir.path().join("junk.ddfm");
    std::fs::write(&junk, b"DDFM1\nnot json").unwrap();
    assert_eq!(code(&["render", "--model", s(&junk), "--out", "x"]), Some(3));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nnonsense = 1\n").unwrap();
    assert_eq!(code(&["--config", s(&bad), "info", &cfg]), Some(2));
}
