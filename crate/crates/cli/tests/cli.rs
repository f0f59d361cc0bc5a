use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn hoirecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoirecon"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hoirecon(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(out: &Path, preset: &str, stride: &str) {
    ok(&["--out", s(out), "gen", "--preset", preset, "--render-stride", stride]);
}

fn digests(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let hash = Sha256::digest(std::fs::read(&path).unwrap()).to_vec();
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), hash);
            }
        }
    }
    out
}

fn poses(path: &Path) -> Vec<Vec<f64>> {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["frames"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["T_world_obj"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect()
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

#[test]
fn gen_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), "defect", "60");
    gen(b.path(), "defect", "60");
    let da = digests(a.path());
    assert!(da.contains_key(Path::new("manifest.json")));
    assert!(da.keys().any(|k| k.starts_with("frames")));
    assert_eq!(da, digests(b.path()));

    let c = tempfile::tempdir().unwrap();
    ok(&["--seed", "5", "--out", s(c.path()), "gen", "--preset", "defect", "--render-stride", "60"]);
    assert_ne!(da, digests(c.path()));
}

#[test]
fn disentangle_recovers_object_motion() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "standard", "0");
    let p = |name: &str| d.path().join(name);
    let gt = poses(&p("object_motion_gt.json"));

    let known = tempfile::tempdir().unwrap();
    ok(&[
        "--out",
        s(known.path()),
        "disentangle",
        "--obj",
        s(&p("apparent_trajectory.json")),
        "--scn",
        s(&p("scene_trajectory.json")),
        "--align",
        s(&p("gauge.json")),
    ]);
    assert!(max_abs_diff(&poses(&known.path().join("object_motion.json")), &gt) < 1e-9);

    let est = tempfile::tempdir().unwrap();
    let out = ok(&[
        "--json",
        "--out",
        s(est.path()),
        "disentangle",
        "--obj",
        s(&p("apparent_trajectory.json")),
        "--scn",
        s(&p("scene_trajectory.json")),
    ]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let frames: Vec<u64> = v["result"]["static_frames"].as_array().unwrap().iter().map(|f| f.as_u64().unwrap()).collect();
    assert_eq!(frames, (0..=29).chain(91..=119).collect::<Vec<u64>>());
    assert!(max_abs_diff(&poses(&est.path().join("object_motion.json")), &gt) < 1e-6);
}

#[test]
fn missing_input_exits_with_one_and_names_the_path() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope.json");
    let out = hoirecon(&["--out", s(d.path()), "disentangle", "--obj", s(&missing), "--scn", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));

    let out = hoirecon(&["--out", s(d.path()), "eval", "--pred", s(d.path()), "--gt", s(d.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_arguments_exit_with_one() {
    assert_eq!(hoirecon(&["gen", "--preset", "standard", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(hoirecon(&["gen"]).status.code(), Some(1));
    assert_eq!(hoirecon(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hoirecon(&["--help"]).status.code(), Some(0));
}

#[test]
fn json_output_has_schema_version() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&["--json", "--out", s(d.path()), "gen", "--preset", "standard", "--render-stride", "0"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["command"], "gen");
    assert_eq!(v["result"]["frames"], 120);
    assert_eq!(v["result"]["rendered_frames"], 0);
}

#[test]
fn eval_of_ground_truth_against_itself() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "standard", "0");
    let e = tempfile::tempdir().unwrap();
    let out = ok(&["--out", s(e.path()), "eval", "--pred", s(d.path()), "--gt", s(d.path()), "--surface-points", "1000"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Chamfer"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(e.path().join("metrics.json")).unwrap()).unwrap();
    let r = &v["report"];
    assert_eq!(r["chamfer_cm"], 0.0);
    assert_eq!(r["f1_at_2cm"], 100.0);
    assert!(r["penetration_depth_cm"].as_f64().unwrap() < 1e-6);
    assert_eq!(r["contact_recall"], 100.0);
}

#[test]
fn filter_render_refine_eval_pipeline() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "defect", "60");
    let manifest = d.path().join("manifest.json");

    let f = tempfile::tempdir().unwrap();
    ok(&["--out", s(f.path()), "filter-contacts", "--timeline", s(&d.path().join("contacts_pred.json"))]);
    assert!(f.path().join("contacts_filtered.json").is_file());

    let r = tempfile::tempdir().unwrap();
    ok(&["--out", s(r.path()), "render", "--manifest", s(&manifest), "--frame", "30", "--samples-per-component", "16"]);
    for suffix in ["color.ppm", "depth.pfm", "normal.pfm", "mask.ppm"] {
        assert!(r.path().join(format!("frame_0030_{suffix}")).is_file(), "{suffix}");
    }
    let out = hoirecon(&["--out", s(r.path()), "render", "--manifest", s(&manifest), "--frame", "500"]);
    assert_eq!(out.status.code(), Some(1));

    let q = tempfile::tempdir().unwrap();
    let out = ok(&[
        "--json",
        "--threads",
        "1",
        "--out",
        s(q.path()),
        "refine",
        "--manifest",
        s(&manifest),
        "--steps",
        "3",
        "--rays-per-frame",
        "32",
        "--no-checkpoints",
    ]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["result"]["steps"], 3);
    assert!(v["result"]["final_total"].as_f64().unwrap().is_finite());
    assert!(q.path().join("reconstruction.json").is_file());

    let e = tempfile::tempdir().unwrap();
    ok(&["--out", s(e.path()), "eval", "--pred", s(q.path()), "--gt", s(d.path()), "--surface-points", "500"]);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(e.path().join("metrics.json")).unwrap()).unwrap();
    assert!(m["report"]["psnr_db"].as_f64().unwrap() > 10.0);
}
