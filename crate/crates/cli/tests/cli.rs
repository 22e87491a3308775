use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn imjense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imjense")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

const SPEC: &str = r#"{"d1": 16, "d2": 16, "ellipses": "shepp-logan", "noise_std": 0.001, "seed": 3}"#;
const TINY: &str = r#"{"iters": 6, "hidden_layers": 2, "hidden_width": 16, "poly_order": 3, "lr_inr": 0.01, "lambda": 0.3}"#;

/// Phantom with 2 coils and R=2 k-space in `dir/data`.
fn phantom(dir: &Path) -> PathBuf {
    let spec = write(&dir.join("spec.json"), SPEC);
    let data = dir.join("data");
    let out = imjense(&["phantom", p(&spec), "--coils", "2", "--r", "2", "--acs", "4", "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn phantom_writes_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = phantom(dir.path());
    for name in ["truth.f32", "truth.json", "truth_mag.pgm", "reference.f32", "sens.f32", "full.kspc", "under.kspc", "manifest.json"] {
        assert!(a.join(name).exists(), "{name}");
    }
    let b = dir.path().join("again");
    let spec = dir.path().join("spec.json");
    imjense(&["phantom", p(&spec), "--coils", "2", "--r", "2", "--acs", "4", "--out", p(&b)]);
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        if name != "manifest.json" {
            assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
        }
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "phantom");
    assert_eq!(manifest["seeds"]["noise"], 3);
}

#[test]
fn phantom_missing_field_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(&dir.path().join("spec.json"), r#"{"d1": 16, "d2": 16}"#);
    let out = imjense(&["phantom", p(&spec), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ellipses"));
}

#[test]
fn mask_reports_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = imjense(&["mask", "--d-fe", "8", "--d-pe", "236", "--r", "5", "--acs", "4", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("22.03%"));
    let info: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("mask.json")).unwrap()).unwrap();
    assert_eq!(info["kept_lines"].as_array().unwrap().len(), 52);
    let bad = imjense(&["mask", "--d-fe", "8", "--d-pe", "10", "--r", "2", "--acs", "40", "--out", p(dir.path())]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn recon_eval_and_upsample() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantom(dir.path());
    let cfg = write(&dir.path().join("cfg.json"), TINY);
    let rec = dir.path().join("rec");
    let out = imjense(&["recon", p(&data.join("under.kspc")), "--config", p(&cfg), "--out", p(&rec)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(rec.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 6);
    for name in ["combined_mag.pgm", "combined_phase.pgm", "combined_mag.f32", "composite.kspc", "model.ckpt", "manifest.json"] {
        assert!(rec.join(name).exists(), "{name}");
    }

    let csv = dir.path().join("m.csv");
    let truth = data.join("reference.f32");
    let out = imjense(&[
        "eval", "--truth", p(&truth), "--recon", p(&truth), p(&rec.join("combined_mag.f32")), p(&rec.join("combined.f32")),
        "--r", "2", "--acs", "4", "--out", p(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("reference,2,4,full,999.0000,1.000000"));
    assert_eq!(rows[1].split(',').nth(4), rows[2].split(',').nth(4));

    let up = dir.path().join("up");
    assert_eq!(code(&imjense(&["upsample", p(&rec.join("model.ckpt")), "--scale", "1", "--out", p(&up)])), 0);
    assert_eq!(std::fs::read(up.join("network_x1.f32")).unwrap(), std::fs::read(rec.join("network.f32")).unwrap());
    assert_eq!(code(&imjense(&["upsample", p(&rec.join("model.ckpt")), "--scale", "4", "--out", p(&up)])), 0);
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(up.join("network_x4.json")).unwrap()).unwrap();
    assert_eq!(side["shape"], serde_json::json!([1, 64, 64]));

    let bad = write(&dir.path().join("bad.ckpt"), "XXXXXXXXXXXXXXXXXXXX");
    assert_eq!(code(&imjense(&["upsample", p(&bad), "--out", p(&up)])), 2);
    let small = dir.path().join("small.f32");
    std::fs::write(&small, [0u8; 16]).unwrap();
    write(&dir.path().join("small.json"), r#"{"dtype": "float32-le", "shape": [1, 2, 2], "components": 1}"#);
    assert_eq!(code(&imjense(&["eval", "--truth", p(&truth), "--recon", p(&small), "--out", p(&csv)])), 2);
}

#[test]
fn recon_variants_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantom(dir.path());
    let input = data.join("under.kspc");
    let cfg = write(&dir.path().join("cfg.json"), TINY);

    let out = imjense(&["recon", p(&input), "--config", p(&cfg), "--variant", "bogus", "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);

    let rec = dir.path().join("nokc");
    let out = imjense(&["recon", p(&input), "--config", p(&cfg), "--variant", "no-kc", "--out", p(&rec)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let measured = imjense::synthdata::read_kspc(&input).unwrap();
    let composite = imjense::synthdata::read_kspc(&rec.join("composite.kspc")).unwrap();
    let keep = measured.mask.keep_fft();
    let differs = (0..measured.data.len()).any(|k| keep[k % measured.d2] && measured.data[k] != composite.data[k]);
    assert!(differs);

    let exploding = write(&dir.path().join("nan.json"), r#"{"iters": 6, "hidden_layers": 2, "hidden_width": 16, "poly_order": 3, "lr_poly": 1e300}"#);
    let out = imjense(&["recon", p(&input), "--config", p(&exploding), "--out", p(&dir.path().join("nan"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("nan/last_good.ckpt").exists());

    let typo = write(&dir.path().join("typo.json"), r#"{"iterz": 3}"#);
    assert_eq!(code(&imjense(&["recon", p(&input), "--config", p(&typo), "--out", p(dir.path())])), 2);
}

#[test]
fn tune_single_point_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path());
    let cases = write(&dir.path().join("cases.json"), r#"{"cases": [{"kspc": "data/under.kspc", "truth": "data/reference.f32"}]}"#);
    let cfg = write(&dir.path().join("cfg.json"), TINY);
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = imjense(&["tune", p(&cases), "--config", p(&cfg), "--budget", "1", "--init", "1", "--seed", "5", "--out", p(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(out_dir.join("trace.csv")).unwrap()
    };
    let a = run("t1");
    assert_eq!(a.lines().count(), 2);
    assert_eq!(a, run("t2"));
    let best: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("t1/best_config.json")).unwrap()).unwrap();
    let row: Vec<&str> = a.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(best["w0"].as_f64().unwrap(), row[1].parse::<f64>().unwrap());
}
