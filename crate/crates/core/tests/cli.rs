use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use difftomo::dataio::{self, snapshot_tree, DatasetManifest};

const SMALL: &str = r#"{
  "geometry": {"grid": {"nx": 32, "ny": 32, "pitch": 1.6e-5}, "layers": 2},
  "pattern": {"rect_width": [3.2e-5, 6.4e-5], "rect_length": [3.2e-5, 1.28e-4], "trace_width": 3.2e-5}
}"#;

fn difftomo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difftomo"))
        .current_dir(dir)
        .args(args)
        .env_remove("DIFFTOMO_THREADS")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    dir
}

#[test]
fn simulate_is_deterministic_and_uses_22_views() {
    let w = workspace();
    let d = w.path();
    ok(&difftomo(d, &["--config", "cfg.json", "--seed", "7", "simulate", "--synthetic", "--out", "a"]));
    ok(&difftomo(d, &["--config", "cfg.json", "--seed", "7", "simulate", "--synthetic", "--out", "b"]));
    assert_eq!(snapshot_tree(&d.join("a")).unwrap(), snapshot_tree(&d.join("b")).unwrap());
    let meas = dataio::read_measurements(&d.join("a")).unwrap();
    assert_eq!(meas.view_count(), 22);
    assert!(d.join("a/renders/truth_layer2.png").exists());

    ok(&difftomo(d, &["--config", "cfg.json", "--seed", "8", "simulate", "--out", "c"]));
    assert_ne!(
        fs::read(d.join("a/meas.dtom")).unwrap(),
        fs::read(d.join("c/meas.dtom")).unwrap()
    );
}

#[test]
fn missing_phantom_dir_leaves_nothing_behind() {
    let w = workspace();
    let d = w.path();
    let o = difftomo(d, &["--config", "cfg.json", "simulate", "--phantom-dir", "nowhere", "--out", "sim"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
    assert!(!d.join("sim").exists());
}

#[test]
fn phantom_masks_are_loaded_in_name_order() {
    let w = workspace();
    let d = w.path();
    fs::create_dir(d.join("masks")).unwrap();
    for (name, on) in [("l1.png", 0u8), ("l2.png", 255u8)] {
        let img = image::GrayImage::from_fn(32, 32, |x, _| image::Luma([if x < 16 { on } else { 255 - on }]));
        img.save(d.join("masks").join(name)).unwrap();
    }
    ok(&difftomo(d, &["--config", "cfg.json", "simulate", "--phantom-dir", "masks", "--noiseless", "--out", "sim"]));
    let meas = dataio::read_measurements(&d.join("sim")).unwrap();
    let truth = dataio::read_stack(&d.join("sim/truth.dtom"), &meas.geometry.grid, meas.geometry.dz).unwrap();
    assert_eq!(truth.layer_count(), 2);
    assert!((truth.layer(0)[0] + 0.33).abs() < 1e-12);
    assert_eq!(truth.layer(1)[0], 0.0);
}

#[test]
fn solvers_log_costs_and_lt_beats_approximant_on_demo() {
    let w = workspace();
    let d = w.path();
    ok(&difftomo(d, &["--config", "cfg.json", "--seed", "3", "simulate", "--out", "sim"]));

    let text = ok(&difftomo(d, &["--config", "cfg.json", "approximant", "--meas", "sim", "--k", "8", "--step", "0.05", "--out", "ap"]));
    assert_eq!(text.lines().filter(|l| l.starts_with("iter")).count(), 9);
    assert!(text.contains("time approximant"));
    assert_eq!(fs::read_to_string(d.join("ap/cost.log")).unwrap().lines().count(), 9);

    ok(&difftomo(d, &["--config", "cfg.json", "reconstruct-lt", "--meas", "sim", "--out", "lt"]));
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("lt/report.json")).unwrap()).unwrap();
    assert_eq!(record["solver"]["iterations"], 30);
    assert_eq!(record["solver"]["step"], 0.05);
    assert_eq!(record["solver"]["tv_alpha"], 0.04);
    assert_eq!(record["solver"]["tv_inner_iters"], 20);
    assert_eq!(record["cost_history"].as_array().unwrap().len(), 31);
    assert!(d.join("lt/renders/lt_layer1.png").exists());

    let score = |recon: &str| -> f64 {
        let out = ok(&difftomo(d, &["--json", "evaluate", "--recon", recon, "--truth", "sim"]));
        let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
        v["mean_pcc"].as_f64().unwrap()
    };
    assert!(score("lt") >= score("ap"));
}

#[test]
fn regularised_single_step_and_invalid_step() {
    let w = workspace();
    let d = w.path();
    ok(&difftomo(d, &["--config", "cfg.json", "simulate", "--out", "sim"]));
    let text = ok(&difftomo(
        d,
        &["--config", "cfg.json", "approximant", "--meas", "sim", "--k", "1", "--step", "0.1", "--tv-alpha", "0.1", "--out", "k1"],
    ));
    assert_eq!(text.lines().filter(|l| l.starts_with("iter")).count(), 2);

    let o = difftomo(d, &["--config", "cfg.json", "approximant", "--meas", "sim", "--step", "0", "--out", "bad"]);
    assert!(!o.status.success());
    assert!(!d.join("bad").exists());
}

#[test]
fn lt_without_tv_or_momentum_matches_config_override() {
    let w = workspace();
    let d = w.path();
    ok(&difftomo(d, &["--config", "cfg.json", "simulate", "--out", "sim"]));
    ok(&difftomo(d, &["--config", "cfg.json", "reconstruct-lt", "--meas", "sim", "--tv-alpha", "0", "--k", "3", "--out", "lt"]));
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("lt/report.json")).unwrap()).unwrap();
    assert_eq!(record["solver"]["tv_alpha"], 0.0);
    assert_eq!(record["cost_history"].as_array().unwrap().len(), 4);
}

#[test]
fn evaluate_identical_inputs_prints_100() {
    let w = workspace();
    let d = w.path();
    ok(&difftomo(d, &["--config", "cfg.json", "simulate", "--out", "sim"]));
    let text = ok(&difftomo(d, &["evaluate", "--recon", "sim/truth.dtom", "--truth", "sim", "--calibrate"]));
    let row = text.lines().nth(1).unwrap();
    assert_eq!(row.matches("100.0").count(), 3, "{text}");
}

#[test]
fn dataset_command_contract() {
    let w = workspace();
    let d = w.path();
    ok(&difftomo(d, &["--config", "cfg.json", "dataset", "--count", "0", "--out", "empty"]));
    let m: DatasetManifest = dataio::read_json(&d.join("empty/manifest.json")).unwrap();
    assert!(m.examples.is_empty());

    ok(&difftomo(d, &["--config", "cfg.json", "dataset", "--count", "3", "--splits", "1,1,1", "--out", "ds"]));
    let again = difftomo(d, &["--config", "cfg.json", "dataset", "--count", "3", "--splits", "1,1,1", "--out", "ds"]);
    assert!(!again.status.success());
    ok(&difftomo(d, &["--config", "cfg.json", "dataset", "--count", "2", "--splits", "1,0,1", "--force", "--out", "ds"]));
    assert_eq!(dataio::validate_dataset(&d.join("ds")).unwrap().examples.len(), 2);

    let bad = difftomo(d, &["--config", "cfg.json", "dataset", "--count", "5", "--splits", "1,1,1", "--out", "mismatch"]);
    assert!(!bad.status.success());
    assert!(!d.join("mismatch").exists());

    let text = ok(&difftomo(d, &["--json", "--config", "cfg.json", "evaluate", "--dataset", "ds"]));
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(v["examples"], 1);
}

#[test]
fn dry_run_touches_nothing() {
    let w = workspace();
    let d = w.path();
    for args in [
        vec!["--dry-run", "--config", "cfg.json", "simulate", "--out", "sim"],
        vec!["--dry-run", "--config", "cfg.json", "dataset", "--out", "ds"],
    ] {
        let text = ok(&difftomo(d, &args));
        assert!(text.contains("dry run"));
    }
    assert!(!d.join("sim").exists());
    assert!(!d.join("ds").exists());
}

#[test]
fn flags_override_config_and_env_threads_fallback() {
    let w = workspace();
    let d = w.path();
    fs::write(
        d.join("seeded.json"),
        SMALL.replacen('{', "{\n  \"seed\": 5,\n  \"threads\": 1,", 1),
    )
    .unwrap();
    ok(&difftomo(d, &["--config", "seeded.json", "simulate", "--out", "from_cfg"]));
    ok(&difftomo(d, &["--config", "cfg.json", "--seed", "5", "simulate", "--out", "from_flag"]));
    ok(&difftomo(d, &["--config", "seeded.json", "--seed", "6", "simulate", "--out", "override"]));
    let meas = |p: &str| fs::read(d.join(p).join("meas.dtom")).unwrap();
    assert_eq!(meas("from_cfg"), meas("from_flag"));
    assert_ne!(meas("from_cfg"), meas("override"));

    let o = Command::new(env!("CARGO_BIN_EXE_difftomo"))
        .current_dir(d)
        .args(["--config", "cfg.json", "simulate", "--out", "env"])
        .env("DIFFTOMO_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("DIFFTOMO_THREADS"));
}

#[test]
fn fresnel_json_output() {
    let w = workspace();
    let text = ok(&difftomo(w.path(), &["--json", "fresnel", "--sizes", "160e-6,449e-6"]));
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    let f: Vec<f64> = serde_json::from_value(v["fresnel"].clone()).unwrap();
    assert_eq!(format!("{:.1} {:.1}", f[0], f[1]), "0.7 5.5");
}
