use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 11
rings = ["inside", "border", "outside_1mi", "outside_2mi"]
output_dir = "out"

[[heterogeneity]]
attribute = "opportunity_zone"
mode = "interaction"

[sdid]
replications = 10

[income]

[simulate]
designee_zones_per_cohort = 1
finalist_zones_per_cohort = 2
buffer_tracts = 3
border_offset = true
spillover_reach_miles = 2.0

[simulate.heterogeneity]
attribute = "opportunity_zone"
probability = 0.5
effect_scale = 1.5

[simulate.income]
effects = [-0.01, 0.004, 0.003, 0.002, 0.001]
"#;

fn placedid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_placedid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn report_writes_declared_outputs_that_parse() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let out = placedid(&["report", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("out");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    let outputs = manifest["outputs"].as_array().unwrap();
    for name in [
        "att_summary.csv",
        "coefficients.csv",
        "plot_series.csv",
        "yearly_effects.csv",
        "heterogeneity.csv",
        "income_buckets.csv",
        "rings_poverty_rate.csv",
        "sdid_nsi.csv",
        "inputs/panel.csv",
    ] {
        assert!(
            outputs.iter().any(|o| o["path"] == name),
            "{name} missing from manifest"
        );
    }
    for o in outputs {
        let path = dir.join(o["path"].as_str().unwrap());
        if path.extension().is_some_and(|e| e == "csv") {
            let mut r = csv::Reader::from_path(&path).unwrap();
            let width = r.headers().unwrap().len();
            for rec in r.records() {
                assert_eq!(rec.unwrap().len(), width, "{}", path.display());
            }
        }
    }
}

#[test]
fn att_summary_and_plot_columns_are_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "nsi = false\noutcomes = [\"poverty_rate\"]\n[simulate]\ndesignee_zones_per_cohort = 1\nfinalist_zones_per_cohort = 2\n");
    assert!(placedid(&["estimate", "--config", &cfg]).status.success());
    let header = |name: &str| {
        let text = fs::read_to_string(tmp.path().join("out").join(name)).unwrap();
        text.lines().next().unwrap().to_string()
    };
    assert_eq!(
        header("att_summary.csv"),
        "outcome,method,estimate,se,p,ci_low,ci_high,robust_p,robust_ci_low,robust_ci_high"
    );
    assert_eq!(
        header("plot_series.csv"),
        "outcome,event_time,estimate,ci_low,ci_high,partial,scaled_estimate,scaled_ci_low,scaled_ci_high"
    );
    assert_eq!(header("coefficients.csv"), "outcome,spec,term,estimate,se,p,covariance");
    let plot = fs::read_to_string(tmp.path().join("out/plot_series.csv")).unwrap();
    assert!(plot.lines().any(|l| l == "poverty_rate,-1,0.0,0.0,0.0,false,,,"));
    assert_eq!(plot.lines().count(), 14);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let out = placedid(&[
            "--threads",
            threads,
            "report",
            "--config",
            &cfg,
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let fa = files(&a);
    let fb = files(&b);
    assert!(!fa.is_empty());
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
}

#[test]
fn window_beyond_seven_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "window = [-5, 9]\n[simulate]\n");
    let out = placedid(&["estimate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("window"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn missing_input_and_bad_flags_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "panel = \"nope.csv\"\n");
    assert_eq!(placedid(&["estimate", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(
        placedid(&["estimate", "--config", "does/not/exist.toml"]).status.code(),
        Some(1)
    );
    assert_eq!(placedid(&["frobnicate"]).status.code(), Some(1));
    let cfg = write_config(tmp.path(), "[simulate]\n");
    assert_eq!(
        placedid(&["estimate", "--config", &cfg, "--conley-kernel", "gaussian"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn simulate_then_estimate_from_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = placedid(&["simulate", "--seed", "5", "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let overlay = tmp.path().join("overlay.csv");
    let out = placedid(&[
        "overlay",
        "--zones",
        data.join("zones.geojson").to_str().unwrap(),
        "--blocks",
        data.join("blocks.geojson").to_str().unwrap(),
        "--out",
        overlay.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = write_config(
        tmp.path(),
        "panel = \"data/panel.csv\"\nassignments = \"data/assignments.csv\"\nrings = [\"inside\"]\n",
    );
    let out = placedid(&["spillover", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(tmp.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("data/panel.csv"));
    assert!(tmp.path().join("out/rings_nsi.csv").exists());
}

#[test]
fn sdid_seed_flag_changes_only_placebo_draws() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    for (dir, seed) in [("a", "1"), ("b", "2")] {
        let out = placedid(&[
            "sdid",
            "--config",
            &cfg,
            "--out",
            tmp.path().join(dir).to_str().unwrap(),
            "--sdid-seed",
            seed,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |dir: &str| fs::read_to_string(tmp.path().join(dir).join("sdid_nsi.csv")).unwrap();
    let (a, b) = (read("a"), read("b"));
    assert_ne!(a, b);
    // Point estimates do not depend on the placebo seed.
    let estimates = |text: &str| {
        text.lines()
            .map(|l| l.split(',').take(4).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
    };
    assert_eq!(estimates(&a), estimates(&b));
}
