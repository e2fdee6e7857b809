use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sterf::blocks::{ArchSpec, InputGeometry, LayerSpec, MixerKind, MixerTag};
use sterf::config::serialize_arch;
use sterf::io::{read_grid_csv, RunManifest};

fn sterf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sterf"))
        .args(args)
        .env_remove("STERF_THREADS")
        .output()
        .expect("run sterf")
}

fn small_arch(dir: &Path, name: &str, side: usize) -> String {
    let mut spec = ArchSpec::from_layers(
        2,
        InputGeometry { c: 2, h: side, w: side },
        vec![
            LayerSpec::Ssc,
            LayerSpec::Mixer {
                mixer: MixerKind::new(MixerTag::ConvK3, 2.0),
            },
        ],
    );
    spec.seed = 3;
    let path = dir.join(name);
    std::fs::write(&path, serialize_arch(&spec)).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn spatial_writes_grid_heatmap_spread_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let arch = small_arch(dir.path(), "a.arch", 8);
    let out = dir.path().join("out");
    let o = sterf(&[
        "spatial",
        "--arch",
        &arch,
        "--samples",
        "3",
        "--seed",
        "1",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = read_grid_csv(&out.join("grid.csv")).unwrap();
    assert_eq!((grid.h, grid.w), (8, 8));

    let img = image::open(out.join("heatmap.pgm")).unwrap();
    assert_eq!((img.width(), img.height()), (8, 8));
    let px = img.to_luma16();
    assert_eq!(px.pixels().map(|p| p.0[0]).max(), Some(65535));

    let spread: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("spread.json")).unwrap()).unwrap();
    assert!(spread["r95"].as_f64().unwrap() >= 0.0);

    let m = RunManifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(m.command, "spatial");
    assert_eq!(m.samples, 3);
    assert_eq!(m.probes, ["output"]);
    let names: Vec<_> = m.outputs.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(names, ["grid.csv", "heatmap.pgm", "spread.json"]);
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let arch = small_arch(dir.path(), "a.arch", 8);
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = sterf(&[
            "spatial",
            "--arch",
            &arch,
            "--samples",
            "5",
            "--threads",
            threads,
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("grid.csv")).unwrap()
    };
    assert_eq!(run("a", "1"), run("b", "3"));
}

#[test]
fn temporal_writes_one_row_per_delay() {
    let dir = tempfile::tempdir().unwrap();
    let arch = small_arch(dir.path(), "a.arch", 6);
    let out = dir.path().join("t");
    let o = sterf(&["temporal", "--arch", &arch, "--samples", "2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("temporal.csv")).unwrap();
    let lines: Vec<_> = text.split("\r\n").filter(|l| !l.is_empty()).collect();
    assert_eq!(lines[0], "tau,value");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn rerun_reproduces_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let arch = small_arch(dir.path(), "a.arch", 8);
    let first = dir.path().join("first");
    let o = sterf(&["spatial", "--arch", &arch, "--samples", "4", "--out", s(&first)]);
    assert!(o.status.success());
    let manifest = first.join("manifest.json");
    let again = dir.path().join("again");
    let o = Command::new(env!("CARGO_BIN_EXE_sterf"))
        .args(["rerun", s(&manifest), "--out", s(&again)])
        .env("STERF_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(first.join("grid.csv")).unwrap(),
        std::fs::read(again.join("grid.csv")).unwrap()
    );

    let mut m = RunManifest::read(&manifest).unwrap();
    m.outputs[0].sha256 = "0".repeat(64);
    std::fs::write(&manifest, serde_json::to_vec(&m).unwrap()).unwrap();
    let o = sterf(&["rerun", s(&manifest), "--out", s(&dir.path().join("third"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("grid.csv"));
}

#[test]
fn compare_writes_table_and_per_config_maps() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_arch(dir.path(), "a.arch", 8);
    let b = small_arch(dir.path(), "b.arch", 8);
    let out = dir.path().join("cmp");
    let o = sterf(&[
        "compare",
        "--arch",
        &a,
        "--arch",
        &b,
        "--mixer",
        "srb",
        "--probe",
        "layer1",
        "--probe",
        "output",
        "--samples",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    assert!(csv.starts_with("config,probe,r95,mass_entropy"));
    assert_eq!(csv.lines().count(), 5);
    for f in [
        "a+srb/layer1.csv",
        "a+srb/output.pgm",
        "b+srb/output.csv",
        "compare.txt",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn compare_rejects_mismatched_inputs_and_single_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_arch(dir.path(), "a.arch", 8);
    let b = small_arch(dir.path(), "b.arch", 6);
    let out = dir.path().join("cmp");
    let o = sterf(&[
        "compare",
        "--arch",
        &a,
        "--arch",
        &b,
        "--samples",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("input shape"));
    let o = sterf(&["compare", "--arch", &a, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_and_reference_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let arch = small_arch(dir.path(), "a.arch", 8);
    let out = dir.path().join("x");
    let o = sterf(&["spatial", "--arch", &arch, "--probe", "nowhere", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("valid probes: input, layer1, layer2, output"),
        "{}",
        stderr(&o)
    );
    assert_eq!(sterf(&["spatial", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        sterf(&["spatial", "--arch", "no-such-preset", "--out", s(&out)])
            .status
            .code(),
        Some(1)
    );
    let o = sterf(&["spatial", "--arch", &arch, "--gamma", "2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn presets_are_listed() {
    let o = sterf(&["presets"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().any(|l| l == "meta-sdt-tiny-desk"));
}

#[test]
fn saved_weights_load_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let arch = small_arch(dir.path(), "a.arch", 8);
    let weights: PathBuf = dir.path().join("w.bin");
    let o = sterf(&["weights", "--arch", &arch, "--out", s(&weights)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["spatial", "--arch", &arch, "--samples", "2", "--out", s(&out)];
        args.extend_from_slice(extra);
        let o = sterf(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        (
            std::fs::read(out.join("grid.csv")).unwrap(),
            RunManifest::read(&out.join("manifest.json")).unwrap(),
        )
    };
    let (g1, _) = run("init", &[]);
    let (g2, m) = run("loaded", &["--weights", s(&weights)]);
    assert_eq!(g1, g2);
    assert!(serde_json::to_string(&m.archs[0].weights).unwrap().contains("sha256"));
}

#[test]
fn verify_passes() {
    let o = sterf(&["verify", "--networks", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains(", 0 failed"));
}
