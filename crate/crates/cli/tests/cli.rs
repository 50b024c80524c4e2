use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spherewarp_cli::{read_map, GridMap, RegistrationReport};
use spherewarp_core::metrics::MetricReport;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spherewarp"));
    c.env_remove(spherewarp_cli::THREADS_ENV);
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single stderr line of a failing run.
fn fails(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = run(args, cwd);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "stderr is not one line: {err}");
    (out.status.code().unwrap(), err.trim_end().to_string())
}

fn synth(dir: &Path, name: &str, grid: &str, subjects: &str, seed: &str) -> PathBuf {
    ok(&["synth", "--grid", grid, "--subjects", subjects, "--seed", seed, "--out", name], dir);
    dir.join(name)
}

fn read_report(path: &Path) -> RegistrationReport {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gradcheck_passes_on_a_fresh_checkout() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["gradcheck"], dir.path());
    let lines: Vec<_> = text.lines().filter(|l| l.contains("max rel error")).collect();
    assert!(lines.len() >= 10);
    assert!(lines.iter().all(|l| l.ends_with(" ok")), "{text}");
    let json = ok(&["gradcheck", "--json"], dir.path());
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), lines.len());
}

#[test]
fn registering_the_atlas_mean_to_itself_barely_moves() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "ds", "32x64", "2", "1");
    let mean = ds.join("atlas_mean.smgm");
    let var = ds.join("atlas_var.smgm");
    ok(
        &["register", "--moving", mean.to_str().unwrap(), "--atlas-mean", mean.to_str().unwrap(), "--atlas-var", var.to_str().unwrap(), "--out", "reg"],
        dir.path(),
    );
    let report = read_report(&dir.path().join("reg/report.json"));
    assert!(report.mean_displacement < 1e-3, "{}", report.mean_displacement);
    assert_eq!(report.jacobian.fraction_nonpositive, 0.0);
    for f in ["phi", "phi_inverse", "mu", "sigma", "warped"] {
        let p = dir.path().join(format!("reg/{f}.smgm"));
        assert!(read_map(&p).is_ok(), "{f}");
        assert!(dir.path().join(format!("reg/{f}.smgm.prov.json")).exists(), "{f} sidecar");
    }
    assert!(matches!(read_map(&dir.path().join("reg/phi.smgm")).unwrap(), GridMap::Deformation(_)));
}

#[test]
fn evaluate_on_identical_labels_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "ds", "16x32", "1", "2");
    let l = ds.join("template_labels.smgm");
    let text = ok(&["evaluate", "--labels", l.to_str().unwrap(), "--reference", l.to_str().unwrap(), "--out", "eval.json"], dir.path());
    let report: MetricReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.overall_dice, 1.0);
    assert_eq!(report.overall_mmd, 0.0);
    let stored: MetricReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(stored, report);
}

#[test]
fn failures_map_to_distinct_categories() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "ds", "16x32", "2", "3");
    let mean = ds.join("atlas_mean.smgm");
    let m = mean.to_str().unwrap();
    let var = ds.join("atlas_var.smgm");
    let v = var.to_str().unwrap();

    let (code, line) = fails(&["register", "--frobnicate"], dir.path());
    assert_eq!((code, &line[..12]), (2, "error[usage]"));

    let (code, line) = fails(&["register", "--moving", "nope.smgm", "--atlas-mean", m, "--atlas-var", v, "--out", "r"], dir.path());
    assert!(line.starts_with("error[io]"), "{line}");
    assert_eq!(code, 4);

    std::fs::write(dir.path().join("bad.json"), r#"{"registration": {"lamda": 3}}"#).unwrap();
    let (code, line) = fails(&["register", "--moving", m, "--atlas-mean", m, "--atlas-var", v, "--config", "bad.json", "--out", "r"], dir.path());
    assert!(line.starts_with("error[config]") && line.contains("lamda"), "{line}");
    assert_eq!(code, 3);

    let mut bytes = std::fs::read(&mean).unwrap();
    bytes[40] ^= 0x01;
    std::fs::write(dir.path().join("flipped.smgm"), &bytes).unwrap();
    let (code, line) = fails(&["register", "--moving", "flipped.smgm", "--atlas-mean", m, "--atlas-var", v, "--out", "r"], dir.path());
    assert!(line.starts_with("error[format]") && line.contains("CRC"), "{line}");
    assert_eq!(code, 5);

    let mut bytes = std::fs::read(&mean).unwrap();
    bytes[7..9].copy_from_slice(&2u16.to_le_bytes());
    std::fs::write(dir.path().join("shape.smgm"), &bytes).unwrap();
    let (code, line) = fails(&["register", "--moving", "shape.smgm", "--atlas-mean", m, "--atlas-var", v, "--out", "r"], dir.path());
    assert!(line.starts_with("error[format]") && line.contains("shape"), "{line}");
    assert_eq!(code, 5);

    let (code, line) = fails(&["register", "--moving", v, "--atlas-mean", m, "--atlas-var", v, "--out", "r"], dir.path());
    assert!(line.starts_with("error[format]") && line.contains("expected a feature map"), "{line}");
    assert_eq!(code, 5);

    let small = synth(dir.path(), "small", "8x16", "1", "3");
    let s = small.join("atlas_mean.smgm");
    let (code, line) = fails(&["register", "--moving", s.to_str().unwrap(), "--atlas-mean", m, "--atlas-var", v, "--out", "r"], dir.path());
    assert!(line.starts_with("error[input]"), "{line}");
    assert_eq!(code, 6);

    let vel = ds.join("subjects/sub-000/velocity.smgm");
    let phi = ds.join("subjects/sub-000/true_phi.smgm");
    let (code, _) = fails(&["warp", "--phi", phi.to_str().unwrap(), "--input", vel.to_str().unwrap(), "--out", "w.smgm"], dir.path());
    assert_eq!(code, 6);

    let out = bin().args(["gradcheck"]).env(spherewarp_cli::THREADS_ENV, "0").current_dir(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[usage]"));
}

fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let ds = synth(dir, "ds", "32x64", "2", "11");
    let p = |s: &str| ds.join(s).to_str().unwrap().to_string();
    ok(
        &[
            "register", "--moving", &p("subjects/sub-001/features.smgm"), "--atlas-mean", &p("atlas_mean.smgm"),
            "--atlas-var", &p("atlas_var.smgm"), "--atlas-labels", &p("template_labels.smgm"), "--out", "reg",
        ],
        dir,
    );
    ok(&["warp", "--phi", "reg/phi_inverse.smgm", "--input", &p("template_labels.smgm"), "--out", "projected.smgm"], dir);
    ok(&["warp", "--phi", "reg/phi.smgm", "--input", &p("subjects/sub-001/features.smgm"), "--out", "warped.smgm"], dir);
    let eval = ok(&["evaluate", "--labels", "projected.smgm", "--reference", &p("subjects/sub-001/labels.smgm"), "--phi", "reg/phi.smgm"], dir);
    let mut files = vec![("evaluate stdout".to_string(), eval.into_bytes())];
    for f in [
        "ds/atlas_mean.smgm", "ds/atlas_var.smgm", "ds/subjects/sub-001/features.smgm", "ds/subjects/sub-001/true_phi.smgm",
        "ds/dataset.json", "reg/phi.smgm", "reg/phi_inverse.smgm", "reg/mu.smgm", "reg/sigma.smgm", "reg/labels.smgm",
        "reg/report.json", "projected.smgm", "warped.smgm",
    ] {
        files.push((f.to_string(), std::fs::read(dir.join(f)).unwrap()));
    }
    files
}

#[test]
fn pipeline_is_reproducible_bit_for_bit() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(x == y, "{name} differs between runs");
    }
    assert_eq!(std::fs::read(a.path().join("projected.smgm")).unwrap(), std::fs::read(a.path().join("reg/labels.smgm")).unwrap());
    let eval: MetricReport = serde_json::from_slice(&first[0].1).unwrap();
    assert!(eval.overall_dice > 0.9, "{}", eval.overall_dice);
}

#[test]
fn provenance_sidecars_record_the_invocation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), "ds", "16x32", "1", "5");
    let prov: spherewarp_cli::provenance::Provenance =
        serde_json::from_str(&std::fs::read_to_string(ds.join("atlas_var.smgm.prov.json")).unwrap()).unwrap();
    assert_eq!(prov.seed, Some(5));
    assert_eq!(prov.output, "atlas_var.smgm");
    assert_eq!(&prov.command_line[1..3], ["synth", "--grid"]);
    assert_eq!(prov.config_sha256.len(), 64);
    assert!(prov.versions.contains_key("spherewarp-core"));
    let other = synth(dir.path(), "other", "16x32", "1", "6");
    let prov2: spherewarp_cli::provenance::Provenance =
        serde_json::from_str(&std::fs::read_to_string(other.join("atlas_var.smgm.prov.json")).unwrap()).unwrap();
    assert_ne!(prov.config_sha256, prov2.config_sha256);
}

#[test]
fn lambda_search_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "ds", "16x32", "2", "8");
    std::fs::write(dir.path().join("cfg.json"), r#"{"registration": {"iters": 60}}"#).unwrap();
    let args = ["lambda-search", "--dataset", "ds", "--config", "cfg.json", "--validation", "2", "--out", "l.json"];
    let one = ok(&args, dir.path());
    let out = bin().args(args).env(spherewarp_cli::THREADS_ENV, "3").current_dir(dir.path()).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), one);
    let report: spherewarp_registration::LambdaSearchReport = serde_json::from_str(&one).unwrap();
    assert_eq!(report.scores.len(), 5);
    assert!(report.scores.iter().any(|s| s.lambda == report.best));
}

#[test]
fn train_then_predict_runs_the_amortized_path() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "ds", "16x32", "2", "9");
    let text = ok(&["train", "--dataset", "ds", "--out", "model", "--epochs", "3", "--lr", "1e-3", "--widths", "4,4,4,4"], dir.path());
    assert!(text.starts_with("epochs 3"), "{text}");
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("model/training.json")).unwrap()).unwrap();
    assert_eq!(summary["epoch_losses"].as_array().unwrap().len(), 3);
    ok(
        &[
            "predict", "--model", "model/model.smtw", "--moving", "ds/subjects/sub-000/features.smgm", "--atlas-mean",
            "ds/atlas_mean.smgm", "--atlas-var", "ds/atlas_var.smgm", "--out", "pred",
        ],
        dir.path(),
    );
    let report = read_report(&dir.path().join("pred/report.json"));
    assert!(report.mean_displacement.is_finite());
    assert!(dir.path().join("model/model.smtw.prov.json").exists());

    synth(dir.path(), "big", "32x64", "1", "9");
    ok(
        &[
            "predict", "--model", "model/model.smtw", "--moving", "big/subjects/sub-000/features.smgm", "--atlas-mean",
            "big/atlas_mean.smgm", "--atlas-var", "big/atlas_var.smgm", "--out", "pred_big",
        ],
        dir.path(),
    );
    assert_eq!(read_map(&dir.path().join("pred_big/phi.smgm")).unwrap().grid().rows(), 32);
}

#[test]
fn convert_reads_text_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<String> = (0..4).map(|i| (0..8).map(|j| format!("{}", i * 8 + j)).collect::<Vec<_>>().join(" ")).collect();
    std::fs::write(dir.path().join("m.txt"), rows.join("\n")).unwrap();
    ok(&["convert", "--input", "m.txt", "--kind", "label", "--out", "m.smgm"], dir.path());
    match read_map(&dir.path().join("m.smgm")).unwrap() {
        GridMap::Label(l) => assert_eq!(l.get(3, 7), 31),
        other => panic!("unexpected {:?}", other.kind()),
    }
    ok(&["convert", "--input", "m.txt", "--out", "f.smgm"], dir.path());
    assert!(matches!(read_map(&dir.path().join("f.smgm")).unwrap(), GridMap::Feature(_)));
    std::fs::write(dir.path().join("bad.txt"), "1 2\n3\n").unwrap();
    let (code, _) = fails(&["convert", "--input", "bad.txt", "--out", "b.smgm"], dir.path());
    assert_eq!(code, 5);
    let (code, _) = fails(&["convert", "--input", "m.txt", "--kind", "velocity", "--out", "b.smgm"], dir.path());
    assert_eq!(code, 5);
}
