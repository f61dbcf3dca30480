//! End-to-end checks of the binary: exit codes, file outputs, format
//! round trips, and seed determinism on tiny configurations.

use std::fs;
use std::path::Path;
use std::process::Command;

fn specns() -> Command {
    Command::new(env!("CARGO_BIN_EXE_specns"))
}

fn write_cfg(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, body).unwrap();
    path
}

/// Tiny periodic configuration that runs in well under a second.
const TINY: &str = "solver.n = 8\nsolver.steps = 3\ninput.count = 2\n\
train.block = 3\ntrain.u_iters = 15\ntrain.phi_iters = 15\n\
net.kernel = 3\nnet.phi_kernel = 3\nnet.filters = 2\nnet.phi_filters = 2\n\
output.stride = 1\n";

#[test]
fn unknown_config_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "solver.bogus = 1\n");
    let out = specns()
        .args(["solve", "--preset", "2d-initial-desk"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("solver.bogus"), "stderr: {stderr}");
}

#[test]
fn missing_config_file_exits_2() {
    let out = specns()
        .args(["train", "--config", "/nonexistent/specns.cfg"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_writes_manifest_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY);
    let out_dir = dir.path().join("out");
    let out = specns()
        .args(["solve", "--preset", "2d-initial-desk", "--seed", "7", "--threads", "1"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let diag = fs::read_to_string(out_dir.join("diagnostics.csv")).unwrap();
    assert!(diag.starts_with("sample,step,time,"));
    assert!(out_dir.join("manifest.csv").exists());
    // A dumped field parses back.
    let manifest = fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    let first = manifest.lines().nth(1).unwrap();
    let name = first.split(',').nth(2).unwrap();
    let bytes = fs::read(out_dir.join("fields").join(name)).unwrap();
    let (field, _) = specns_cli::formats::read_field(&mut bytes.as_slice()).unwrap();
    assert_eq!(field.axes.len(), 2);
}

#[test]
fn train_then_infer_round_trip_and_checksum_guard() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY);
    let train_dir = dir.path().join("train");
    let out = specns()
        .args(["train", "--preset", "2d-initial-desk", "--seed", "3", "--threads", "1"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&train_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = train_dir.join("model.spon");
    assert!(ckpt.exists());
    assert!(train_dir.join("training_log.csv").exists());

    // Inference with the checkpoint on the same inputs.
    let infer_cfg = write_cfg(
        dir.path(),
        &format!("{TINY}infer.checkpoint = {}\n", ckpt.display()),
    );
    let infer_dir = dir.path().join("infer");
    let out = specns()
        .args(["infer", "--preset", "2d-initial-desk", "--seed", "3", "--threads", "1"])
        .arg("--config")
        .arg(&infer_cfg)
        .arg("--out")
        .arg(&infer_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(infer_dir.join("infer_errors.csv").exists());

    // Corrupt the checkpoint payload: exit 3.
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&ckpt, &bytes).unwrap();
    let out = specns()
        .args(["infer", "--preset", "2d-initial-desk", "--seed", "3"])
        .arg("--config")
        .arg(&infer_cfg)
        .arg("--out")
        .arg(dir.path().join("infer2"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn solve_outputs_are_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY);
    let run = |out_dir: &Path| {
        let out = specns()
            .args(["solve", "--preset", "2d-initial-desk", "--seed", "11", "--threads", "1"])
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out_dir)
            .output()
            .unwrap();
        assert!(out.status.success());
        fs::read(out_dir.join("diagnostics.csv")).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b, "diagnostics.csv differs between identical runs");
}

#[test]
fn ensemble_emits_sorted_sizes_and_slope_column() {
    let dir = tempfile::tempdir().unwrap();
    // Unsorted s_list; tiny forcing ensemble on the oracle.
    let cfg = write_cfg(
        dir.path(),
        "preset = 2d-initial-desk\nsolver.n = 8\nsolver.steps = 2\n\
         net.kernel = 3\nnet.phi_kernel = 3\n\
         ensemble.s_list = 12,4,8\nensemble.bins = 5\n",
    );
    let out_dir = dir.path().join("out");
    let out = specns()
        .args(["ensemble", "--seed", "5", "--threads", "2"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let conv = fs::read_to_string(out_dir.join("ensemble_convergence.csv")).unwrap();
    assert!(conv.starts_with("s,mean_field_error,slope\n"));
    let timing = fs::read_to_string(out_dir.join("timing.csv")).unwrap();
    let sizes: Vec<&str> =
        timing.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(sizes, vec!["4", "8", "12"], "sizes not sorted: {timing}");
}

#[test]
fn convergence_reports_second_order_column() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = specns()
        .args(["convergence", "--threads", "4"])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("temporal_convergence.csv")).unwrap();
    assert!(csv.starts_with("dt,rel_l2_x_error,observed_order\n"));
    assert_eq!(csv.lines().count(), 5);
    let spatial = fs::read_to_string(out_dir.join("spatial_convergence.csv")).unwrap();
    assert!(spatial.starts_with("n,max_nodal_error\n"));
}
