//! End-to-end tests of the `stm` binary: exit codes, strict config parsing,
//! manifest round-trips, and worker-count independence of the outputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, content: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, content).unwrap();
    path.display().to_string()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

const BASE: &str = r#"
master_seed = 42

[problem]
name = "cubic_dissipative"

[scheme]
theta = 1.0

[simulate]
horizon = 1.0
tau = 0.05
x0 = [1.0]
n_paths = 50

[lyapunov]
tau = 0.05
n_paths = 400
n_steps = 20
x0 = [2.0]

[check]
tau = 0.1
"#;

#[test]
fn missing_config_file_exits_1() {
    let out = stm(&["--config", "/definitely/not/here.toml", "--command", "check"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read"));
}

#[test]
fn malformed_toml_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "master_seed = [not toml");
    let out = stm(&["--config", &cfg, "--command", "check"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid config"));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "extra.toml",
        &format!("{BASE}\nnot_a_real_key = 1\n"),
    );
    let out = stm(&["--config", &cfg, "--command", "check"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_real_key"));
}

#[test]
fn missing_master_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "noseed.toml",
        "[problem]\nname = \"ou\"\n\n[check]\ntau = 0.1\n",
    );
    let out = stm(&["--config", &cfg, "--command", "check"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("master_seed"));
}

#[test]
fn unknown_problem_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "prob.toml",
        "master_seed = 1\n[problem]\nname = \"heat_equation\"\n[check]\ntau = 0.1\n",
    );
    let out = stm(&["--config", &cfg, "--command", "check"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("heat_equation"));
}

#[test]
fn unknown_command_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", BASE);
    let out = stm(&["--config", &cfg, "--command", "frobnicate"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("frobnicate"));
}

#[test]
fn no_command_anywhere_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", BASE);
    let out = stm(&["--config", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("command"));
}

#[test]
fn missing_command_block_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", BASE);
    let outdir = dir.path().join("out");
    let out = stm(&[
        "--config",
        &cfg,
        "--command",
        "sensitivity",
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("[sensitivity]"));
}

#[test]
fn failing_step_size_condition_exits_2_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "fail.toml",
        "master_seed = 1\nout_dir = \"OUT\"\n[problem]\nname = \"double_well\"\n[scheme]\ntheta = 1.0\n[check]\ntau = 0.6\n"
            .replace("OUT", dir.path().join("out").to_str().unwrap())
            .as_str(),
    );
    let out = stm(&["--config", &cfg, "--command", "check"]);
    assert_eq!(code(&out), 2);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("feller"), "report printed: {stdout}");
    assert!(stdout.contains("FAIL"), "failure marked: {stdout}");
    // The per-condition table is still written for inspection.
    let csv = fs::read_to_string(dir.path().join("out/conditions.csv")).unwrap();
    assert!(csv.starts_with("condition,lhs,threshold,status\n"));
    assert!(csv.contains("feller") && csv.contains("Fail"));
}

#[test]
fn explicit_scheme_precondition_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "expl.toml",
        &BASE.replace("theta = 1.0", "theta = 0.25"),
    );
    let outdir = dir.path().join("out");
    let out = stm(&[
        "--config",
        &cfg,
        "--command",
        "lyapunov",
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("not applicable"));
}

#[test]
fn passing_check_exits_0_and_writes_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.toml", BASE);
    let outdir = dir.path().join("out");
    let out = stm(&[
        "--config",
        &cfg,
        "--command",
        "check",
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("well_posedness") && stdout.contains("pass"));
    let csv = fs::read_to_string(outdir.join("conditions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "header + four conditions: {csv}");
}

#[test]
fn manifest_reruns_reproduce_outputs_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sim.toml", BASE);
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    let run1 = stm(&[
        "--config",
        &cfg,
        "--command",
        "simulate",
        "--out",
        out1.to_str().unwrap(),
    ]);
    assert_eq!(code(&run1), 0, "{}", String::from_utf8_lossy(&run1.stderr));
    // The manifest alone (no --command, no --seed) must reproduce the run.
    let manifest = out1.join("manifest.toml");
    let run2 = stm(&[
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(code(&run2), 0, "{}", String::from_utf8_lossy(&run2.stderr));
    for name in ["trajectory.csv", "diagnostics.csv"] {
        let a = fs::read(out1.join(name)).unwrap();
        let b = fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between run and manifest re-run");
    }
    // And the second manifest differs only in its output directory.
    let m1 = fs::read_to_string(&manifest).unwrap();
    let m2 = fs::read_to_string(out2.join("manifest.toml")).unwrap();
    let strip = |s: &str| {
        s.lines()
            .filter(|l| !l.starts_with("out_dir"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&m1), strip(&m2));
}

#[test]
fn worker_count_does_not_change_output_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ly.toml", BASE);
    let mut outputs = Vec::new();
    for workers in ["1", "4"] {
        let out_dir = dir.path().join(format!("w{workers}"));
        let run = stm(&[
            "--config",
            &cfg,
            "--command",
            "lyapunov",
            "--workers",
            workers,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
        outputs.push(fs::read(out_dir.join("lyapunov.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "lyapunov.csv depends on worker count");
}

#[test]
fn seed_override_changes_and_reproduces_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "inv.toml",
        &format!("{BASE}\n[invariant]\ntau = 0.1\nburn_in = 2.0\nn_samples = 64\n"),
    );
    let run_with = |seed: &str, sub: &str| -> Vec<u8> {
        let out_dir = dir.path().join(sub);
        let run = stm(&[
            "--config",
            &cfg,
            "--command",
            "invariant",
            "--seed",
            seed,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
        fs::read(out_dir.join("samples.csv")).unwrap()
    };
    let a = run_with("7", "a");
    let b = run_with("8", "b");
    let a2 = run_with("7", "a2");
    assert_ne!(a, b, "different seeds must decorrelate samples");
    assert_eq!(a, a2, "same seed must reproduce samples bitwise");
}

#[test]
fn manifest_echoes_resolved_defaults_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", BASE);
    let outdir = dir.path().join("out");
    let run = stm(&[
        "--config",
        &cfg,
        "--command",
        "check",
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0);
    let manifest = fs::read_to_string(outdir.join("manifest.toml")).unwrap();
    for needle in [
        "tool_version",
        "command = \"check\"",
        "newton_tol",       // scheme default materialized
        "newton_max_iter",  // scheme default materialized
        "lambda",           // catalog problem parameter default materialized
        "workers",
    ] {
        assert!(manifest.contains(needle), "manifest lacks {needle}: {manifest}");
    }
}
