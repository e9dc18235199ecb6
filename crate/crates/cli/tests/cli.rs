//! End-to-end checks of the binary: exit codes, summaries, file contracts,
//! and rerun determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use magnonlink::fitting::{synthesize_dispersion, write_dispersion_csv};
use magnonlink::model::CouplingSet;

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_magnonlink"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary must spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn distance_verb_quotes_the_cable_budget() {
    let out = run(
        &["distance", "--preset", "remote_coherent", "--sigma", "0.35"],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("17.3 m"), "unexpected summary: {text}");
    assert!(text.trim().lines().count() == 1, "summary must be one line");
}

#[test]
fn sweep_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.csv");
    let second = dir.path().join("b.csv");
    let out1 = run(
        &[
            "sweep",
            "--preset",
            "positionA",
            "--out",
            first.to_str().unwrap(),
        ],
        &[],
    );
    let out2 = run(
        &[
            "sweep",
            "--preset",
            "positionA",
            "--out",
            second.to_str().unwrap(),
        ],
        &[("MAGNONLINK_THREADS", "1")],
    );
    assert!(out1.status.success() && out2.status.success());
    let summary = |o: &Output| stdout(o).split(" -> ").next().unwrap().to_string();
    assert_eq!(summary(&out1), summary(&out2));
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
}

#[test]
fn sweep_csv_has_both_directions_and_jump_summary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loop.csv");
    let out = run(
        &[
            "sweep",
            "--preset",
            "positionA",
            "--out",
            path.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("up jump at"), "summary: {text}");
    assert!(text.contains("down jump at"), "summary: {text}");

    let csv = fs::read_to_string(&path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "direction,delta_mhz,nu_s_mhz,theta_rad,ratio,stable,branch_count"
    );
    let (mut up, mut down) = (0, 0);
    for line in lines {
        match line.split(',').next().unwrap() {
            "up" => up += 1,
            "down" => down += 1,
            other => panic!("unexpected direction {other}"),
        }
    }
    assert_eq!(up, 241);
    assert_eq!(down, 241);
}

#[test]
fn sweep_map_writes_one_file_per_direction() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loop.csv");
    let map = dir.path().join("map.csv");
    let out = run(
        &[
            "sweep",
            "--preset",
            "positionB",
            "--out",
            path.to_str().unwrap(),
            "--map",
            map.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["map_up.csv", "map_down.csv"] {
        let csv = fs::read_to_string(dir.path().join(name)).unwrap();
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("delta_mhz,"), "{name}: {header}");
        assert_eq!(csv.lines().count(), 242, "{name} must cover the grid");
    }
}

#[test]
fn presets_lists_the_reference_scenarios() {
    let out = run(&["presets"], &[]);
    assert!(out.status.success());
    let text = stdout(&out);
    for name in [
        "positionA",
        "positionB",
        "remote_coherent",
        "remote_dissipative",
    ] {
        assert!(text.contains(name), "missing {name} in:\n{text}");
    }
    assert!(
        text.contains("g = 11 MHz"),
        "positionA parameters not echoed"
    );
    assert!(
        text.contains("Gamma = 6.2 MHz"),
        "positionB parameters not echoed"
    );
}

#[test]
fn missing_source_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.csv");
    let out = run(&["sweep", "--out", path.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--preset"), "{}", stderr(&out));
    assert!(!path.exists());
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.csv");
    let out = run(
        &[
            "dispersion",
            "--preset",
            "positionC",
            "--out",
            path.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("positionC"));
}

#[test]
fn scenario_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{
            "nu_c_mhz": 3820.0, "beta_mhz": 85.4, "gain_mhz": 170.8,
            "kappa_mhz": 18.7, "alpha_mhz": 1.8, "gamma_mhz": 0.0,
            "g_mzh": 11.0, "phi_rad": 0.0, "sigma": 1.0,
            "delta_mhz": [0.0]
        }"#,
    )
    .unwrap();
    let csv = dir.path().join("x.csv");
    let out = run(
        &[
            "sweep",
            "--scenario",
            path.to_str().unwrap(),
            "--out",
            csv.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("g_mzh"), "{}", stderr(&out));
}

#[test]
fn decoupled_scenario_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dark.json");
    fs::write(
        &path,
        r#"{
            "nu_c_mhz": 3820.0, "beta_mhz": 85.4, "gain_mhz": 170.8,
            "kappa_mhz": 18.7, "alpha_mhz": 1.8, "gamma_mhz": 0.0,
            "g_mhz": 0.0, "phi_rad": 0.0, "sigma": 1.0,
            "delta_mhz": [-1.0, 0.0, 1.0]
        }"#,
    )
    .unwrap();
    let csv = dir.path().join("x.csv");
    let out = run(
        &[
            "dispersion",
            "--scenario",
            path.to_str().unwrap(),
            "--out",
            csv.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn overdressed_damping_is_a_usage_error() {
    // The link back-action can drive the dressed damping negative; that is
    // a bad scenario, not a numerical failure, so it must exit 1 like the
    // directly-typed equivalent would.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("overdressed.json");
    fs::write(
        &path,
        r#"{
            "nu_c_mhz": 3820.0, "beta_mhz": 85.4, "gain_mhz": 170.8,
            "kappa_mhz": 18.7, "alpha_mhz": 1.3, "gamma_mhz": 2.7,
            "g_mhz": 0.0, "phi_rad": 1.5707963267948966, "sigma": 0.8,
            "delta_mhz": [0.0]
        }"#,
    )
    .unwrap();
    let csv = dir.path().join("x.csv");
    let out = run(
        &[
            "dispersion",
            "--scenario",
            path.to_str().unwrap(),
            "--out",
            csv.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(
        stderr(&out).contains("damping must be positive"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn missing_output_directory_is_reported() {
    let out = run(
        &[
            "sweep",
            "--preset",
            "positionA",
            "--out",
            "/nonexistent-dir/x.csv",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("does not exist"), "{}", stderr(&out));
}

#[test]
fn timetrace_writes_the_envelope_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let out = run(
        &[
            "timetrace",
            "--preset",
            "positionB",
            "--out",
            path.to_str().unwrap(),
            "--delta",
            "5",
            "--duration",
            "10",
            "--samples",
            "1024",
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("steady"), "{}", stdout(&out));
    let csv = fs::read_to_string(&path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t_us,re_a,im_a,re_m,im_m");
    assert_eq!(lines.count(), 1025);
}

#[test]
fn timetrace_accepts_a_negative_detuning() {
    // `--delta -4` must parse as a value, not as a flag.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let out = run(
        &[
            "timetrace",
            "--preset",
            "remote_dissipative",
            "--out",
            path.to_str().unwrap(),
            "--delta",
            "-4",
            "--duration",
            "10",
            "--samples",
            "1024",
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("delta = -4 MHz"), "{}", stdout(&out));
}

fn write_synthetic(path: &Path, truth: &CouplingSet<f64>, noise: f64) {
    let grid: Vec<f64> = (0..61).map(|k| -60.0 + 2.0 * k as f64).collect();
    let data = synthesize_dispersion(truth, 3820.0, &grid, noise, 7).unwrap();
    let mut buf = Vec::new();
    write_dispersion_csv(&data, &mut buf).unwrap();
    fs::write(path, buf).unwrap();
}

#[test]
fn fit_verb_recovers_generating_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("measured.csv");
    write_synthetic(&data, &CouplingSet::real(0.0, 0.0, 6.8, 5.0), 0.0);
    let json = dir.path().join("fit.json");
    let out = run(
        &[
            "fit",
            "--preset",
            "remote_dissipative",
            "--data",
            data.to_str().unwrap(),
            "--free",
            "dissipative,damping",
            "--out",
            json.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let gamma = parsed["dissipative"].as_f64().unwrap();
    let damping = parsed["damping"].as_f64().unwrap();
    assert!((gamma - 6.8).abs() < 0.1e-2 * 6.8, "Gamma = {gamma}");
    assert!((damping - 5.0).abs() < 0.1e-2 * 5.0, "alpha' = {damping}");
    assert!(parsed["converged"].as_bool().unwrap());
}

#[test]
fn fit_verb_is_thread_count_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("measured.csv");
    write_synthetic(&data, &CouplingSet::real(0.0, 0.0, 6.8, 5.0), 0.05);
    let j1 = dir.path().join("one.json");
    let j4 = dir.path().join("four.json");
    for (path, threads) in [(&j1, "1"), (&j4, "4")] {
        let out = run(
            &[
                "fit",
                "--preset",
                "remote_dissipative",
                "--data",
                data.to_str().unwrap(),
                "--free",
                "dissipative,damping",
                "--out",
                path.to_str().unwrap(),
            ],
            &[("MAGNONLINK_THREADS", threads)],
        );
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(fs::read(&j1).unwrap(), fs::read(&j4).unwrap());
}

#[test]
fn bad_free_parameter_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("measured.csv");
    write_synthetic(&data, &CouplingSet::real(0.0, 0.0, 6.8, 5.0), 0.0);
    let out = run(
        &[
            "fit",
            "--preset",
            "remote_dissipative",
            "--data",
            data.to_str().unwrap(),
            "--free",
            "dissipative,couplingz",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("couplingz"));
}
