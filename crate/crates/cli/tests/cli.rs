use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

fn scratch(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("magrt-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    d
}

fn magrt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magrt")).args(args).output().expect("run magrt")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn run(cmd: &str, name: &str, dir: &Path, extra: &[&str]) -> Output {
    let sc = scenario(name);
    let mut args = vec![cmd, "--scenario", sc.to_str().unwrap(), "--output-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    magrt(&args)
}

#[test]
fn missing_scenario_is_a_config_error() {
    assert_eq!(code(&magrt(&["trace"])), 2);
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    let dir = scratch("config");
    assert_eq!(code(&run("santalo", "santalo_flat", &dir, &["--set", "run.bogus=1"])), 2);
    assert_eq!(code(&run("santalo", "santalo_flat", &dir, &["--set", "coefficients.a=\"exp(\""])), 2);
    assert_eq!(code(&run("santalo", "santalo_flat", &dir, &["--threads", "0"])), 2);
    let out = run("santalo", "santalo_flat", &dir, &["--set", "system.dim=4"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn non_simple_system_is_refused() {
    let dir = scratch("refuse");
    let out = run("trace", "trace_circle", &dir, &["--set", "system.field=\"3\""]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn failed_check_exits_with_four_and_still_writes_the_report() {
    let dir = scratch("assert");
    let out = run("santalo", "santalo_flat", &dir, &["--set", "run.santalo.max_discrepancy=1e-9"]);
    assert_eq!(code(&out), 4);
    let report = fs::read_to_string(dir.join("santalo.json")).unwrap();
    assert!(report.contains("\"pass\": false"));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn outputs_carry_version_hash_and_resolution() {
    let dir = scratch("fields");
    let out = run("trace", "trace_circle", &dir, &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("trace.json")).unwrap()).unwrap();
    assert_eq!(report["format_version"], 1);
    let hash = report["scenario_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(report["resolution"].as_str().unwrap().starts_with("n2"));
    let csv = fs::read_to_string(dir.join("trace_paths.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("# format_version=1") && header.contains(hash), "{header}");
    // floats are written in full precision scientific notation
    let row = csv.lines().nth(2).unwrap();
    assert!(row.split(',').all(|f| f.contains('e')), "{row}");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn output_settings_do_not_change_the_scenario_hash() {
    let (a, b) = (scratch("hash_a"), scratch("hash_b"));
    run("trace", "trace_circle", &a, &[]);
    run("trace", "trace_circle", &b, &["--set", "output.csv=false"]);
    let hash = |d: &Path| {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("trace.json")).unwrap()).unwrap();
        v["scenario_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash(&a), hash(&b));
    assert!(!b.join("trace_paths.csv").exists());
    let c = scratch("hash_c");
    run("trace", "trace_circle", &c, &["--seed", "99"]);
    assert_ne!(hash(&a), hash(&c));
    for d in [a, b, c] {
        let _ = fs::remove_dir_all(d);
    }
}

#[test]
fn invert_refuses_a_matrix_from_another_grid() {
    let dir = scratch("matrix");
    let out = run("albedo", "invert_plane", &dir, &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let matrix = dir.join("albedo.alb");
    assert!(matrix.exists());
    let set = format!("run.invert.matrix=\"{}\"", matrix.display());

    let out = run("invert", "invert_plane", &dir.join("same"), &["--set", &set]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run("invert", "invert_plane", &dir.join("other"), &["--set", &set, "--set", "grids.boundary_positions=[40]"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));

    fs::write(&matrix, b"not a matrix").unwrap();
    let out = run("invert", "invert_plane", &dir.join("junk"), &["--set", &set]);
    assert_eq!(code(&out), 2);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn single_thread_matches_the_pool() {
    let (a, b) = (scratch("pool_a"), scratch("pool_b"));
    assert_eq!(code(&run("forward", "forward_cond1", &a, &["--threads", "1"])), 0);
    assert_eq!(code(&run("forward", "forward_cond1", &b, &["--threads", "2"])), 0);
    for f in ["forward.json", "forward_solution.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    for d in [a, b] {
        let _ = fs::remove_dir_all(d);
    }
}
