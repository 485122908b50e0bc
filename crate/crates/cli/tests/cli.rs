use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tmmp::inference::{fit_conjugate, fixed_params, summarize, FitConfig, DEFAULT_QUANTILES};
use tmmp::io::{read_data_table, read_observations};
use tmmp::spec::{compile_spec, parse_spec, SpecData};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn fixture(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

fn tmmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmmp")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn gbd_inputs() -> Vec<String> {
    vec![
        "--spec".into(),
        fixture("gbd.tmmp"),
        "--covariates".into(),
        fixture("gbd_covariates.csv"),
        "--offsets".into(),
        fixture("gbd_offsets.csv"),
    ]
}

fn run_gbd(cmd: &str, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![cmd.to_string()];
    args.extend(gbd_inputs());
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    tmmp(&refs)
}

fn simulate_gbd(dir: &Path) -> PathBuf {
    let out = run_gbd("simulate", &["--out", dir.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("observations.csv")
}

/// Rows of a csv file keyed by header name.
fn read_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(String::from)).collect())
        .collect()
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().to_string(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for i in 0..2 {
        let dir = tmp.path().join(format!("run{i}"));
        let obs = simulate_gbd(&dir);
        let out = run_gbd(
            "fit",
            &["--obs", obs.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--seed", "9", "--iters", "50", "--chains", "2"],
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let out = run_gbd("project", &["--out", dir.to_str().unwrap(), "--seed", "3", "--t-star", "2025"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        runs.push(dir_contents(&dir));
    }
    assert!(runs[0].contains_key("projection_summary.csv"));
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn missing_observations_fail_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = run_gbd(
        "fit",
        &["--obs", tmp.path().join("nope.csv").to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--seed", "1"],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
    assert!(!out_dir.exists());
}

#[test]
fn projecting_to_the_last_grid_time_writes_headers_only() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("fit");
    let obs = simulate_gbd(&dir);
    let out = run_gbd("fit", &["--obs", obs.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--seed", "2", "--iters", "20"]);
    assert_eq!(code(&out), 0);
    let out = run_gbd("project", &["--out", dir.to_str().unwrap(), "--seed", "2", "--t-star", "2020"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["projection_draws.csv", "projection_summary.csv"] {
        let text = fs::read_to_string(dir.join(f)).unwrap();
        assert_eq!(text.lines().count(), 1, "{f}: {text}");
    }
}

#[test]
fn pooled_projection_is_rejected_for_stationary_smoother() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("fit");
    let obs = simulate_gbd(&dir);
    let out = run_gbd("fit", &["--obs", obs.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--seed", "2", "--iters", "20"]);
    assert_eq!(code(&out), 0);
    let out = run_gbd(
        "project",
        &["--out", dir.to_str().unwrap(), "--seed", "2", "--t-star", "2025", "--proj-mode", "pooled", "--W", "0.5"],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("r = 0"));
}

#[test]
fn validate_exit_codes() {
    assert_eq!(code(&tmmp(&["validate", &fixture("b3.tmmp")])), 0);

    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixtures().join("b3.tmmp")).unwrap();
    let truncated = tmp.path().join("truncated.tmmp");
    fs::write(&truncated, &text[..text.find("[Offsets]").unwrap()]).unwrap();
    let out = tmmp(&["validate", truncated.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("missing section: Offsets"));

    let nmr = fs::read_to_string(fixtures().join("nmr.tmmp"))
        .unwrap()
        .replace("beta_2 = vague(lo=0.005, hi=0.5)", "beta_2 = vague");
    let warned = tmp.path().join("warned.tmmp");
    fs::write(&warned, nmr).unwrap();
    let out = tmmp(&["validate", warned.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("warning"));
}

#[test]
fn compare_needs_two_specs() {
    assert_eq!(code(&tmmp(&["compare", &fixture("gbd.tmmp")])), 2);
    let tmp = tempfile::tempdir().unwrap();
    let out = tmmp(&[
        "compare",
        &fixture("gbd.tmmp"),
        &fixture("b3.tmmp"),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Matérn") && stdout.contains("independent"));
    let csv = fs::read_to_string(tmp.path().join("comparison.csv")).unwrap();
    assert!(csv.starts_with("field,gbd,b3"));
}

#[test]
fn diagnostics_list_each_free_scalar_once() {
    let tmp = tempfile::tempdir().unwrap();
    let obs = tmp.path().join("obs.csv");
    let mut rows = vec!["population,time,value,sampling_variance,source".to_string()];
    for (i, p) in ["north", "east", "south", "west"].iter().enumerate() {
        for t in (1990..=2020).step_by(3) {
            let v = (-3.0 + 0.1 * i as f64 - 0.03 * (t - 2005) as f64).exp();
            rows.push(format!("{p},{t},{v},0.01,survey"));
        }
    }
    fs::write(&obs, rows.join("\n")).unwrap();
    let dir = tmp.path().join("fit");
    let out = tmmp(&[
        "fit",
        "--spec",
        &fixture("b3.tmmp"),
        "--obs",
        obs.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "4",
        "--iters",
        "100",
        "--warmup",
        "100",
    ]);
    assert!(matches!(code(&out), 0 | 2), "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> = read_rows(&dir.join("diagnostics.csv"))
        .into_iter()
        .map(|r| r["parameter"].clone())
        .collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    for p in ["north", "east", "south", "west"] {
        for base in ["alpha_0_c", "alpha_1_c", "sigma2_c"] {
            assert!(names.contains(&format!("{base}[{p}]")), "{base}[{p}]");
        }
    }
    assert!(names.contains(&"omega2_survey".to_string()));
    assert!(names.iter().any(|n| n.starts_with("sigma2_c:mu")));
}

#[test]
fn conjugate_summary_matches_library_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("fit");
    let obs = simulate_gbd(&dir);
    let out = run_gbd(
        "fit",
        &["--obs", obs.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--seed", "6", "--iters", "200"],
    );
    assert_eq!(code(&out), 0);

    let spec = parse_spec(&fs::read_to_string(fixtures().join("gbd.tmmp")).unwrap()).unwrap();
    let data = SpecData {
        covariates: Some(read_data_table(&fixtures().join("gbd_covariates.csv")).unwrap()),
        offsets: Some(read_data_table(&fixtures().join("gbd_offsets.csv")).unwrap()),
        groupings: None,
    };
    let c = compile_spec(&spec, data).unwrap();
    let params = fixed_params(&c.model, &c.data_model, &c.bindings).unwrap();
    let config = FitConfig {
        chains: 4,
        iterations: 200,
        warmup: 1000,
        seed: 6,
    };
    let observations = read_observations(&obs).unwrap();
    let fit = fit_conjugate(&c.model, &c.data_model, &observations, &params, &config).unwrap();
    let expected = summarize(&fit, &DEFAULT_QUANTILES).unwrap();

    let rows = read_rows(&dir.join("summary.csv"));
    assert_eq!(rows.len(), expected.rows.len());
    for (row, (pop, time, values)) in rows.iter().zip(&expected.rows) {
        assert_eq!(&row["population"], pop);
        assert_eq!(row["time"].parse::<f64>().unwrap(), *time);
        let median: f64 = row["median"].parse().unwrap();
        assert!((median - values[2]).abs() <= 1e-6 * values[2].abs().max(1.0));
    }
}
