use std::path::Path;
use std::process::{Command, Output};

fn prefgen(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefgen"))
        .args(args)
        .env("PREFGEN_OUT", out)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&o.stdout));
    })
}

fn stderr_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&o.stderr));
    })
}

const SMALL: [&str; 4] = ["--corpus.users", "6", "--reflection.steps=5", "--users=2"];

#[test]
fn gen_data_twice_reports_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let first = prefgen(dir.path(), &[&["gen-data"][..], &SMALL].concat());
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    assert_eq!(stdout_json(&first)["status"], "written");
    let second = prefgen(dir.path(), &[&["gen-data"][..], &SMALL].concat());
    assert_eq!(stdout_json(&second)["status"], "unchanged");
    assert!(dir.path().join("default/0/corpus.jsonl").is_file());
}

#[test]
fn pipeline_runs_end_to_end_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen-data", "train-rm", "reflect", "eval"] {
        let o = prefgen(dir.path(), &[&[cmd][..], &SMALL].concat());
        assert!(
            o.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert_eq!(stdout_json(&o)["command"], cmd);
    }
    let seed_dir = dir.path().join("default/0");
    let o = prefgen(dir.path(), &["report", seed_dir.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("experiment,kind,seed,arm,metric,value\n"));
    assert!(csv.contains("default,seed,0,pipeline,delta_r,"));
}

#[test]
fn missing_input_is_a_json_error_with_exit_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = prefgen(dir.path(), &["train-rm"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr_json(&o);
    assert_eq!(err["error"]["kind"], "missing_artifact");
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("run gen-data first"));
    assert!(o.stdout.is_empty());
}

#[test]
fn bad_config_is_a_json_error_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = prefgen(dir.path(), &["gen-data", "--reflection.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["kind"], "config");

    let o = prefgen(dir.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["kind"], "usage");
}

#[test]
fn empty_report_prints_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = prefgen(dir.path(), &["report"]);
    assert!(o.status.success());
    assert_eq!(
        String::from_utf8(o.stdout).unwrap(),
        "experiment,kind,seed,arm,metric,value\n"
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "seed = 4\n[reflection]\nsteps = 50\nbeta = 0.4\n").unwrap();
    let o = prefgen(
        dir.path(),
        &[
            "show-config",
            "--config",
            file.to_str().unwrap(),
            "--reflection.steps",
            "7",
            "--set",
            "seed=5",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let v: toml::Table = text.parse().unwrap();
    assert_eq!(v["seed"].as_integer(), Some(5));
    assert_eq!(v["reflection"]["steps"].as_integer(), Some(7));
    assert_eq!(v["reflection"]["beta"].as_float(), Some(0.4));
}

#[test]
fn out_dir_flag_beats_environment() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let o = prefgen(
        env_dir.path(),
        &[
            &["gen-data", "--out-dir", flag_dir.path().to_str().unwrap()][..],
            &SMALL,
        ]
        .concat(),
    );
    assert!(o.status.success());
    assert!(flag_dir.path().join("default/0/manifest.json").is_file());
    assert!(!env_dir.path().join("default").exists());
}
