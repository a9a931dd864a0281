use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn advmiss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advmiss"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_preset(name: &str, dir: &Path, edits: &[(&str, &str)]) -> String {
    let out = advmiss(&["preset", name]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut text = String::from_utf8(out.stdout).unwrap();
    for (from, to) in edits {
        assert!(text.contains(from), "preset lacks {from}");
        text = text.replacen(from, to, 1);
    }
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn missing_schema_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    fs::write(&data, "x,y\n1,2\n").unwrap();
    let schema = dir.path().join("absent_schema.toml");
    let config = dir.path().join("c.toml");
    fs::write(
        &config,
        format!(
            "target = \"x\"\nfamily = \"gaussian\"\n[data]\nsource = \"csv\"\npath = {:?}\nschema = {:?}\n",
            data, schema
        ),
    )
    .unwrap();
    let out = advmiss(&["attack", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("absent_schema.toml"), "{}", stderr(&out));
}

#[test]
fn missing_config_is_named() {
    let out = advmiss(&["evaluate", "--config", "/no/such/dir/run.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("/no/such/dir/run.toml"));
}

#[test]
fn attack_evaluate_defend_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_preset("fig1", dir.path(), &[("epochs = 3000", "epochs = 5")]);
    let common = ["--config", &config, "--out-dir", out_dir.to_str().unwrap()];

    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        let o = advmiss(&args);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    };
    run("attack", &[]);
    for f in ["mechanism.json", "trace.csv", "summary.json"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    assert_eq!(csv_rows(&out_dir.join("trace.csv")).len(), 6);

    run("evaluate", &["--trials", "1"]);
    let results = csv_rows(&out_dir.join("results.csv"));
    assert_eq!(results[0][..4], ["victim", "attack", "mechanism", "trials"]);
    assert_eq!(results.len(), 3);
    let mnar = results.iter().find(|r| r[2] == "mnar").unwrap();

    run("defend", &["--fractions", "0"]);
    let sweep = csv_rows(&out_dir.join("sweep.csv"));
    assert_eq!(sweep.len(), 2);
    // With one trial, the undefended sweep row is the evaluated MNAR fit.
    assert_eq!(sweep[1][3], mnar[6]);
}

#[test]
fn mechanism_dimension_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let housing = write_preset(
        "housing",
        dir.path(),
        &[("n = 5000", "n = 300"), ("epochs = 600", "epochs = 2")],
    );
    let fig1 = write_preset("fig1", dir.path(), &[]);
    let out_dir = dir.path().join("h");
    let o = advmiss(&["attack", "--config", &housing, "--out-dir", out_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mech = out_dir.join("mechanism.json");
    let o = advmiss(&["evaluate", "--config", &fig1, "--mechanism", mech.to_str().unwrap(), "--trials", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("columns"), "{}", stderr(&o));
}

#[test]
fn bad_victim_name_rejected() {
    let o = advmiss(&["demo-fig1", "--victim", "mice"]);
    assert!(!o.status.success());
}
