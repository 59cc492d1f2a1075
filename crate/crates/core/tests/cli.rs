use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use wat_protector::corpus::{frame_input, load_corpus_case};
use wat_protector::wat::parse_module;

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("corpus")
        .join(format!("{name}.wat"))
}

fn protector(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protector"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn attack_hex(name: &str) -> String {
    let case = load_corpus_case(name).unwrap();
    hex::encode(frame_input(&case.attack_payload().unwrap()))
}

fn benign_hex(name: &str) -> String {
    let case = load_corpus_case(name).unwrap();
    hex::encode(frame_input(&case.benign_payload()))
}

#[test]
fn protect_canary_then_attack_traps_with_exit_3() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("b.wat");
    let o = protector(&[
        "protect",
        s(&corpus("hijack_indirect")),
        "--pass",
        "canary",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    parse_module(&fs::read_to_string(&out).unwrap()).unwrap();

    let hex = attack_hex("hijack_indirect");
    let o = protector(&[
        "run",
        s(&out),
        "--invoke",
        "main",
        "--input-addr",
        "4096",
        "--input-hex",
        &hex,
        "--time",
        "42",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("CanaryMismatch"), "{}", stderr(&o));
}

#[test]
fn unprotected_attack_runs_the_evil_handler() {
    let hex = attack_hex("hijack_indirect");
    let o = protector(&[
        "run",
        s(&corpus("hijack_indirect")),
        "--invoke",
        "main",
        "--input-addr",
        "4096",
        "--input-hex",
        &hex,
        "--time",
        "42",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "666");
}

#[test]
fn alias_flags_match_long_form() {
    let dir = TempDir::new().unwrap();
    for (alias, pass) in [
        ("-ASLR", "aslr"),
        ("-canary", "canary"),
        ("-canary_and_ASLR", "both"),
    ] {
        let a = dir.path().join(format!("alias_{pass}.wat"));
        let b = dir.path().join(format!("long_{pass}.wat"));
        let input = corpus("benign_copy");
        assert!(protector(&["protect", s(&input), alias, "--out", s(&a)])
            .status
            .success());
        assert!(
            protector(&["protect", s(&input), "--pass", pass, "--out", s(&b)])
                .status
                .success()
        );
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{alias}");
    }
}

#[test]
fn fixed_seed_and_time_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let mut outputs = Vec::new();
    for round in 0..2 {
        let out = dir.path().join(format!("o{round}.wat"));
        let report = dir.path().join(format!("r{round}.json"));
        let glue = dir.path().join(format!("g{round}.js"));
        let o = protector(&[
            "protect",
            s(&corpus("hijack_indirect")),
            "--pass",
            "both",
            "--shuffle-table",
            "--seed",
            "7",
            "--out",
            s(&out),
            "--report",
            s(&report),
            "--emit-glue",
            s(&glue),
            "--glue-time",
            "42",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let run = protector(&[
            "run",
            s(&out),
            "--invoke",
            "main",
            "--input-addr",
            "4096",
            "--input-hex",
            &benign_hex("hijack_indirect"),
            "--time",
            "42",
            "--json",
        ]);
        assert!(run.status.success());
        outputs.push((
            fs::read(&out).unwrap(),
            fs::read(&report).unwrap(),
            fs::read(&glue).unwrap(),
            run.stdout,
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn usage_errors_exit_1() {
    let input = corpus("benign_copy");
    // missing --out
    assert_eq!(
        protector(&["protect", s(&input), "--pass", "canary"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        protector(&["protect", s(&input), "--pass", "nope", "--out", "x"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(protector(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(protector(&[]).status.code(), Some(1));
    // --input-addr without --input-hex
    let o = protector(&["run", s(&input), "--invoke", "main", "--input-addr", "4096"]);
    assert_eq!(o.status.code(), Some(1));
    // no pass selected
    let dir = TempDir::new().unwrap();
    let o = protector(&["protect", s(&input), "--out", s(&dir.path().join("x.wat"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(protector(&["--help"]).status.code(), Some(0));
}

#[test]
fn parse_and_transform_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.wat");
    fs::write(&bad, "(module\n  (func\n    i32.frob))").unwrap();
    let out = dir.path().join("o.wat");
    let o = protector(&["protect", s(&bad), "--pass", "canary", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("3:5"), "{}", stderr(&o));
    assert!(stderr(&o).contains("i32.frob"), "{}", stderr(&o));

    let no_sp = dir.path().join("nosp.wat");
    fs::write(&no_sp, "(module (func $f))").unwrap();
    let o = protector(&["protect", s(&no_sp), "--pass", "aslr", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let o = protector(&["run", s(&corpus("benign_copy")), "--invoke", "missing"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn count_prints_category_counters() {
    let o = protector(&[
        "run",
        s(&corpus("benign_copy")),
        "--invoke",
        "main",
        "--input-addr",
        "4096",
        "--input-hex",
        &benign_hex("benign_copy"),
        "--count",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "-1604706022");
    for (line, key) in
        lines[1..]
            .iter()
            .zip(["arithmetic", "variable", "memory", "control", "total"])
    {
        assert!(line.starts_with(key), "{line}");
    }
    let nums: Vec<u64> = lines[1..]
        .iter()
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(nums[..4].iter().sum::<u64>(), nums[4]);
}

#[test]
fn args_reach_the_function() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("add.wat");
    fs::write(&f, r#"(module (func (export "add") (param i32 i32) (result i32) local.get 0 local.get 1 i32.add))"#).unwrap();
    let o = protector(&[
        "run",
        s(&f),
        "--invoke",
        "add",
        "--arg",
        "-5",
        "--arg",
        "0x10",
    ]);
    assert_eq!(stdout(&o).trim(), "11");
}

#[test]
fn report_pipeline_prediction_matches_measurement() {
    let dir = TempDir::new().unwrap();
    let base_wat = corpus("benign_copy");
    let prot_wat = dir.path().join("p.wat");
    let stats = dir.path().join("stats.json");
    let o = protector(&[
        "protect",
        s(&base_wat),
        "--pass",
        "both",
        "--out",
        s(&prot_wat),
        "--report",
        s(&stats),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hex = benign_hex("benign_copy");
    let mut runs = Vec::new();
    for (wat, name) in [(&base_wat, "base.json"), (&prot_wat, "prot.json")] {
        let o = protector(&[
            "run",
            s(wat),
            "--invoke",
            "main",
            "--input-addr",
            "4096",
            "--input-hex",
            &hex,
            "--time",
            "42",
            "--json",
        ]);
        assert!(o.status.success());
        let path = dir.path().join(name);
        fs::write(&path, &o.stdout).unwrap();
        runs.push(path);
    }
    let o = protector(&[
        "report",
        "--base",
        s(&runs[0]),
        "--protected",
        s(&runs[1]),
        "--stats",
        s(&stats),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["measured_extra"].as_i64().unwrap() > 0);
    assert_eq!(v["measured_extra"].as_i64(), v["predicted_extra"].as_i64());
    assert_eq!(v["passes"], serde_json::json!(["canary", "aslr"]));
    assert_eq!(v["paper_reference"]["canary"]["arithmetic"], 16);
    let main = v["functions"]
        .as_array()
        .unwrap()
        .iter()
        .find(|f| f["name"] == "$main")
        .unwrap();
    assert_eq!(main["calls"], 1);

    // without static counts only the measurement is available
    let o = protector(&["report", "--base", s(&runs[0]), "--protected", s(&runs[1])]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["predicted_extra"].is_null());
    assert!(v["measured_extra"].as_i64().unwrap() > 0);
}

#[test]
fn report_refuses_trapped_runs() {
    let dir = TempDir::new().unwrap();
    let prot = dir.path().join("p.wat");
    assert!(protector(&[
        "protect",
        s(&corpus("linear_overwrite")),
        "--pass",
        "canary",
        "--out",
        s(&prot)
    ])
    .status
    .success());
    let mut runs = Vec::new();
    for (wat, hex, name) in [
        (
            corpus("linear_overwrite"),
            benign_hex("linear_overwrite"),
            "b.json",
        ),
        (prot.clone(), attack_hex("linear_overwrite"), "p.json"),
    ] {
        let o = protector(&[
            "run",
            s(&wat),
            "--invoke",
            "main",
            "--input-addr",
            "4096",
            "--input-hex",
            &hex,
            "--time",
            "1",
            "--json",
        ]);
        let path = dir.path().join(name);
        fs::write(&path, &o.stdout).unwrap();
        runs.push(path);
    }
    let o = protector(&["report", "--base", s(&runs[0]), "--protected", s(&runs[1])]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trapped"), "{}", stderr(&o));
}

#[test]
fn skip_and_sp_flags() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("two.wat");
    fs::write(
        &f,
        r#"(module (memory 1)
             (global $a (mut i32) (i32.const 65536))
             (global $b (mut i32) (i32.const 0))
             (func $keep (result i32) i32.const 1)
             (func $harden (result i32) i32.const 2))"#,
    )
    .unwrap();
    let out = dir.path().join("o.wat");
    let o = protector(&["protect", s(&f), "--pass", "canary", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "ambiguous stack pointer");
    let o = protector(&[
        "protect",
        s(&f),
        "--pass",
        "canary",
        "--sp",
        "a",
        "--skip",
        "$keep",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = parse_module(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(m.functions[0].body.len(), 1);
    assert!(m.functions[1].body.len() > 1);
}

#[test]
fn shuffle_reports_uncovered_sites_and_strict_refuses() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("dyn.wat");
    fs::write(
        &f,
        r#"(module
             (type $v (func (result i32)))
             (func $a (type $v) i32.const 1)
             (func $b (type $v) i32.const 2)
             (func (export "pick") (param i32) (result i32) local.get 0 call_indirect (type $v))
             (table 2 funcref)
             (elem (i32.const 0) func $a $b))"#,
    )
    .unwrap();
    let out = dir.path().join("o.wat");
    let report = dir.path().join("r.json");
    let o = protector(&[
        "protect",
        s(&f),
        "--shuffle-table",
        "--seed",
        "1",
        "--out",
        s(&out),
        "--report",
        s(&report),
    ]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("not rewritten"), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["table_shuffle"]["uncovered"].as_array().unwrap().len(), 1);
    let o = protector(&[
        "protect",
        s(&f),
        "--shuffle-table",
        "--strict",
        "--seed",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
