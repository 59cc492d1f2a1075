use std::collections::BTreeSet;
use std::process::Command;

use wat_protector::corpus::{load_corpus_case, ConfigName};
use wat_protector::ir::Module;
use wat_protector::rng::emit_host_glue;

fn declared_imports(m: &Module) -> BTreeSet<(String, String)> {
    m.imports
        .iter()
        .map(|i| (i.module.clone(), i.field.clone()))
        .collect()
}

/// Reads the `"module": { "field": ... }` nesting of `createImports`.
fn glue_imports(glue: &str) -> BTreeSet<(String, String)> {
    let body = glue
        .split("function createImports()")
        .nth(1)
        .expect("createImports present");
    let mut out = BTreeSet::new();
    let mut module = None;
    for line in body.lines().map(str::trim) {
        if let Some(rest) = line.strip_prefix('"') {
            let key = &rest[..rest.find('"').unwrap()];
            if line.ends_with('{') {
                module = Some(key.to_string());
            } else {
                out.insert((
                    module.clone().expect("field inside a module"),
                    key.to_string(),
                ));
            }
        }
    }
    out
}

fn hardened() -> Module {
    load_corpus_case("benign_copy")
        .unwrap()
        .build(ConfigName::Both)
        .unwrap()
}

#[test]
fn glue_import_names_equal_module_declarations() {
    let m = hardened();
    let glue = emit_host_glue(&m, None).unwrap();
    assert_eq!(glue_imports(&glue), declared_imports(&m));
    assert_eq!(
        declared_imports(&m),
        BTreeSet::from([("env".to_string(), "time".to_string())])
    );
}

#[test]
fn glue_without_time_import_is_an_error() {
    let m = load_corpus_case("benign_copy")
        .unwrap()
        .build(ConfigName::None)
        .unwrap();
    assert!(emit_host_glue(&m, None).is_err());
}

#[test]
fn fixed_time_glue_under_node() {
    if Command::new("node").arg("--version").output().is_err() {
        eprintln!("node not found; skipping the JavaScript evaluation of the glue");
        return;
    }
    let dir = tempfile::TempDir::new().unwrap();
    let path = dir.path().join("glue.js");
    std::fs::write(&path, emit_host_glue(&hardened(), Some(42)).unwrap()).unwrap();
    let script = format!(
        "const g = require({:?}); const i = g.createImports(); \
         const names = Object.entries(i).flatMap(([m, o]) => Object.keys(o).map(f => m + '.' + f)); \
         console.log(JSON.stringify({{names, time: i.env.time(), again: i.env.time()}}));",
        path.to_str().unwrap()
    );
    let o = Command::new("node").args(["-e", &script]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["names"], serde_json::json!(["env.time"]));
    assert_eq!(v["time"], 42);
    assert_eq!(v["again"], 42);

    let live = dir.path().join("live.js");
    std::fs::write(&live, emit_host_glue(&hardened(), None).unwrap()).unwrap();
    let script = format!(
        "const t = require({:?}).createImports().env.time(); console.log(Number.isInteger(t) && t === (t | 0));",
        live.to_str().unwrap()
    );
    let o = Command::new("node").args(["-e", &script]).output().unwrap();
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "true");
}
