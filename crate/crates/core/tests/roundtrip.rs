mod common;

use common::{gen_program, GenOptions};
use wat_protector::corpus::{case_names, load_corpus_case, ConfigName};
use wat_protector::ir::Module;
use wat_protector::wat::{parse_module, print_module};

fn round_trip(m: &Module) {
    let text = print_module(m);
    let once = parse_module(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));
    let again = parse_module(&print_module(&once)).unwrap();
    assert_eq!(once, again);
    assert_eq!(print_module(&again), text);
}

#[test]
fn corpus_modules_round_trip() {
    for name in case_names() {
        let case = load_corpus_case(name).unwrap();
        for config in ConfigName::ALL {
            round_trip(&case.build(config).unwrap());
        }
    }
}

#[test]
fn generated_modules_round_trip_exactly() {
    for seed in 0..300 {
        let opts = GenOptions {
            functions: 1 + (seed % 5) as usize,
            names: seed % 3 != 0,
            time_import: seed % 4 == 0,
            extras: seed % 2 == 0,
        };
        let m = gen_program(seed, opts);
        round_trip(&m);
        // the IR itself survives printing, not just its reparse
        assert_eq!(parse_module(&print_module(&m)).unwrap(), m, "seed {seed}");
    }
}

#[test]
fn empty_module() {
    round_trip(&parse_module("(module)").unwrap());
    assert_eq!(print_module(&Module::default()), "(module)");
}
