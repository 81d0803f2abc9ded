//! Replays the checked-in fuzz seeds through the same invariants the fuzz targets assert.

use std::fs;
use std::path::{Path, PathBuf};

use pkirch_core::acceptance::{parse_criterion, CRITERIA};
use pkirch_core::experiment::{exponent_table, parse_exponent_args, ExperimentConfig};
use pkirch_core::grid::{read_field_csv, write_field_csv};

fn seeds(target: &str) -> Vec<(PathBuf, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let text = fs::read_to_string(&p).unwrap();
            (p, text)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn config_seeds_parse_and_round_trip() {
    for (path, text) in seeds("config_parse") {
        let cfg = ExperimentConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(again.to_toml(), cfg.to_toml());
    }
}

#[test]
fn field_seeds_round_trip_bit_exact() {
    for (path, text) in seeds("field_csv") {
        let u = read_field_csv(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let mut out = Vec::new();
        write_field_csv(&u, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text, "{}", path.display());
    }
}

#[test]
fn field_parser_rejects_truncations() {
    for (_, text) in seeds("field_csv") {
        let lines: Vec<&str> = text.lines().collect();
        for cut in 0..lines.len() - 1 {
            assert!(
                read_field_csv(&lines[..cut].join("\n")).is_err(),
                "accepted {cut} lines"
            );
        }
    }
}

#[test]
fn exponent_seeds() {
    for (path, text) in seeds("exponent_args") {
        let args: Vec<&str> = text.split_whitespace().collect();
        let cfg = parse_exponent_args(&args).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(exponent_table(&cfg).is_ok(), "{}", path.display());
    }
}

#[test]
fn criterion_seeds() {
    for (path, text) in seeds("criterion") {
        match parse_criterion(&text) {
            Ok(id) => assert!(CRITERIA.iter().any(|(c, _)| *c == id)),
            Err(_) => assert!(matches!(text.as_str(), "11" | "x"), "{}", path.display()),
        }
    }
}
