#![no_main]

use libfuzzer_sys::fuzz_target;
use pkirch_core::experiment::{exponent_table, parse_exponent_args};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let args: Vec<&str> = text.split_whitespace().collect();
    if let Ok(cfg) = parse_exponent_args(&args) {
        let _ = exponent_table(&cfg);
    }
});
