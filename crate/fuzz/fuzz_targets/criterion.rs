#![no_main]

use libfuzzer_sys::fuzz_target;
use pkirch_core::acceptance::{parse_criterion, CRITERIA};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(id) = parse_criterion(text) {
        assert!(CRITERIA.iter().any(|(c, _)| *c == id));
    }
});
