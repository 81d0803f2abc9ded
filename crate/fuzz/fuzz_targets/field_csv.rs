#![no_main]

use libfuzzer_sys::fuzz_target;
use pkirch_core::grid::{read_field_csv, write_field_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(u) = read_field_csv(text) {
        let mut out = Vec::new();
        write_field_csv(&u, &mut out).unwrap();
        let back = read_field_csv(std::str::from_utf8(&out).unwrap()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.values()), bits(u.values()));
    }
});
