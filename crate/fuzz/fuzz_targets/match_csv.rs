#![no_main]

use kptransfer::interchange::{parse_matches_csv, write_matches_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(matches) = parse_matches_csv(text) {
        let again = parse_matches_csv(&write_matches_csv(&matches)).expect("written matches must parse");
        assert_eq!(again.len(), matches.len());
    }
});
