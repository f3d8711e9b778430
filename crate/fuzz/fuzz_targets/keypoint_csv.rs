#![no_main]

use kptransfer::interchange::{parse_keypoints_csv, write_keypoints_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = parse_keypoints_csv(text) {
        let again = parse_keypoints_csv(&write_keypoints_csv(&table)).expect("written table must parse");
        assert_eq!(again.keypoints.len(), table.keypoints.len());
    }
});
