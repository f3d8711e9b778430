#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = kptransfer::nrrd::parse_nrrd(data) {
        let _ = v.clone().into_scalar();
        let _ = v.into_labels();
    }
});
