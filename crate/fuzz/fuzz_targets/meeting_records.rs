#![no_main]

use libfuzzer_sys::fuzz_target;
use lagphylo::io::{read_records, write_records};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(recs) = read_records(text) {
        let again = read_records(&write_records("fuzz", &recs)).expect("written records parse");
        assert_eq!(again.len(), recs.len());
    }
});
