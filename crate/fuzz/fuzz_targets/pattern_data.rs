#![no_main]

use libfuzzer_sys::fuzz_target;
use lagphylo::model::PatternData;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = PatternData::from_tsv(text) {
        assert_eq!(PatternData::from_tsv(&p.to_tsv()).expect("round trip"), p);
    }
});
