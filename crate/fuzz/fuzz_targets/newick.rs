#![no_main]

use libfuzzer_sys::fuzz_target;
use lagphylo::tree::parse_newick;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(tree) = parse_newick(text) {
        // Anything we accept must survive its own printer.
        parse_newick(&tree.to_newick()).expect("printed tree parses");
    }
});
