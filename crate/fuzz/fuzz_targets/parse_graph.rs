#![no_main]

use libfuzzer_sys::fuzz_target;
use segbench_core::graph::parse_graph;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = parse_graph(text) {
        let printed = g.to_text();
        let again = parse_graph(&printed).expect("printed graph reparses");
        assert_eq!(again.to_text(), printed);
    }
});
