#![no_main]

use libfuzzer_sys::fuzz_target;
use segbench_core::data::labels::parse_label_table;
use segbench_core::data::LabelMapping;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = parse_label_table(text) {
        let mapping = LabelMapping::from_table(&table);
        for raw in 0..=255u8 {
            let _ = mapping.map(raw);
        }
    }
});
