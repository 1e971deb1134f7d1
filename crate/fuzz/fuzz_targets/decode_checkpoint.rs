#![no_main]

use libfuzzer_sys::fuzz_target;
use segbench_core::checkpoint::{decode_checkpoint, encode_checkpoint};

// Input layout: manifest text, one NUL byte, tensor blob.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(manifest) = std::str::from_utf8(&data[..split]) else { return };
    let blob = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(c) = decode_checkpoint(manifest, blob) {
        let (m, b) = encode_checkpoint(&c.model, &c.state).expect("decoded state encodes");
        let again = decode_checkpoint(&m, &b).expect("re-encoded checkpoint decodes");
        assert_eq!(again.model, c.model);
        assert_eq!(again.state.step, c.state.step);
    }
});
