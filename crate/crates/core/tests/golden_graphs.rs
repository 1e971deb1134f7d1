//! Checked-in text serialisations of every stock encoder and model.
//!
//! Run with `SEGBENCH_BLESS=1` to rewrite the files after an intentional
//! architecture change.

use std::path::PathBuf;

use segbench_core::graph::{parse_graph, NetworkGraph};
use segbench_core::meta_arch::{build_model, build_segnet_reference, DecoderKind, DEFAULT_NUM_CLASSES};
use segbench_core::zoo::{build_encoder, EncoderKind, EncoderOptions};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn stock_graphs() -> Vec<(String, NetworkGraph)> {
    let opts = EncoderOptions::default();
    let mut out = Vec::new();
    for enc in EncoderKind::ALL {
        out.push((enc.as_str().to_string(), build_encoder(enc, &opts).unwrap().graph));
        for dec in DecoderKind::ALL {
            let m = build_model(enc, dec, &opts, DEFAULT_NUM_CLASSES).unwrap();
            out.push((format!("{}-{}", dec.as_str(), enc.as_str()), m.graph));
        }
    }
    out.push(("segnet".into(), build_segnet_reference(DEFAULT_NUM_CLASSES).unwrap().graph));
    out
}

#[test]
fn stock_graphs_match_golden_files() {
    let bless = std::env::var_os("SEGBENCH_BLESS").is_some();
    let graphs = stock_graphs();
    assert_eq!(graphs.len(), 4 + 12 + 1);
    for (name, graph) in graphs {
        let path = golden_dir().join(format!("{name}.graph"));
        let text = graph.to_text();
        if bless {
            std::fs::create_dir_all(golden_dir()).unwrap();
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        let golden = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(golden == text, "{name} differs from {}", path.display());
        assert_eq!(parse_graph(&golden).unwrap(), graph, "{name}");
    }
}
