//! Replays the config fuzz seeds through the parser.

use std::path::PathBuf;

use segbench_cli::config::{parse_config, ExperimentConfig};

#[test]
fn config_seeds() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/parse_config");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let result = parse_config(&text).and_then(|d| ExperimentConfig::from_doc(&d));
        assert_eq!(result.is_err(), stem.starts_with("bad_"), "{stem}: {result:?}");
        seen += 1;
    }
    assert!(seen >= 5);
}
