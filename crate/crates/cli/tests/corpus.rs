//! Replays the fuzz corpus through the parsers the fuzz targets drive.

use std::path::{Path, PathBuf};

use capinstall::config::{ExperimentConfig, Format};
use capinstall::nn::io;
use capinstall_cli::Manifest;

fn seeds(target: &str) -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files
}

fn config_round_trip(target: &str, format: Format) {
    for path in seeds(target) {
        let text = std::fs::read_to_string(&path).unwrap();
        let config = ExperimentConfig::parse(&text, format).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let emitted = match format {
            Format::Toml => config.to_toml(),
            Format::Json => config.to_json(),
        }
        .unwrap();
        assert_eq!(ExperimentConfig::parse(&emitted, format).unwrap(), config, "{}", path.display());
    }
}

#[test]
fn toml_seeds() {
    config_round_trip("config_toml", Format::Toml);
}

#[test]
fn json_seeds() {
    config_round_trip("config_json", Format::Json);
}

#[test]
fn network_seeds() {
    let mut decoded = 0;
    for path in seeds("network_decode") {
        let bytes = std::fs::read(&path).unwrap();
        if let Ok(net) = io::decode(&bytes) {
            assert_eq!(io::encode(&net), bytes);
            decoded += 1;
        }
    }
    assert!(decoded > 0);
}

#[test]
fn manifest_seeds() {
    for path in seeds("manifest_parse") {
        let manifest = Manifest::read(&path).unwrap();
        assert!(!manifest.headline.is_empty());
    }
}
