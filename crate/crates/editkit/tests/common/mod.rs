#![allow(dead_code)]

use std::path::{Path, PathBuf};

use sketchmod::network::{ModelConfig, SketchMod};
use sketchmod::{Sketch, Stroke};

pub const MODEL_SEED: u64 = 7;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn sketch() -> Sketch {
    Sketch::from_json(&std::fs::read_to_string(fixture("sketch.json")).unwrap()).unwrap()
}

pub fn stroke() -> Stroke {
    serde_json::from_str(&std::fs::read_to_string(fixture("stroke.json")).unwrap()).unwrap()
}

/// Untrained but fully deterministic model.
pub fn model() -> SketchMod {
    SketchMod::new(ModelConfig::tiny(), MODEL_SEED).unwrap()
}

pub fn schema() -> serde_json::Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schema/sketchmod-api.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Validates `doc` against one `$defs` entry of the API schema.
pub fn assert_valid(def: &str, doc: &serde_json::Value) {
    let mut root = schema();
    root["$ref"] = serde_json::Value::String(format!("#/$defs/{def}"));
    let validator = jsonschema::validator_for(&root).expect("schema compiles");
    let errors: Vec<String> = validator
        .iter_errors(doc)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{def} violations: {errors:#?}");
}

pub fn assert_invalid(def: &str, doc: &serde_json::Value) {
    let mut root = schema();
    root["$ref"] = serde_json::Value::String(format!("#/$defs/{def}"));
    let validator = jsonschema::validator_for(&root).expect("schema compiles");
    assert!(!validator.is_valid(doc), "{def} accepted {doc}");
}

/// Compares `actual` with `tests/golden/<name>`. Set `UPDATE_GOLDEN=1` to
/// rewrite the file instead.
pub fn check_golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|_| panic!("missing golden {}; run with UPDATE_GOLDEN=1", path.display()));
    assert!(expected == actual, "output differs from golden {}", path.display());
}
