#![allow(dead_code)]

use lwdna::data::{normalize_pair, synth_dataset, Dataset, SynthSpec};
use lwdna::train::{Augmentation, TrainProtocol};

pub fn small_synth(classes: usize, train: usize, test: usize, separation: f64) -> (Dataset, Dataset) {
    let spec = SynthSpec { classes, channels: 3, size: 8, train, test, separation, blobs: 3 };
    let (mut a, mut b) = synth_dataset(&spec, 0).unwrap();
    normalize_pair(&mut a, &mut b).unwrap();
    (a, b)
}

pub fn quick_protocol(epochs: usize) -> TrainProtocol {
    TrainProtocol {
        epochs,
        batch_size: 32,
        base_lr: 0.05,
        augment: Augmentation { horizontal_flip: true, pad_crop: 1 },
        ..TrainProtocol::default()
    }
}

/// Validate a JSON document against one of the shipped schemas.
pub fn assert_schema_valid(schema: &str, doc: &str) {
    let schema: serde_json::Value = serde_json::from_str(schema).unwrap();
    let doc: serde_json::Value = serde_json::from_str(doc).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(&doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "schema violations: {errors:#?}");
}
