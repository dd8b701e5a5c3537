#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use ossa_cli::ExperimentConfig;
use ossa_core::types::write_features;
use ossa_core::{ClassId, FeatureVector, LabeledDataset, LabeledSample, Split};

/// Small synthetic run that finishes in seconds.
pub fn tiny_config(extra: &[&str]) -> ExperimentConfig {
    let mut sets: Vec<String> = [
        "dataset.synth.train=30",
        "dataset.synth.val=0",
        "dataset.synth.test=10",
        "dataset.synth.unseen_test=10",
        "dataset.synth.patch_size=40",
        "dataset.synth.crop_size=32",
        "model.hidden=[16]",
        "model.embedding_dim=8",
        "pretrain.classes=2",
        "pretrain.per_class=10",
        "pretrain.patch_size=32",
        "pretrain.crop_size=32",
        "pretrain.epochs=1",
        "finetune.epochs=2",
        "eval.grid_points=20",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    sets.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::from_toml_str("", &sets).unwrap()
}

/// Deterministic jitter in `[-0.5, 0.5)`.
fn jitter(i: usize, j: usize) -> f64 {
    ((i * 7919 + j * 104_729) % 1000) as f64 / 1000.0 - 0.5
}

/// Two seen classes and one unseen class, far apart along separate axes.
pub fn blob_dataset(per_class: usize) -> LabeledDataset {
    let centers = [[10.0, 0.0, 0.0, 0.0], [0.0, 10.0, 0.0, 0.0], [0.0, 0.0, 40.0, 40.0]];
    let mut samples = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        let seen = c < 2;
        let splits: &[Split] = if seen { &[Split::Train, Split::Test] } else { &[Split::Test] };
        for &split in splits {
            for i in 0..per_class {
                let k = c * 10_000 + split as usize * 1000 + i;
                let v = center.iter().enumerate().map(|(j, m)| m + jitter(k, j)).collect();
                samples.push(LabeledSample {
                    features: FeatureVector::new(v).unwrap(),
                    label: ClassId(c as u32),
                    split,
                    seen,
                });
            }
        }
    }
    let table: BTreeMap<_, _> = (0..3).map(|c| (ClassId(c), format!("class{c}"))).collect();
    LabeledDataset::new(samples, table).unwrap()
}

pub fn write_dataset(data: &LabeledDataset, path: &Path) {
    let mut bytes = Vec::new();
    write_features(data, &mut bytes).unwrap();
    std::fs::write(path, bytes).unwrap();
}

/// Config reading features from `path` with a small network.
pub fn file_config(path: &Path, extra: &[&str]) -> ExperimentConfig {
    let text = format!("[dataset]\nfeatures = {:?}\n", path.display().to_string());
    let mut sets: Vec<String> = ["model.hidden=[16]", "model.embedding_dim=8", "finetune.epochs=30", "finetune.lr=0.01"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    sets.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::from_toml_str(&text, &sets).unwrap()
}
