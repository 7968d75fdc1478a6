#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use vqanon::config::{PipelineConfig, Profile};

/// A network small enough to train for a few steps in well under a second.
pub fn tiny_overrides(epochs: u64, seed: u64) -> Value {
    json!({
        "seed": seed,
        "encoder": { "channels": 32, "front_blocks": 1, "post_blocks": 1, "residual_blocks": 1, "out_dim": 16 },
        "codebook": { "size": 32, "dim": 16 },
        "prosody": { "input_dim": 2, "hidden": 8 },
        "generator": {
            "base_channels": 16,
            "resblock_kernels": [3],
            "resblock_dilations": [[1]],
            "local_cond_dim": 32
        },
        "discriminator": { "width_divisor": 16 },
        "training": { "epochs": epochs, "batch_size": 2, "crop_frames": 8, "checkpoint_every_epochs": 1 }
    })
}

pub fn tiny_config(epochs: u64, seed: u64) -> PipelineConfig {
    PipelineConfig::resolve(Profile::Paper, Some(&tiny_overrides(epochs, seed)), None).unwrap()
}

pub fn write_tiny_config(dir: &Path, epochs: u64, seed: u64) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&tiny_overrides(epochs, seed)).unwrap(),
    )
    .unwrap();
    path
}

pub fn write_trials(path: &Path, rows: &[(&str, f64, &str, Option<&str>)]) {
    let text: String = rows
        .iter()
        .map(|(id, s, l, g)| match g {
            Some(g) => format!("{id} {s} {l} {g}\n"),
            None => format!("{id} {s} {l}\n"),
        })
        .collect();
    fs::write(path, text).unwrap();
}
