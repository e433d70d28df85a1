#![allow(dead_code)]

use gapbench_cli::ExperimentConfig;

/// A two-split experiment small enough to run in seconds.
pub const TINY: &str = r#"
schema_version = 1
seed = 4

[dataset]
kind = "preset"
name = "low-clutter"
n_train_images = 48
n_eval_images = 40

[split]
n_splits = 4
indices = [0, 1]

[[condition]]
name = "frac_1.0"
mode = "category_fraction"
fraction = 1.0

[[condition]]
name = "subset_0.5"
mode = "instance_matched_subset"
fraction = 0.5

[[variant]]
name = "one_shot"
k_shots = 1

[[variant]]
name = "empty_refs"
k_shots = 1
empty_refs = true
train_empty_refs = true
conditions = ["frac_1.0"]

[train]
epochs = 1
episodes_per_epoch = 24

[detector]
score_threshold = 1e-5

[eval]
n_repetitions = 2
"#;

pub fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}
