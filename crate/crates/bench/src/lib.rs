//! Shared fixtures for the benchmarks in `benches/`.

use crop_core::benchmark::BenchmarkConfig;
use crop_core::{LabeledDataset, ModelParams};

/// A default-benchmark dataset and an untrained model of matching shape.
pub fn fixture(seed: u64) -> (BenchmarkConfig, LabeledDataset, ModelParams) {
    let cfg = BenchmarkConfig::default().seeded(seed);
    let data = cfg.data.generate().expect("default spec is valid");
    let model = ModelParams::init(&cfg.layer_dims(), seed).expect("valid dims");
    (cfg, data, model)
}
