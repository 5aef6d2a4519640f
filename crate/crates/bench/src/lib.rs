//! Shared fixtures for the benchmarks: seeded models and inputs so every
//! run times the same work.

use cnnqoe::architecture::FEATURE_COUNT;
use cnnqoe::data::{normalize, random_trace};
use cnnqoe::rng::rng_for;
use cnnqoe::training::windows_for;
use cnnqoe::{build_model, Model, ModelConfig, NormalizationStats, Series, Variant, WindowSample};
use rand::Rng;

/// A freshly initialized model at the reference configuration.
pub fn reference_model(variant: Variant) -> Model {
    let config = ModelConfig::default().with_variant(variant);
    build_model(&config, &mut rng_for(1, "bench-model"), false).expect("reference config is valid")
}

pub fn model_with(kernel_size: usize, blocks: usize, filters: usize, variant: Variant) -> Model {
    let config = ModelConfig {
        kernel_size,
        blocks,
        filters,
        variant,
        ..ModelConfig::default()
    };
    build_model(&config, &mut rng_for(1, "bench-model"), true).expect("positive sizes")
}

/// Uniform random series in `[0, 1)`.
pub fn random_series(channels: usize, len: usize, seed: u64) -> Series {
    let mut rng = rng_for(seed, "bench-series");
    Series::new(channels, len, (0..channels * len).map(|_| rng.random::<f64>()).collect())
        .expect("length matches")
}

pub fn feature_window(len: usize) -> Series {
    random_series(FEATURE_COUNT, len, 7)
}

/// Training windows cut from `traces` synthetic traces of `duration` seconds.
pub fn training_samples(traces: usize, duration: usize, window: usize) -> Vec<WindowSample> {
    let db: Vec<_> = (0..traces)
        .map(|i| random_trace(3, i, duration).expect("valid synthetic trace"))
        .collect();
    let stats = NormalizationStats::fit(&db).expect("non-empty");
    let norm: Vec<_> = db.iter().map(|t| normalize(t, &stats).expect("fitted stats")).collect();
    windows_for(&norm, window).expect("window >= 1")
}
