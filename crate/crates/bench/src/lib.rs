//! Shared fixtures for the benchmarks.

use weakmcn::harness::{suite_model_config, Config, FeatureCache, Model};
use weakmcn::params::ParamStore;
use weakmcn::synth::{generate, Dataset, DatasetConfig};
use weakmcn::wrec::init_detector;
use weakmcn::Tensor;

/// Deterministic pseudo-random tensor without pulling in an RNG crate.
pub fn wave(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |k| ((k as f64 + phase) * 0.618).sin())
}

/// A dataset of `count` training pairs, an untrained detector and the
/// matching feature cache.
pub struct StepFixture {
    pub dataset: Dataset,
    pub cache: FeatureCache,
    pub model: Model,
}

impl StepFixture {
    pub fn new(config: &Config, count: usize) -> Self {
        let dataset = generate(&DatasetConfig {
            count,
            split: [1.0, 0.0, 0.0],
            ..config.dataset.clone()
        })
        .expect("valid dataset config");
        let mut detector = ParamStore::new();
        init_detector(&mut detector, 0);
        let cache = FeatureCache::build(&dataset, &detector).expect("features");
        let model = Model::new(config, &detector).expect("model");
        Self { dataset, cache, model }
    }

    pub fn small(count: usize) -> Self {
        Self::new(&suite_model_config(), count)
    }
}
