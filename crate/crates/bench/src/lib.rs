//! Shared fixtures for the benchmarks.

use procaudit_core::data::derive_labels;
use procaudit_core::synthgen::generate;
use procaudit_core::{
    GeneratorConfig, LabelMode, Matrix, NetworkConfig, NetworkParameters, NormalizationStats,
};

pub struct Fixture {
    pub params: NetworkParameters,
    pub features: Matrix,
    pub labels: Vec<usize>,
}

/// `n` normalized synthetic rows with binary labels and a fresh network of
/// width `hidden`.
pub fn fixture(n: usize, hidden: usize) -> Fixture {
    let ds = generate(&GeneratorConfig {
        n,
        seed: 1,
        ..GeneratorConfig::default()
    })
    .expect("valid generator config");
    let labels = derive_labels(&ds, LabelMode::Binary).expect("binary labels").labels;
    let features = NormalizationStats::fit(&ds).expect("non-empty").transform(&ds);
    let params = NetworkParameters::init(&NetworkConfig {
        hidden_dim: hidden,
        ..NetworkConfig::default()
    })
    .expect("valid network config");
    Fixture {
        params,
        features,
        labels,
    }
}
