#![allow(dead_code)]

use fedtsp_core::protocol::{ExperimentConfig, Method};

/// Desk-scale hierarchical benchmark: 2 superclusters of 3 classes,
/// 16 input dims, 16 feature dims, 10 clients with Dir(0.5) skew.
pub fn desk_config(method: Method, seed: u64, rounds: usize) -> ExperimentConfig {
    ExperimentConfig {
        method,
        seed,
        rounds,
        num_clients: 10,
        feature_dim: 16,
        alpha: 0.5,
        prefix_len: 4,
        ..ExperimentConfig::default()
    }
}

/// A few-round variant small enough for property-style tests.
pub fn tiny_config(method: Method, seed: u64, rounds: usize) -> ExperimentConfig {
    let mut cfg = desk_config(method, seed, rounds);
    cfg.num_clients = 4;
    cfg.local_epochs = 1;
    cfg.server_epochs = 3;
    cfg.synthetic.samples_per_class = 30;
    cfg.global_test_per_class = 4;
    cfg
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
