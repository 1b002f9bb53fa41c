//! Shared fixtures for the benchmarks.

use momkd::synthdata::{generate, SynthConfig};
use momkd::{Dataset, RunConfig};

/// Desk-sized model settings with a small dataset.
pub fn fixture(n_train: usize) -> (RunConfig, Dataset) {
    let cfg = RunConfig {
        latent_dim: 64,
        sphere_dim: 32,
        omics_hidden: 64,
        memory_size: 8,
        n_train,
        n_val: 10,
        n_test: 10,
        ..RunConfig::default()
    };
    let ds = generate(&SynthConfig { ..cfg.synth() }).expect("valid synthetic config");
    (cfg, ds)
}
