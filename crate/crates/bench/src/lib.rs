//! Shared setup for the criterion benchmarks.

use decoseg_core::config::RunSettings;
use decoseg_core::data::{default_benchmark, SceneSource};
use decoseg_core::head::HeadConfig;
use decoseg_core::model::{AblationSwitches, ArchConfig, Network};

/// Benchmark-sized architecture (desk defaults at 48 px).
pub fn bench_arch() -> ArchConfig {
    ArchConfig {
        image_size: 48,
        ..ArchConfig::default()
    }
}

pub fn bench_network() -> Network {
    Network::new(bench_arch(), AblationSwitches::full(), HeadConfig::default(), 7).unwrap()
}

pub fn bench_source() -> SceneSource {
    SceneSource::Live(default_benchmark().source)
}

pub fn bench_settings() -> RunSettings {
    let mut s = RunSettings::default();
    s.arch = bench_arch();
    s.train.batch_size = 2;
    s.train.episodes_per_epoch = 4;
    s.train.epochs = 1;
    s.train.pretrain_epochs = 1;
    s
}
