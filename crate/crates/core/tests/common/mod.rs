#![allow(dead_code)]

use fedsilo::data::{generate_benchmark_site, SkeletonFile};
use fedsilo::orchestrator::ExperimentConfig;
use fedsilo::strategies::StrategyKind;

/// A config small enough to run many times per test.
pub fn small(kind: StrategyKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.rounds = 4;
    c.warmup_rounds = 2;
    c.personalization_delay = 1;
    c.batch_size = 8;
    c.strategy.kind = kind;
    c.strategy.eta_alpha = 0.1;
    c.model.frames = 8;
    c.model.joints = 6;
    c.model.dct_coeffs = 4;
    c.model.hidden = vec![12, 8];
    c.data.frames = 8;
    c.data.joints = 6;
    c.data.site_samples = vec![30, 25, 20];
    c.network.join_timeout_secs = 30;
    c.network.io_timeout_secs = 120;
    c.network.retry_delay_ms = 50;
    c
}

/// What `gen-data` would write for one site.
pub fn site_file(cfg: &ExperimentConfig, site: usize) -> SkeletonFile {
    SkeletonFile {
        frames: cfg.data.frames,
        joints: cfg.data.joints,
        classes: cfg.data.num_classes(),
        samples: generate_benchmark_site(&cfg.data, site, cfg.seed),
    }
}
