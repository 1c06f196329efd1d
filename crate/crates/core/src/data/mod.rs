//! Multi-site skeleton datasets: a synthetic three-theme benchmark and the
//! on-disk format used to ship real exports to client processes.

mod skelfile;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SkeletonSequence;
use crate::orchestrator::seed_stream;

pub use skelfile::{
    load_skeleton_file, parse_skeleton_file, render_skeleton_file, write_skeleton_file,
    SkeletonFile,
};
pub use synth::{generate_site, MotionParams, SiteShift, ThemeSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("record {index}: {reason}")]
    Record { index: usize, reason: String },
    #[error("site needs at least 2 samples for a train/test split, got {0}")]
    TooSmall(usize),
}

/// Clinical themes and their actions, one silo each.
pub const PAPER_THEMES: [(&str, &[&str]); 3] = [
    (
        "Robotic-assisted",
        &["Arm Swing", "Body Swing", "Chest Expansion", "Squat"],
    ),
    (
        "Rhythm",
        &["Drumming", "Maracas Forward Shaking", "Maracas Shaking", "Sing and Clap"],
    ),
    ("Yoga", &["Frog Pose", "Tree Pose", "Twist Pose"]),
];

/// Total action classes across the three themes.
pub const PAPER_CLASSES: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Label-disjoint silos, one theme each.
    Paper,
    /// Every silo sees every class; silos differ by covariate shift only.
    FeatureShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub mode: PartitionMode,
    /// Scales every site shift; 0 makes all sites identically distributed.
    pub heterogeneity: f64,
    /// Samples generated per site, before the train/test split.
    pub site_samples: Vec<usize>,
    pub frames: usize,
    pub joints: usize,
    pub noise_sigma: f64,
    /// Peak oscillation amplitude of an active joint group.
    pub amplitude: f64,
    /// Standard deviation of per-site pose offsets at heterogeneity 1.
    pub site_offset: f64,
    /// Spread of per-site amplitude scales at heterogeneity 1.
    pub site_amplitude_spread: f64,
    pub test_fraction: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            mode: PartitionMode::Paper,
            heterogeneity: 1.0,
            site_samples: vec![200, 150, 100],
            frames: 32,
            joints: 25,
            noise_sigma: 0.4,
            amplitude: 1.0,
            site_offset: 0.125,
            site_amplitude_spread: 0.075,
            test_fraction: 0.2,
        }
    }
}

impl BenchmarkConfig {
    pub fn num_sites(&self) -> usize {
        self.site_samples.len()
    }

    pub fn num_classes(&self) -> usize {
        PAPER_CLASSES
    }

    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |f: &str, m: String| out.push((f.to_string(), m));
        if self.mode == PartitionMode::Paper && self.site_samples.len() != 3 {
            bad(
                "site_samples",
                format!("paper mode needs exactly 3 sites, got {}", self.site_samples.len()),
            );
        }
        if self.site_samples.is_empty() {
            bad("site_samples", "need at least one site".into());
        }
        if let Some(n) = self.site_samples.iter().find(|&&n| n < 2) {
            bad("site_samples", format!("each site needs >= 2 samples, got {n}"));
        }
        if self.frames == 0 {
            bad("frames", "must be >= 1".into());
        }
        if self.joints == 0 {
            bad("joints", "must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0) {
            bad("noise_sigma", "must be >= 0".into());
        }
        if !(self.heterogeneity >= 0.0) {
            bad("heterogeneity", "must be >= 0".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bad("test_fraction", "must be in (0, 1)".into());
        }
        out
    }

    /// Per-site class lists.
    pub fn site_classes(&self) -> Vec<Vec<usize>> {
        match self.mode {
            PartitionMode::Paper => {
                let mut next = 0;
                PAPER_THEMES
                    .iter()
                    .map(|(_, actions)| {
                        let ids = (next..next + actions.len()).collect();
                        next += actions.len();
                        ids
                    })
                    .collect()
            }
            PartitionMode::FeatureShift => {
                vec![(0..PAPER_CLASSES).collect(); self.num_sites()]
            }
        }
    }
}

/// One silo's private data.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteDataset {
    pub client_id: usize,
    pub train: Vec<SkeletonSequence>,
    pub test: Vec<SkeletonSequence>,
}

const JOINT_GROUPS: usize = 5;

/// Motion vocabulary shared by every site: class `c` oscillates joint group
/// `c % 5` at `1 + c % 4` cycles per sequence, giving 11 distinct
/// (group, frequency) pairs. Each joint moves along one fixed direction
/// whatever the class, so body-part primitives recur across themes.
fn class_motions(cfg: &BenchmarkConfig, seed: u64) -> Vec<MotionParams> {
    let width = cfg.joints * 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_stream(seed, 0, 0, "motion-vocabulary"));
    let base_pose: Vec<f64> = (0..width).map(|_| StandardNormal.sample(&mut rng)).collect();
    let directions: Vec<[f64; 3]> = (0..cfg.joints)
        .map(|_| {
            let d: [f64; 3] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            d.map(|x| x / norm)
        })
        .collect();
    (0..PAPER_CLASSES)
        .map(|c| {
            let group = c % JOINT_GROUPS;
            let freq = 1.0 + (c % 4) as f64;
            let mut amplitudes = vec![0.0; width];
            for v in (0..cfg.joints).filter(|v| v % JOINT_GROUPS == group) {
                for k in 0..3 {
                    amplitudes[v * 3 + k] = cfg.amplitude * directions[v][k];
                }
            }
            MotionParams {
                base_pose: base_pose.clone(),
                frequencies: vec![freq],
                amplitudes,
                noise_sigma: cfg.noise_sigma,
            }
        })
        .collect()
}

fn site_shift(cfg: &BenchmarkConfig, site: usize, seed: u64) -> SiteShift {
    let h = cfg.heterogeneity;
    if h == 0.0 {
        return SiteShift::none(cfg.joints);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_stream(seed, 0, site as u64, "site-shift"));
    let pose_offset = (0..cfg.joints * 3)
        .map(|_| h * cfg.site_offset * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect::<Vec<f64>>();
    // Spread sites evenly around 1: with spread s, 1 - s, 1, 1 + s for three sites.
    let n = cfg.num_sites().max(2) as f64;
    let centered = 2.0 * site as f64 / (n - 1.0) - 1.0;
    let amplitude_scale = 1.0 + h * cfg.site_amplitude_spread * centered;
    SiteShift {
        pose_offset,
        amplitude_scale,
    }
}

/// Theme descriptions for every site of the benchmark.
pub fn benchmark_themes(cfg: &BenchmarkConfig, seed: u64) -> Vec<ThemeSpec> {
    let motions = class_motions(cfg, seed);
    cfg.site_classes()
        .into_iter()
        .enumerate()
        .map(|(site, class_ids)| ThemeSpec {
            theme_id: site,
            motions: class_ids.iter().map(|&c| motions[c].clone()).collect(),
            class_ids,
            site_shift: site_shift(cfg, site, seed),
        })
        .collect()
}

/// Raw (unsplit) samples of one site; what `gen-data` writes to disk.
pub fn generate_benchmark_site(cfg: &BenchmarkConfig, site: usize, seed: u64) -> Vec<SkeletonSequence> {
    let themes = benchmark_themes(cfg, seed);
    generate_site(
        &themes[site],
        cfg.site_samples[site],
        cfg.frames,
        cfg.joints,
        seed_stream(seed, 0, site as u64, "data"),
    )
}

/// `(train, test)` sizes a split of `n` samples produces.
pub fn split_sizes(n: usize, test_fraction: f64) -> Result<(usize, usize), DataError> {
    if n < 2 {
        return Err(DataError::TooSmall(n));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    Ok((n - n_test, n_test))
}

/// Seeded train/test split of one site's samples.
pub fn split_site(
    samples: Vec<SkeletonSequence>,
    client_id: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<SiteDataset, DataError> {
    let n = samples.len();
    let (_, n_test) = split_sizes(n, test_fraction)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed_stream(seed, 0, client_id as u64, "split"));
    order.shuffle(&mut rng);
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in samples.into_iter().zip(is_test) {
        if t {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    Ok(SiteDataset {
        client_id,
        train,
        test,
    })
}

/// All sites, generated and split. Pure function of `(cfg, seed)`.
pub fn make_benchmark(cfg: &BenchmarkConfig, seed: u64) -> Result<Vec<SiteDataset>, DataError> {
    (0..cfg.num_sites())
        .map(|site| {
            split_site(
                generate_benchmark_site(cfg, site, seed),
                site,
                cfg.test_fraction,
                seed,
            )
        })
        .collect()
}

/// Aggregation weights `n_i / n`.
pub fn aggregation_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}
