//! Synthetic oscillatory skeleton motions.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::SkeletonSequence;

/// Motion template of one action class.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionParams {
    /// `joints x 3` rest pose.
    pub base_pose: Vec<f64>,
    /// Oscillation frequencies in cycles per sequence.
    pub frequencies: Vec<f64>,
    /// `joints x 3` oscillation amplitudes.
    pub amplitudes: Vec<f64>,
    pub noise_sigma: f64,
}

/// Site-level covariate shift applied on top of every class motion.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteShift {
    /// `joints x 3` additive pose offset.
    pub pose_offset: Vec<f64>,
    pub amplitude_scale: f64,
}

impl SiteShift {
    pub fn none(joints: usize) -> Self {
        SiteShift {
            pose_offset: vec![0.0; joints * 3],
            amplitude_scale: 1.0,
        }
    }
}

/// The classes one clinical theme (and hence one silo) draws from.
#[derive(Clone, Debug, PartialEq)]
pub struct ThemeSpec {
    pub theme_id: usize,
    pub class_ids: Vec<usize>,
    /// One template per entry of `class_ids`.
    pub motions: Vec<MotionParams>,
    pub site_shift: SiteShift,
}

/// Draws `n_samples` sequences of `frames x joints x 3` from a theme.
///
/// Each sample picks a class uniformly and a phase in `[0, 2pi)`, then
/// `x[t][v] = base[v] + offset[v] + sum_f amp[v] * scale * sin(2pi f t / T + phase) + noise`.
/// Sample ids run `0..n_samples`.
pub fn generate_site(
    theme: &ThemeSpec,
    n_samples: usize,
    frames: usize,
    joints: usize,
    seed: u64,
) -> Vec<SkeletonSequence> {
    assert_eq!(theme.class_ids.len(), theme.motions.len());
    assert!(!theme.class_ids.is_empty(), "theme without classes");
    let width = joints * 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let which = rng.random_range(0..theme.class_ids.len());
        let motion = &theme.motions[which];
        assert_eq!(motion.base_pose.len(), width);
        assert_eq!(motion.amplitudes.len(), width);
        let phase = rng.random_range(0.0..2.0 * PI);
        let noise = Normal::new(0.0, motion.noise_sigma).expect("noise_sigma >= 0");
        let scale = theme.site_shift.amplitude_scale;
        let mut coords = Vec::with_capacity(frames * width);
        for t in 0..frames {
            let wave: f64 = motion
                .frequencies
                .iter()
                .map(|f| (2.0 * PI * f * t as f64 / frames as f64 + phase).sin())
                .sum();
            for j in 0..width {
                let mut x = motion.base_pose[j]
                    + theme.site_shift.pose_offset[j]
                    + motion.amplitudes[j] * scale * wave;
                if motion.noise_sigma > 0.0 {
                    x += noise.sample(&mut rng);
                }
                coords.push(x);
            }
        }
        out.push(SkeletonSequence {
            id: i as u64,
            frames,
            joints,
            coords,
            label: theme.class_ids[which],
            theme: theme.theme_id,
        });
    }
    out
}
