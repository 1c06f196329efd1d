//! Orthonormal type-II DCT over joint trajectories.

use std::f64::consts::PI;

/// Precomputed truncated DCT-II basis for a fixed sequence length.
///
/// Row `k` holds `s_k * cos(pi * (t + 0.5) * k / T)` with `s_0 = sqrt(1/T)`
/// and `s_k = sqrt(2/T)` otherwise, so the full `T x T` matrix is orthogonal.
#[derive(Clone, Debug)]
pub struct DctBasis {
    frames: usize,
    coeffs: usize,
    table: Vec<f64>,
}

impl DctBasis {
    pub fn new(frames: usize, coeffs: usize) -> Self {
        assert!(coeffs >= 1 && coeffs <= frames, "need 1 <= coeffs <= frames");
        let n = frames as f64;
        let mut table = Vec::with_capacity(coeffs * frames);
        for k in 0..coeffs {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for t in 0..frames {
                table.push(scale * (PI * (t as f64 + 0.5) * k as f64 / n).cos());
            }
        }
        DctBasis {
            frames,
            coeffs,
            table,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn coeffs(&self) -> usize {
        self.coeffs
    }

    /// Forward transform of one series of length `frames`.
    pub fn forward_into(&self, series: impl Fn(usize) -> f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.coeffs);
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.table[k * self.frames..(k + 1) * self.frames];
            let mut acc = 0.0;
            for (t, b) in row.iter().enumerate() {
                acc += b * series(t);
            }
            *o = acc;
        }
    }

    pub fn forward(&self, series: &[f64]) -> Vec<f64> {
        assert_eq!(series.len(), self.frames);
        let mut out = vec![0.0; self.coeffs];
        self.forward_into(|t| series[t], &mut out);
        out
    }

    /// Transpose of the truncated basis: reconstructs a series from its
    /// leading coefficients. Exact inverse when `coeffs == frames`.
    pub fn inverse(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.coeffs);
        let mut out = vec![0.0; self.frames];
        for (k, c) in coeffs.iter().enumerate() {
            let row = &self.table[k * self.frames..(k + 1) * self.frames];
            for (o, b) in out.iter_mut().zip(row) {
                *o += c * b;
            }
        }
        out
    }
}
