//! 3D sinusoidal positional encoding channels.
//!
//! For each spatial axis (sagittal i, coronal j, axial k) and each frequency
//! index m, two channels carry sin and cos of the voxel coordinate scaled by
//! a geometric frequency ladder anchored at `omega_0 = 1 / 10000^(6/N)`,
//! where N is the semantic input channel count. The encoding depends only on
//! the volume shape, never on image content.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeConfig {
    /// Number of semantic input channels N that the encoding is sized for.
    pub n_input_channels: usize,
}

impl Default for SpeConfig {
    fn default() -> Self {
        SpeConfig {
            n_input_channels: crate::channels::SEMANTIC_CHANNELS,
        }
    }
}

impl SpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_input_channels == 0 {
            return Err(Error::InvalidArgument(
                "SpeConfig.n_input_channels must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Frequency indices per axis: ceil(N / 6).
    pub fn frequencies_per_axis(&self) -> usize {
        self.n_input_channels.div_ceil(6)
    }

    /// Total encoding channels: 6 * ceil(N / 6).
    pub fn n_channels(&self) -> usize {
        6 * self.frequencies_per_axis()
    }

    /// Base frequency `1 / 10000^(6/N)`.
    pub fn omega0(&self) -> f64 {
        10000f64.powf(-6.0 / self.n_input_channels as f64)
    }

    /// Ladder rung m: `omega0^(m+1)`, so rung 0 is exactly `omega0`.
    pub fn omega(&self, m: usize) -> f64 {
        10000f64.powf(-6.0 * (m as f64 + 1.0) / self.n_input_channels as f64)
    }

    /// Channel names in emission order.
    pub fn channel_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_channels());
        for axis in ["i", "j", "k"] {
            for m in 0..self.frequencies_per_axis() {
                names.push(format!("spe_sin_{axis}_{m}"));
                names.push(format!("spe_cos_{axis}_{m}"));
            }
        }
        names
    }
}

/// Compute the encoding channels for a volume shape: `(n_spe, H, W, D)`.
pub fn spe_channels(shape: [usize; 3], cfg: &SpeConfig) -> Result<Array4<f64>> {
    cfg.validate()?;
    let freqs = cfg.frequencies_per_axis();
    let n_spe = cfg.n_channels();
    let mut out = Array4::<f64>::zeros((n_spe, shape[0], shape[1], shape[2]));

    // per-axis 1D tables, broadcast over the other two axes
    for axis in 0..3 {
        for m in 0..freqs {
            let omega = cfg.omega(m);
            let sin_ch = axis * 2 * freqs + 2 * m;
            let cos_ch = sin_ch + 1;
            let table: Vec<(f64, f64)> = (0..shape[axis])
                .map(|c| {
                    let phase = omega * c as f64;
                    (phase.sin(), phase.cos())
                })
                .collect();
            for i in 0..shape[0] {
                for j in 0..shape[1] {
                    for k in 0..shape[2] {
                        let coord = [i, j, k][axis];
                        out[[sin_ch, i, j, k]] = table[coord].0;
                        out[[cos_ch, i, j, k]] = table[coord].1;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_voxel_is_sin_zero_cos_one() {
        let cfg = SpeConfig::default();
        let spe = spe_channels([4, 5, 6], &cfg).unwrap();
        for ch in 0..cfg.n_channels() {
            let expected = if ch % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(spe[[ch, 0, 0, 0]], expected);
        }
    }

    #[test]
    fn omega0_matches_formula_for_n5() {
        let cfg = SpeConfig { n_input_channels: 5 };
        let expected = 1.0 / 10000f64.powf(6.0 / 5.0);
        assert!((cfg.omega0() - expected).abs() < 1e-18);
        assert_eq!(cfg.n_channels(), 6);
        assert_eq!(cfg.omega(0), cfg.omega0());
    }

    #[test]
    fn channel_count_rule_over_n() {
        for n in 1..=12 {
            let cfg = SpeConfig { n_input_channels: n };
            assert_eq!(cfg.n_channels(), 6 * n.div_ceil(6));
        }
    }

    #[test]
    fn pythagorean_identity_everywhere() {
        let cfg = SpeConfig { n_input_channels: 7 }; // two rungs per axis
        let spe = spe_channels([6, 7, 8], &cfg).unwrap();
        let freqs = cfg.frequencies_per_axis();
        for axis in 0..3 {
            for m in 0..freqs {
                let s = axis * 2 * freqs + 2 * m;
                for i in 0..6 {
                    for j in 0..7 {
                        for k in 0..8 {
                            let sum = spe[[s, i, j, k]].powi(2) + spe[[s + 1, i, j, k]].powi(2);
                            assert!((sum - 1.0).abs() < 1e-12);
                        }
                    }
                }
            }
        }
        assert!(spe.iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn encoding_depends_only_on_shape() {
        let cfg = SpeConfig::default();
        let a = spe_channels([5, 6, 7], &cfg).unwrap();
        let b = spe_channels([5, 6, 7], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ladder_is_geometric_with_ratio_omega0() {
        let cfg = SpeConfig { n_input_channels: 12 };
        let ratio = cfg.omega(1) / cfg.omega(0);
        assert!((ratio - cfg.omega0()).abs() < 1e-15);
    }
}
