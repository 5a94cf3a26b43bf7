//! Random patch-based dropout mask generation and the Gaussian noise fill.
//!
//! A mask is the union of randomly placed boxes whose per-axis lengths are
//! 5-10% of the volume size. Boxes containing background (zero) voxels of the
//! reference image are rejected; sampling stops once the accumulated raw box
//! volume reaches a random budget below 1% of the image volume.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::volume::{Modality, TissueLabelVolume, Volume};

/// Consecutive rejected placements tolerated before giving up; bounds the
/// sampling loop on images with thin foreground.
pub const REJECTION_BUDGET: usize = 10_000;

/// Half-open voxel box `[start, end)` accepted into a dropout mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBounds {
    pub start: [usize; 3],
    pub end: [usize; 3],
}

impl PatchBounds {
    pub fn volume(&self) -> usize {
        (0..3).map(|a| self.end[a] - self.start[a]).product()
    }

    pub fn contains(&self, v: [usize; 3]) -> bool {
        (0..3).all(|a| self.start[a] <= v[a] && v[a] < self.end[a])
    }
}

/// Binary dropout mask plus the bookkeeping of how it was sampled.
///
/// `total_drop_volume` accumulates each accepted box's raw volume, so
/// overlapping boxes double-count; the distinct 1-voxel count is therefore
/// at most `total_drop_volume`.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub data: Array3<u8>,
    pub accepted_patches: Vec<PatchBounds>,
    pub total_drop_volume: usize,
}

/// JSON sidecar for reproducibility audits of a generated mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub seed: u64,
    pub algorithm: String,
    pub shape: [usize; 3],
    pub max_drop_volume: f64,
    pub total_drop_volume: usize,
    pub accepted_patches: Vec<PatchBounds>,
}

impl DropoutMask {
    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Mask as an intensity-like volume, for NIfTI serialization.
    pub fn to_volume(&self, like: &Volume) -> Volume {
        like.with_data(self.data.mapv(|v| v as f64), Modality::Mask)
    }

    /// Rebuild from a saved binary volume, optionally restoring the patch
    /// list from its sidecar.
    pub fn from_volume(v: &Volume, sidecar: Option<&MaskSidecar>) -> Result<Self> {
        let data = v.data.mapv(|x| if x != 0.0 { 1u8 } else { 0u8 });
        let (accepted_patches, total_drop_volume) = match sidecar {
            Some(s) => (s.accepted_patches.clone(), s.total_drop_volume),
            None => (Vec::new(), data.iter().filter(|&&x| x != 0).count()),
        };
        Ok(DropoutMask {
            data,
            accepted_patches,
            total_drop_volume,
        })
    }

    pub fn sidecar(&self, seed: u64, max_drop_volume: f64) -> MaskSidecar {
        MaskSidecar {
            seed,
            algorithm: crate::rng::RNG_ALGORITHM.to_string(),
            shape: self.shape(),
            max_drop_volume,
            total_drop_volume: self.total_drop_volume,
            accepted_patches: self.accepted_patches.clone(),
        }
    }
}

impl MaskSidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Per-axis box length bounds: `[floor(0.05 K), floor(0.1 K)]`, kept at least
/// 1 so degenerate sizes stay usable on very small test volumes.
fn patch_bounds_for_axis(k: usize) -> (usize, usize) {
    let max = ((k as f64) * 0.10) as usize;
    let min = ((k as f64) * 0.05) as usize;
    let max = max.max(1);
    let min = min.clamp(1, max);
    (min, max)
}

/// Sample a dropout mask over `reference` (a normalized intensity volume).
///
/// Returns the mask together with the accepted boxes. Deterministic in
/// (`reference`, `rng` state).
pub fn generate_dropout_mask(reference: &Volume, rng: &mut RngStream) -> Result<DropoutMask> {
    generate_dropout_mask_impl(reference, rng).map(|(m, _)| m)
}

/// As [`generate_dropout_mask`], also returning the sampled volume budget
/// for sidecar records.
pub fn generate_dropout_mask_with_budget(
    reference: &Volume,
    rng: &mut RngStream,
) -> Result<(DropoutMask, f64)> {
    generate_dropout_mask_impl(reference, rng)
}

fn generate_dropout_mask_impl(
    reference: &Volume,
    rng: &mut RngStream,
) -> Result<(DropoutMask, f64)> {
    let shape = reference.shape();
    if !reference.data.iter().any(|&x| x != 0.0) {
        return Err(Error::InvalidArgument(
            "dropout reference volume has no nonzero foreground".into(),
        ));
    }

    let voxels = (shape[0] * shape[1] * shape[2]) as f64;
    let mut ratio = rng.uniform(0.0, 0.01);
    while ratio == 0.0 {
        ratio = rng.uniform(0.0, 0.01);
    }
    let max_drop_volume = voxels * ratio;

    let bounds: Vec<(usize, usize)> = shape.iter().map(|&k| patch_bounds_for_axis(k)).collect();

    let mut mask = Array3::<u8>::zeros((shape[0], shape[1], shape[2]));
    let mut accepted = Vec::new();
    let mut total_drop_volume = 0usize;
    let mut consecutive_rejections = 0usize;

    while (total_drop_volume as f64) < max_drop_volume {
        let mut start = [0usize; 3];
        let mut end = [0usize; 3];
        for a in 0..3 {
            let (min_len, max_len) = bounds[a];
            let k = shape[a];
            start[a] = rng.uniform_int(0, k - min_len);
            let len = rng.uniform_int(min_len, max_len);
            end[a] = (start[a] + len).min(k);
        }
        let patch = PatchBounds { start, end };

        let region = reference.data.slice(ndarray::s![
            start[0]..end[0],
            start[1]..end[1],
            start[2]..end[2]
        ]);
        if region.iter().any(|&x| x == 0.0) {
            consecutive_rejections += 1;
            if consecutive_rejections >= REJECTION_BUDGET {
                return Err(Error::PatchRejectionBudget {
                    attempts: consecutive_rejections,
                });
            }
            continue;
        }
        consecutive_rejections = 0;

        mask.slice_mut(ndarray::s![
            start[0]..end[0],
            start[1]..end[1],
            start[2]..end[2]
        ])
        .fill(1);
        total_drop_volume += patch.volume();
        accepted.push(patch);
    }

    Ok((
        DropoutMask {
            data: mask,
            accepted_patches: accepted,
            total_drop_volume,
        },
        max_drop_volume,
    ))
}

/// The noise fill: replace mask voxels with standard-normal draws, leaving
/// everything else bit-identical.
pub fn apply_noise_fill(v: &Volume, mask: &DropoutMask, rng: &mut RngStream) -> Result<Volume> {
    if v.shape() != mask.shape() {
        return Err(Error::shape_mismatch(
            "apply_noise_fill",
            &v.shape(),
            &mask.shape(),
        ));
    }
    let mut out = v.data.clone();
    for (o, &m) in out.iter_mut().zip(mask.data.iter()) {
        if m != 0 {
            *o = rng.standard_normal();
        }
    }
    Ok(v.with_data(out, v.modality))
}

/// Tissue labels restricted to the dropout region: `tis` where the mask is 1,
/// zero elsewhere.
pub fn make_mtis(tis: &TissueLabelVolume, mask: &DropoutMask) -> Result<Volume> {
    if tis.shape() != mask.shape() {
        return Err(Error::shape_mismatch("make_mtis", &tis.shape(), &mask.shape()));
    }
    let mut out = Array3::<f64>::zeros(tis.data.dim());
    ndarray::Zip::from(&mut out)
        .and(&tis.data)
        .and(&mask.data)
        .for_each(|o, &t, &m| {
            *o = if m != 0 { t as f64 } else { 0.0 };
        });
    Ok(Volume {
        data: out,
        spacing: tis.spacing,
        affine: tis.affine,
        modality: Modality::Label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom;

    #[test]
    fn patch_bounds_match_percent_rule() {
        assert_eq!(patch_bounds_for_axis(100), (5, 10));
        assert_eq!(patch_bounds_for_axis(128), (6, 12));
        assert_eq!(patch_bounds_for_axis(48), (2, 4));
        assert_eq!(patch_bounds_for_axis(10), (1, 1));
    }

    #[test]
    fn seeded_mask_on_phantom_is_inside_foreground_and_deterministic() {
        let reference = phantom::padded_cube(40, 4);
        let run = |seed| {
            let mut rng = RngStream::new(seed);
            generate_dropout_mask(&reference, &mut rng).unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a.data, b.data);
        assert_eq!(a.accepted_patches, b.accepted_patches);
        assert!(!a.accepted_patches.is_empty());
        for ((i, j, k), &m) in a.data.indexed_iter() {
            if m != 0 {
                assert!(reference.data[[i, j, k]] != 0.0, "mask voxel on background");
            }
        }
        let c = run(12);
        assert_ne!(a.data, c.data, "different seeds should differ");
    }

    #[test]
    fn budget_and_monotonicity_invariants() {
        let reference = phantom::padded_cube(64, 4);
        for seed in 0..20 {
            let mut rng = RngStream::new(seed);
            let (m, max_budget) = generate_dropout_mask_with_budget(&reference, &mut rng).unwrap();
            assert!(m.count_ones() > 0);
            assert!(m.count_ones() <= m.total_drop_volume);
            let pre_final: usize = m.total_drop_volume
                - m.accepted_patches.last().unwrap().volume();
            assert!((pre_final as f64) < max_budget);
            assert!(max_budget < 0.01 * 64f64.powi(3));
            // mask 1-voxels are exactly the union of accepted boxes
            for ((i, j, k), &v) in m.data.indexed_iter() {
                let inside = m.accepted_patches.iter().any(|p| p.contains([i, j, k]));
                assert_eq!(v != 0, inside);
            }
        }
    }

    #[test]
    fn impossible_placement_exhausts_rejection_budget() {
        // one bright voxel: every candidate box must contain background
        let mut data = ndarray::Array3::zeros((64, 64, 64));
        data[[32, 32, 32]] = 1.0;
        let v = Volume::from_array(data, Modality::T1w);
        let mut rng = RngStream::new(0);
        assert!(matches!(
            generate_dropout_mask(&v, &mut rng),
            Err(Error::PatchRejectionBudget { .. })
        ));
    }

    #[test]
    fn empty_reference_is_rejected() {
        let v = Volume::from_array(ndarray::Array3::zeros((16, 16, 16)), Modality::T1w);
        let mut rng = RngStream::new(0);
        assert!(generate_dropout_mask(&v, &mut rng).is_err());
    }

    #[test]
    fn noise_fill_identity_outside_mask() {
        let v = phantom::padded_cube(24, 2);
        let mut mask = Array3::<u8>::zeros((24, 24, 24));
        mask.slice_mut(ndarray::s![4..9, 6..10, 8..12]).fill(1);
        let dm = DropoutMask {
            data: mask,
            accepted_patches: vec![PatchBounds {
                start: [4, 6, 8],
                end: [9, 10, 12],
            }],
            total_drop_volume: 80,
        };
        let mut rng = RngStream::new(3);
        let filled = apply_noise_fill(&v, &dm, &mut rng).unwrap();
        for ((i, j, k), &val) in filled.data.indexed_iter() {
            if dm.data[[i, j, k]] == 0 {
                assert_eq!(val.to_bits(), v.data[[i, j, k]].to_bits());
            }
        }
    }

    #[test]
    fn noise_fill_on_all_zero_mask_is_identity() {
        let v = phantom::padded_cube(16, 2);
        let dm = DropoutMask {
            data: Array3::zeros((16, 16, 16)),
            accepted_patches: vec![],
            total_drop_volume: 0,
        };
        let mut rng = RngStream::new(5);
        let filled = apply_noise_fill(&v, &dm, &mut rng).unwrap();
        assert_eq!(filled.data, v.data);
    }

    #[test]
    fn noise_fill_full_mask_has_standard_normal_stats() {
        let v = phantom::padded_cube(32, 0);
        let dm = DropoutMask {
            data: Array3::from_elem((32, 32, 32), 1),
            accepted_patches: vec![],
            total_drop_volume: 32 * 32 * 32,
        };
        let mut rng = RngStream::new(1234);
        let filled = apply_noise_fill(&v, &dm, &mut rng).unwrap();
        let n = filled.data.len() as f64;
        let mean = filled.data.sum() / n;
        let var = filled.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn mtis_restricts_labels_to_mask() {
        let (_t1, _fl, tis) = phantom::brain_volumes(24, 0.05, 9);
        let mut mask = Array3::<u8>::zeros((24, 24, 24));
        mask.slice_mut(ndarray::s![10..13, 10..13, 10..13]).fill(1);
        let dm = DropoutMask {
            data: mask,
            accepted_patches: vec![],
            total_drop_volume: 27,
        };
        let m = make_mtis(&tis, &dm).unwrap();
        for ((i, j, k), &v) in m.data.indexed_iter() {
            if dm.data[[i, j, k]] != 0 {
                assert_eq!(v, tis.data[[i, j, k]] as f64);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn mtis_all_one_mask_equals_labels() {
        let (_t1, _fl, tis) = phantom::brain_volumes(16, 0.05, 2);
        let dm = DropoutMask {
            data: Array3::from_elem((16, 16, 16), 1),
            accepted_patches: vec![],
            total_drop_volume: 16 * 16 * 16,
        };
        let m = make_mtis(&tis, &dm).unwrap();
        assert_eq!(m.data, tis.data.mapv(|c| c as f64));
    }

    #[test]
    fn sidecar_roundtrip() {
        let reference = phantom::padded_cube(40, 4);
        let mut rng = RngStream::new(77);
        let (m, budget) = generate_dropout_mask_with_budget(&reference, &mut rng).unwrap();
        let sc = m.sidecar(77, budget);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.json");
        sc.save(&p).unwrap();
        let back = MaskSidecar::load(&p).unwrap();
        assert_eq!(back.accepted_patches, m.accepted_patches);
        assert_eq!(back.total_drop_volume, m.total_drop_volume);
    }
}
