//! Synthetic volumes for examples, smoke training, and tests.
//!
//! These are desk-scale stand-ins for real acquisitions: nested-sphere
//! "brains" with three tissue classes plus head, and simple padded cubes for
//! mask-sampling checks.

use ndarray::Array3;

use crate::rng::RngStream;
use crate::volume::{
    Modality, TissueLabelVolume, Volume, CLASS_BACKGROUND, CLASS_CORTICAL_GM, CLASS_CSF,
    CLASS_HEAD, CLASS_WM,
};

/// Mean intensity per tissue class; the knob used to emulate scanner or
/// contrast differences between cohorts.
#[derive(Debug, Clone, Copy)]
pub struct TissueContrast {
    pub wm: f64,
    pub gm: f64,
    pub csf: f64,
    pub head: f64,
}

impl TissueContrast {
    pub fn t1_default() -> Self {
        TissueContrast {
            wm: 0.75,
            gm: 0.50,
            csf: 0.15,
            head: 0.65,
        }
    }

    pub fn flair_default() -> Self {
        TissueContrast {
            wm: 0.45,
            gm: 0.62,
            csf: 0.10,
            head: 0.55,
        }
    }

    fn value(&self, class: u8) -> f64 {
        match class {
            CLASS_WM => self.wm,
            CLASS_CORTICAL_GM => self.gm,
            CLASS_CSF => self.csf,
            _ => self.head,
        }
    }
}

/// Unit-intensity cube with a zero border of `margin` voxels on every side.
pub fn padded_cube(n: usize, margin: usize) -> Volume {
    let mut data = Array3::zeros((n, n, n));
    let hi = n.saturating_sub(margin);
    if margin < hi {
        data.slice_mut(ndarray::s![margin..hi, margin..hi, margin..hi])
            .fill(1.0);
    }
    Volume::from_array(data, Modality::T1w)
}

/// Nested-sphere brain phantom: WM core, GM shell, CSF shell, head outside.
///
/// With `floor > 0` every voxel is nonzero (background becomes faint head
/// tissue); with `floor == 0` the outermost shell is true zero background.
/// Returns (T1w, FLAIR, tissue labels); intensities lie in `[0, 1]`.
pub fn brain_volumes(n: usize, floor: f64, seed: u64) -> (Volume, Volume, TissueLabelVolume) {
    brain_volumes_with_contrast(
        n,
        floor,
        seed,
        TissueContrast::t1_default(),
        TissueContrast::flair_default(),
    )
}

pub fn brain_volumes_with_contrast(
    n: usize,
    floor: f64,
    seed: u64,
    t1c: TissueContrast,
    flc: TissueContrast,
) -> (Volume, Volume, TissueLabelVolume) {
    let mut labels = Array3::<u8>::zeros((n, n, n));
    let mut t1 = Array3::zeros((n, n, n));
    let mut fl = Array3::zeros((n, n, n));
    let mut rng = RngStream::new(seed).derive("phantom");
    let c = (n as f64 - 1.0) / 2.0;
    let rmax = n as f64 / 2.0;

    for ((i, j, k), lab) in labels.indexed_iter_mut() {
        let (x, y, z) = (i as f64 - c, j as f64 - c, k as f64 - c);
        let r = (x * x + y * y + z * z).sqrt() / rmax;
        let class = if r < 0.40 {
            CLASS_WM
        } else if r < 0.58 {
            CLASS_CORTICAL_GM
        } else if r < 0.70 {
            CLASS_CSF
        } else if r < 0.92 || floor > 0.0 {
            CLASS_HEAD
        } else {
            CLASS_BACKGROUND
        };
        *lab = class;

        // mild smooth shading plus seeded texture, so edges and gradients exist
        let shade = 0.06 * ((i as f64) * 0.31).sin() * ((j as f64) * 0.17).cos()
            + 0.04 * ((k as f64) * 0.23).sin();
        let jitter = 0.015 * rng.standard_normal();
        if class == CLASS_BACKGROUND {
            t1[[i, j, k]] = 0.0;
            fl[[i, j, k]] = 0.0;
        } else {
            let base_floor = if floor > 0.0 { floor } else { 0.01 };
            let (mut a, mut b) = (t1c.value(class), flc.value(class));
            if class == CLASS_HEAD && r >= 0.92 {
                // faint halo when the background is lifted off zero
                a = floor;
                b = floor;
            }
            t1[[i, j, k]] = (a + shade + jitter).clamp(base_floor, 1.0);
            fl[[i, j, k]] = (b + shade + jitter).clamp(base_floor, 1.0);
        }
    }

    let tis = TissueLabelVolume::from_array(labels).unwrap();
    (
        Volume::from_array(t1, Modality::T1w),
        Volume::from_array(fl, Modality::Flair),
        tis,
    )
}

/// Volumes emulating synthetic atrophy: a wedge of the GM shell is relabeled
/// as CSF and its image intensity dropped to CSF levels.
///
/// Returns (tis_orig, tis_atr, t1_atr, flair_atr, changed-voxel list).
pub fn atrophied_brain(
    n: usize,
    floor: f64,
    seed: u64,
) -> (
    TissueLabelVolume,
    TissueLabelVolume,
    Volume,
    Volume,
    Vec<[usize; 3]>,
) {
    let (t1, fl, tis_orig) = brain_volumes(n, floor, seed);
    let mut tis_atr = tis_orig.data.clone();
    let mut t1_atr = t1.data.clone();
    let mut fl_atr = fl.data.clone();
    let mut changed = Vec::new();
    let t1c = TissueContrast::t1_default();
    let flc = TissueContrast::flair_default();

    for ((i, j, k), &lab) in tis_orig.data.indexed_iter() {
        // thin the GM shell in the +k hemisphere wedge
        if lab == CLASS_CORTICAL_GM && k > (2 * n) / 3 && i > n / 3 {
            tis_atr[[i, j, k]] = CLASS_CSF;
            t1_atr[[i, j, k]] = t1c.csf;
            fl_atr[[i, j, k]] = flc.csf;
            changed.push([i, j, k]);
        }
    }

    (
        tis_orig,
        TissueLabelVolume::from_array(tis_atr).unwrap(),
        Volume::from_array(t1_atr, Modality::T1w),
        Volume::from_array(fl_atr, Modality::Flair),
        changed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_has_all_requested_tissues() {
        let (t1, fl, tis) = brain_volumes(32, 0.05, 1);
        let hist = tis.class_histogram();
        assert!(hist[CLASS_WM as usize] > 0);
        assert!(hist[CLASS_CORTICAL_GM as usize] > 0);
        assert!(hist[CLASS_CSF as usize] > 0);
        assert!(hist[CLASS_HEAD as usize] > 0);
        assert_eq!(hist[CLASS_BACKGROUND as usize], 0, "floor > 0 keeps all voxels nonzero");
        for v in [&t1, &fl] {
            assert!(v.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!(v.data.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn zero_floor_gives_true_background() {
        let (t1, _fl, tis) = brain_volumes(32, 0.0, 1);
        let hist = tis.class_histogram();
        assert!(hist[CLASS_BACKGROUND as usize] > 0);
        for ((i, j, k), &c) in tis.data.indexed_iter() {
            if c == CLASS_BACKGROUND {
                assert_eq!(t1.data[[i, j, k]], 0.0);
            }
        }
    }

    #[test]
    fn atrophy_changes_are_gm_to_csf() {
        let (orig, atr, _t1, _fl, changed) = atrophied_brain(32, 0.05, 4);
        assert!(!changed.is_empty());
        for &[i, j, k] in &changed {
            assert_eq!(orig.data[[i, j, k]], CLASS_CORTICAL_GM);
            assert_eq!(atr.data[[i, j, k]], CLASS_CSF);
        }
    }

    #[test]
    fn phantom_is_deterministic_per_seed() {
        let (a, _, _) = brain_volumes(24, 0.05, 7);
        let (b, _, _) = brain_volumes(24, 0.05, 7);
        assert_eq!(a.data, b.data);
    }
}
