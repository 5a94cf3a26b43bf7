//! Quantitative validation: L1, PSNR, SSIM, and per-tissue intensity
//! histograms.
//!
//! L1 is reported both raw (on `[0,1]` intensities) and x100. PSNR uses
//! dynamic range 1 and is capped at 100 dB for (near-)identical images. SSIM
//! is computed in 3D with a 7^3 uniform window over valid (fully inside)
//! window positions, biased window moments, and the standard constants
//! `C1 = 0.01^2`, `C2 = 0.03^2`.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dropout::DropoutMask;
use crate::error::{Error, Result};
use crate::volume::{TissueLabelVolume, Volume};

pub const SSIM_WINDOW: usize = 7;
pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSet {
    pub l1: f64,
    pub l1_x100: f64,
    pub psnr_db: f64,
    /// `None` when no full SSIM window fits the evaluation region.
    pub ssim: Option<f64>,
}

/// Per-image quantitative results over the whole image and, when a dropout
/// mask is supplied, over the mask region alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub whole: MetricSet,
    pub masked: Option<MetricSet>,
}

/// Mean and standard deviation over a set of per-image results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsAggregate {
    pub n: usize,
    pub l1_mean: f64,
    pub l1_sd: f64,
    pub psnr_mean: f64,
    pub psnr_sd: f64,
    pub ssim_mean: Option<f64>,
    pub ssim_sd: Option<f64>,
}

pub fn compute_metrics(
    orig: &Volume,
    pred: &Volume,
    mask: Option<&DropoutMask>,
) -> Result<MetricsReport> {
    if orig.shape() != pred.shape() {
        return Err(Error::shape_mismatch(
            "compute_metrics",
            &orig.shape(),
            &pred.shape(),
        ));
    }
    if let Some(m) = mask {
        if m.shape() != orig.shape() {
            return Err(Error::shape_mismatch(
                "compute_metrics mask",
                &orig.shape(),
                &m.shape(),
            ));
        }
    }
    let whole = metric_set(&orig.data, &pred.data, None)?;
    let masked = match mask {
        Some(m) => Some(metric_set(&orig.data, &pred.data, Some(&m.data))?),
        None => None,
    };
    Ok(MetricsReport { whole, masked })
}

fn metric_set(a: &Array3<f64>, b: &Array3<f64>, mask: Option<&Array3<u8>>) -> Result<MetricSet> {
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    match mask {
        None => {
            for (&x, &y) in a.iter().zip(b.iter()) {
                let d = x - y;
                abs_sum += d.abs();
                sq_sum += d * d;
            }
            count = a.len();
        }
        Some(m) => {
            for ((&x, &y), &mm) in a.iter().zip(b.iter()).zip(m.iter()) {
                if mm != 0 {
                    let d = x - y;
                    abs_sum += d.abs();
                    sq_sum += d * d;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::EmptyMask {
                    context: "compute_metrics".into(),
                });
            }
        }
    }
    let l1 = abs_sum / count as f64;
    let mse = sq_sum / count as f64;
    Ok(MetricSet {
        l1,
        l1_x100: 100.0 * l1,
        psnr_db: psnr_from_mse(mse),
        ssim: ssim3d(a, b, SSIM_WINDOW, mask),
    })
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// 3D SSIM over valid window positions; with a mask, the mean runs over
/// windows whose center voxel is masked. Returns `None` when no window
/// qualifies.
pub fn ssim3d(
    a: &Array3<f64>,
    b: &Array3<f64>,
    window: usize,
    mask: Option<&Array3<u8>>,
) -> Option<f64> {
    let (h, w, d) = a.dim();
    if h < window || w < window || d < window {
        return None;
    }
    let sat_a = Sat::new(a);
    let sat_b = Sat::new(b);
    let sat_aa = Sat::from_product(a, a);
    let sat_bb = Sat::from_product(b, b);
    let sat_ab = Sat::from_product(a, b);
    let n = (window * window * window) as f64;
    let half = window / 2;

    let mut acc = 0.0;
    let mut cnt = 0usize;
    for i in 0..=(h - window) {
        for j in 0..=(w - window) {
            for k in 0..=(d - window) {
                if let Some(m) = mask {
                    if m[[i + half, j + half, k + half]] == 0 {
                        continue;
                    }
                }
                let sa = sat_a.window_sum(i, j, k, window);
                let sb = sat_b.window_sum(i, j, k, window);
                let saa = sat_aa.window_sum(i, j, k, window);
                let sbb = sat_bb.window_sum(i, j, k, window);
                let sab = sat_ab.window_sum(i, j, k, window);
                let mu_a = sa / n;
                let mu_b = sb / n;
                let var_a = saa / n - mu_a * mu_a;
                let var_b = sbb / n - mu_b * mu_b;
                let cov = sab / n - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                acc += num / den;
                cnt += 1;
            }
        }
    }
    if cnt == 0 {
        None
    } else {
        Some(acc / cnt as f64)
    }
}

/// 3D summed-area table with a one-voxel zero border.
struct Sat {
    data: Array3<f64>,
}

impl Sat {
    fn new(x: &Array3<f64>) -> Sat {
        Self::build(x.dim(), |i, j, k| x[[i, j, k]])
    }

    fn from_product(a: &Array3<f64>, b: &Array3<f64>) -> Sat {
        Self::build(a.dim(), |i, j, k| a[[i, j, k]] * b[[i, j, k]])
    }

    fn build(dim: (usize, usize, usize), f: impl Fn(usize, usize, usize) -> f64) -> Sat {
        let (h, w, d) = dim;
        let mut s = Array3::zeros((h + 1, w + 1, d + 1));
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    s[[i + 1, j + 1, k + 1]] = f(i, j, k)
                        + s[[i, j + 1, k + 1]]
                        + s[[i + 1, j, k + 1]]
                        + s[[i + 1, j + 1, k]]
                        - s[[i, j, k + 1]]
                        - s[[i, j + 1, k]]
                        - s[[i + 1, j, k]]
                        + s[[i, j, k]];
                }
            }
        }
        Sat { data: s }
    }

    /// Sum over the cube starting at (i,j,k) with the given edge length.
    fn window_sum(&self, i: usize, j: usize, k: usize, win: usize) -> f64 {
        let s = &self.data;
        let (i2, j2, k2) = (i + win, j + win, k + win);
        s[[i2, j2, k2]] - s[[i, j2, k2]] - s[[i2, j, k2]] - s[[i2, j2, k]]
            + s[[i, j, k2]]
            + s[[i, j2, k]]
            + s[[i2, j, k]]
            - s[[i, j, k]]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TissueHistogram {
    pub class: u8,
    pub bin_edges: Vec<f64>,
    /// Normalized counts (sum 1) when the class is present, all zeros otherwise.
    pub counts: Vec<f64>,
    pub present: bool,
}

/// Per-class normalized intensity histograms over `[0,1]`.
pub fn tissue_histograms(
    img: &Volume,
    tis: &TissueLabelVolume,
    classes: &[u8],
    bins: usize,
) -> Result<Vec<TissueHistogram>> {
    if img.shape() != tis.shape() {
        return Err(Error::shape_mismatch(
            "tissue_histograms",
            &img.shape(),
            &tis.shape(),
        ));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs bins >= 1".into()));
    }
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut out = Vec::with_capacity(classes.len());
    for &class in classes {
        let mut counts = vec![0.0f64; bins];
        let mut total = 0usize;
        for (&v, &c) in img.data.iter().zip(tis.data.iter()) {
            if c == class {
                let bin = ((v * bins as f64) as usize).min(bins - 1);
                counts[bin] += 1.0;
                total += 1;
            }
        }
        let present = total > 0;
        if present {
            for c in counts.iter_mut() {
                *c /= total as f64;
            }
        }
        out.push(TissueHistogram {
            class,
            bin_edges: edges.clone(),
            counts,
            present,
        });
    }
    Ok(out)
}

/// L1 distance between two normalized histograms (same binning).
pub fn histogram_l1_distance(a: &TissueHistogram, b: &TissueHistogram) -> Result<f64> {
    if a.counts.len() != b.counts.len() {
        return Err(Error::InvalidArgument(
            "histogram distance needs identical binning".into(),
        ));
    }
    Ok(a.counts
        .iter()
        .zip(&b.counts)
        .map(|(x, y)| (x - y).abs())
        .sum())
}

pub fn aggregate_metrics(sets: &[MetricSet]) -> Option<MetricsAggregate> {
    if sets.is_empty() {
        return None;
    }
    let mean_sd = |vals: &[f64]| -> (f64, f64) {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (l1_mean, l1_sd) = mean_sd(&sets.iter().map(|s| s.l1).collect::<Vec<_>>());
    let (psnr_mean, psnr_sd) = mean_sd(&sets.iter().map(|s| s.psnr_db).collect::<Vec<_>>());
    let ssims: Vec<f64> = sets.iter().filter_map(|s| s.ssim).collect();
    let (ssim_mean, ssim_sd) = if ssims.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_sd(&ssims);
        (Some(m), Some(s))
    };
    Some(MetricsAggregate {
        n: sets.len(),
        l1_mean,
        l1_sd,
        psnr_mean,
        psnr_sd,
        ssim_mean,
        ssim_sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::volume::Modality;

    fn vol(data: Array3<f64>) -> Volume {
        Volume::from_array(data, Modality::T1w)
    }

    fn randv(n: usize, seed: u64) -> Array3<f64> {
        let mut rng = RngStream::new(seed);
        Array3::from_shape_simple_fn((n, n, n), || rng.uniform(0.0, 1.0))
    }

    #[test]
    fn identity_gives_zero_l1_unit_ssim_capped_psnr() {
        let a = randv(12, 1);
        let r = compute_metrics(&vol(a.clone()), &vol(a), None).unwrap();
        assert_eq!(r.whole.l1, 0.0);
        assert_eq!(r.whole.psnr_db, PSNR_CAP_DB);
        assert!((r.whole.ssim.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_difference_gives_20db() {
        let a = Array3::from_elem((10, 10, 10), 0.4);
        let b = Array3::from_elem((10, 10, 10), 0.5);
        let r = compute_metrics(&vol(a), &vol(b), None).unwrap();
        assert!((r.whole.l1 - 0.1).abs() < 1e-12);
        assert!((r.whole.l1_x100 - 10.0).abs() < 1e-9);
        assert!((r.whole.psnr_db - 20.0).abs() < 1e-9); // 10*log10(1/0.01)
    }

    #[test]
    fn ssim_matches_brute_force_window_oracle() {
        let n = 16;
        let a = randv(n, 2);
        let b = {
            let mut rng = RngStream::new(3);
            let mut b = a.clone();
            b.mapv_inplace(|v| (v + 0.05 * rng.standard_normal()).clamp(0.0, 1.0));
            b
        };
        let fast = ssim3d(&a, &b, 7, None).unwrap();

        // independent oracle: direct loops per window
        let mut acc = 0.0;
        let mut cnt = 0;
        let win = 7;
        let nw = (win * win * win) as f64;
        for i in 0..=(n - win) {
            for j in 0..=(n - win) {
                for k in 0..=(n - win) {
                    let mut sa = 0.0;
                    let mut sb = 0.0;
                    let mut saa = 0.0;
                    let mut sbb = 0.0;
                    let mut sab = 0.0;
                    for di in 0..win {
                        for dj in 0..win {
                            for dk in 0..win {
                                let x = a[[i + di, j + dj, k + dk]];
                                let y = b[[i + di, j + dj, k + dk]];
                                sa += x;
                                sb += y;
                                saa += x * x;
                                sbb += y * y;
                                sab += x * y;
                            }
                        }
                    }
                    let (ma, mb) = (sa / nw, sb / nw);
                    let va = saa / nw - ma * ma;
                    let vb = sbb / nw - mb * mb;
                    let cov = sab / nw - ma * mb;
                    acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    cnt += 1;
                }
            }
        }
        let oracle = acc / cnt as f64;
        assert!(
            (fast - oracle).abs() < 1e-5,
            "ssim {fast} vs oracle {oracle}"
        );
    }

    #[test]
    fn l1_psnr_permutation_invariant_ssim_not() {
        let n = 12;
        let a = randv(n, 4);
        let b = randv(n, 5);
        let r1 = compute_metrics(&vol(a.clone()), &vol(b.clone()), None).unwrap();

        // a deterministic voxel permutation applied to BOTH volumes
        let perm = |x: &Array3<f64>| {
            let flat: Vec<f64> = x.iter().cloned().collect();
            let m = flat.len();
            let mut out = vec![0.0; m];
            for (i, v) in flat.iter().enumerate() {
                out[(i * 7919) % m] = *v;
            }
            Array3::from_shape_vec((n, n, n), out).unwrap()
        };
        let r2 = compute_metrics(&vol(perm(&a)), &vol(perm(&b)), None).unwrap();
        assert!((r1.whole.l1 - r2.whole.l1).abs() < 1e-12);
        assert!((r1.whole.psnr_db - r2.whole.psnr_db).abs() < 1e-9);
        assert!(
            (r1.whole.ssim.unwrap() - r2.whole.ssim.unwrap()).abs() > 1e-6,
            "ssim should be structure-sensitive"
        );
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let n = 12;
        let a = randv(n, 6);
        let mut prev = f64::INFINITY;
        for amp_step in 1..5 {
            let amp = amp_step as f64 * 0.02;
            let mut rng = RngStream::new(7);
            let b = a.mapv(|v| (v + amp * rng.standard_normal()).clamp(0.0, 1.0));
            let r = compute_metrics(&vol(a.clone()), &vol(b), None).unwrap();
            assert!(r.whole.psnr_db < prev, "psnr must fall as noise grows");
            prev = r.whole.psnr_db;
        }
    }

    #[test]
    fn masked_metrics_evaluate_only_the_mask() {
        let n = 12;
        let a = randv(n, 8);
        let mut b = a.clone();
        // corrupt only outside the mask region
        b.slice_mut(ndarray::s![0..2, .., ..]).fill(0.0);
        let mut mdata = Array3::<u8>::zeros((n, n, n));
        mdata.slice_mut(ndarray::s![4..10, 4..10, 4..10]).fill(1);
        let mask = DropoutMask {
            data: mdata,
            accepted_patches: vec![],
            total_drop_volume: 216,
        };
        let r = compute_metrics(&vol(a), &vol(b), Some(&mask)).unwrap();
        let m = r.masked.unwrap();
        assert_eq!(m.l1, 0.0, "mask region untouched");
        assert!(r.whole.l1 > 0.0);
    }

    #[test]
    fn histograms_normalize_and_flag_missing_classes() {
        let (t1, _, tis) = crate::phantom::brain_volumes(24, 0.05, 9);
        let hists = tissue_histograms(&t1, &tis, &[1, 2, 3, 0], 32).unwrap();
        for h in &hists[..3] {
            assert!(h.present);
            let total: f64 = h.counts.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        assert!(!hists[3].present, "phantom has no background class");
        assert!(hists[3].counts.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn constant_image_occupies_single_bin() {
        let n = 8;
        let img = Array3::from_elem((n, n, n), 0.5);
        let tis = TissueLabelVolume::from_array(Array3::from_elem((n, n, n), 2u8)).unwrap();
        let hists = tissue_histograms(&vol(img), &tis, &[2], 10).unwrap();
        let nonzero = hists[0].counts.iter().filter(|&&c| c > 0.0).count();
        assert_eq!(nonzero, 1);
        assert_eq!(histogram_l1_distance(&hists[0], &hists[0]).unwrap(), 0.0);
    }

    #[test]
    fn phantom_histogram_modes_sit_at_injected_means() {
        // two-class phantom with distinct Gaussians
        let n = 24;
        let mut rng = RngStream::new(11);
        let mut img = Array3::zeros((n, n, n));
        let mut lab = Array3::<u8>::zeros((n, n, n));
        for ((i, _j, _k), l) in lab.indexed_iter_mut() {
            *l = if i < n / 2 { 1 } else { 2 };
        }
        for (v, &l) in img.iter_mut().zip(lab.iter()) {
            let mean = if l == 1 { 0.3 } else { 0.7 };
            *v = (mean + 0.03 * rng.standard_normal()).clamp(0.0, 1.0);
        }
        let tis = TissueLabelVolume::from_array(lab).unwrap();
        let bins = 20; // bin width 0.05
        let hists = tissue_histograms(&vol(img), &tis, &[1, 2], bins).unwrap();
        for (h, expected_mean) in hists.iter().zip([0.3, 0.7]) {
            let mode_bin = h
                .counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let mode_center = (mode_bin as f64 + 0.5) / bins as f64;
            assert!(
                (mode_center - expected_mean).abs() <= 0.05 + 1e-9,
                "mode {mode_center} vs mean {expected_mean}"
            );
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = vol(randv(8, 12));
        let b = vol(randv(9, 13));
        assert!(compute_metrics(&a, &b, None).is_err());
    }
}
