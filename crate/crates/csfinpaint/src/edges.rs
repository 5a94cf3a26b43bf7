//! Slice-wise Canny edge detection over the axial axis.
//!
//! Each axial slice (fixed third index) is processed independently with a 2D
//! Canny detector and the binary edge slices are stacked back into a volume.
//! No smoothing or linking happens across slices.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::volume::{Modality, Volume};

/// Hysteresis thresholds apply to gradient magnitudes of `[0,1]`-scaled
/// intensities (central-difference units per voxel).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CannyConfig {
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub smoothing_sigma: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        CannyConfig {
            low_threshold: 0.1,
            high_threshold: 0.2,
            smoothing_sigma: 1.0,
        }
    }
}

/// Binary edge volume: Canny applied to every axial slice of `v`.
pub fn compute_edge_stack(v: &Volume, cfg: &CannyConfig) -> Volume {
    let dims = v.data.dim();
    let mut out = Array3::<f64>::zeros(dims);
    for k in 0..dims.2 {
        let slice = v.data.index_axis(Axis(2), k);
        let edges = canny_slice(slice, cfg);
        let mut target = out.index_axis_mut(Axis(2), k);
        for ((i, j), &e) in edges.indexed_iter() {
            target[[i, j]] = e as f64;
        }
    }
    v.with_data(out, Modality::Edge)
}

/// 2D Canny: Gaussian smoothing, Sobel gradients, non-maximum suppression,
/// double threshold with hysteresis (8-connected).
pub fn canny_slice(slice: ArrayView2<'_, f64>, cfg: &CannyConfig) -> Array2<u8> {
    let (h, w) = slice.dim();
    if h < 3 || w < 3 {
        return Array2::zeros((h, w));
    }

    let smoothed = gaussian_blur(slice, cfg.smoothing_sigma);

    // Sobel, scaled to intensity units per voxel
    let mut gx = Array2::<f64>::zeros((h, w));
    let mut gy = Array2::<f64>::zeros((h, w));
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        smoothed[[i, j]]
    };
    for i in 0..h as isize {
        for j in 0..w as isize {
            let sx = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
            let sy = (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1));
            gx[[i as usize, j as usize]] = sx / 8.0;
            gy[[i as usize, j as usize]] = sy / 8.0;
        }
    }

    let mut magnitude = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            magnitude[[i, j]] = gx[[i, j]].hypot(gy[[i, j]]);
        }
    }

    // non-maximum suppression along the quantized gradient direction
    let mut thin = Array2::<f64>::zeros((h, w));
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let m = magnitude[[i, j]];
            if m == 0.0 {
                continue;
            }
            let angle = gy[[i, j]].atan2(gx[[i, j]]).to_degrees();
            let angle = if angle < 0.0 { angle + 180.0 } else { angle };
            let (n1, n2) = if !(22.5..157.5).contains(&angle) {
                (magnitude[[i, j - 1]], magnitude[[i, j + 1]])
            } else if angle < 67.5 {
                (magnitude[[i - 1, j - 1]], magnitude[[i + 1, j + 1]])
            } else if angle < 112.5 {
                (magnitude[[i - 1, j]], magnitude[[i + 1, j]])
            } else {
                (magnitude[[i - 1, j + 1]], magnitude[[i + 1, j - 1]])
            };
            if m >= n1 && m >= n2 {
                thin[[i, j]] = m;
            }
        }
    }

    // double threshold + hysteresis
    let mut out = Array2::<u8>::zeros((h, w));
    let mut stack = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if thin[[i, j]] >= cfg.high_threshold {
                out[[i, j]] = 1;
                stack.push((i, j));
            }
        }
    }
    while let Some((i, j)) = stack.pop() {
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                let (ni, nj) = (ni as usize, nj as usize);
                if out[[ni, nj]] == 0 && thin[[ni, nj]] >= cfg.low_threshold {
                    out[[ni, nj]] = 1;
                    stack.push((ni, nj));
                }
            }
        }
    }
    out
}

fn gaussian_blur(slice: ArrayView2<'_, f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return slice.to_owned();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for t in -radius..=radius {
        kernel.push((-0.5 * (t as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let (h, w) = slice.dim();
    let reflect = |x: isize, n: usize| -> usize {
        let n = n as isize;
        let mut x = x;
        while x < 0 || x >= n {
            if x < 0 {
                x = -x - 1;
            }
            if x >= n {
                x = 2 * n - x - 1;
            }
        }
        x as usize
    };

    let mut tmp = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let jj = reflect(j as isize + t as isize - radius, w);
                acc += slice[[i, jj]] * k;
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let ii = reflect(i as isize + t as isize - radius, h);
                acc += tmp[[ii, j]] * k;
            }
            out[[i, j]] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn constant_slice_has_no_edges() {
        let v = Volume::from_array(Array3::from_elem((16, 16, 4), 0.5), Modality::T1w);
        let e = compute_edge_stack(&v, &CannyConfig::default());
        assert!(e.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn filled_square_yields_perimeter_edges() {
        // intensity-1 square on zero background, one axial slice
        let mut data = Array3::zeros((40, 40, 1));
        data.slice_mut(ndarray::s![10..30, 10..30, 0..1]).fill(1.0);
        let v = Volume::from_array(data, Modality::T1w);
        let e = compute_edge_stack(&v, &CannyConfig::default());
        let edges = e.data.index_axis(Axis(2), 0);

        let near_perimeter = |i: usize, j: usize| -> bool {
            let inside = |x: usize, lo: usize, hi: usize| x + 1 >= lo && x <= hi + 1;
            let on_band = |x: usize, lo: usize, hi: usize| {
                (x as isize - lo as isize).abs() <= 1 || (x as isize - (hi as isize)).abs() <= 1
            };
            (on_band(i, 10, 29) && inside(j, 10, 29)) || (on_band(j, 10, 29) && inside(i, 10, 29))
        };

        let mut n_edges = 0;
        for ((i, j), &val) in edges.indexed_iter() {
            if val != 0.0 {
                n_edges += 1;
                assert!(
                    near_perimeter(i, j),
                    "edge at ({i},{j}) far from square perimeter"
                );
            }
        }
        // perimeter of a 20x20 square is 76 voxels; expect most of it found
        assert!(n_edges >= 60, "only {n_edges} edge voxels detected");
    }

    #[test]
    fn slices_are_processed_independently_with_shape_preserved() {
        let mut data = Array3::zeros((64, 64, 40));
        data.slice_mut(ndarray::s![20..44, 20..44, 7..8]).fill(1.0);
        let v = Volume::from_array(data, Modality::T1w);
        let e = compute_edge_stack(&v, &CannyConfig::default());
        assert_eq!(e.data.dim(), (64, 64, 40));
        let active = e.data.index_axis(Axis(2), 7);
        assert!(active.iter().any(|&x| x != 0.0));
        for k in 0..40 {
            if k == 7 {
                continue;
            }
            assert!(
                e.data.index_axis(Axis(2), k).iter().all(|&x| x == 0.0),
                "slice {k} should be empty"
            );
        }
    }

    #[test]
    fn edge_output_is_binary() {
        let (t1, _, _) = crate::phantom::brain_volumes(24, 0.05, 3);
        let e = compute_edge_stack(&t1, &CannyConfig::default());
        assert!(e.data.iter().all(|&x| x == 0.0 || x == 1.0));
        assert!(e.data.iter().any(|&x| x == 1.0), "phantom should have edges");
    }
}
