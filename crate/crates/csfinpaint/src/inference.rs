//! CSF-dropout mask construction for atrophied images and Gaussian-weighted
//! sliding-window inpainting.
//!
//! The dropout region of an atrophy pair is the set of voxels that changed
//! from gray matter to CSF, optionally dilated by a small ring to give the
//! generator boundary context. Large volumes are synthesized window by
//! window; per-window outputs are fused as Gaussian-weighted averages with
//! per-voxel weight normalization, and only masked voxels are replaced in the
//! final composite.

use ndarray::{Array3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::channels::{assemble_channels, pad_channels_reflect_to, ChannelStack};
use crate::dropout::{apply_noise_fill, make_mtis, DropoutMask};
use crate::edges::CannyConfig;
use crate::error::{Error, Result};
use crate::networks::ModelBundle;
use crate::rng::RngStream;
use crate::tensor::{no_grad, Tensor};
use crate::volume::{
    Modality, TissueLabelVolume, Volume, CLASS_BACKGROUND, CLASS_CORTICAL_GM, CLASS_CSF,
    CLASS_VENTRICLES,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SlidingWindowConfig {
    pub patch_size: [usize; 3],
    pub stride: usize,
    /// Gaussian sigma per axis as a fraction of the patch size.
    pub gaussian_sigma_fraction: f64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig {
            patch_size: [96, 96, 96],
            stride: 20,
            gaussian_sigma_fraction: 1.0 / 8.0,
        }
    }
}

impl SlidingWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size.iter().any(|&p| p == 0) || self.stride == 0 {
            return Err(Error::InvalidArgument(
                "sliding window needs positive patch size and stride".into(),
            ));
        }
        if self.stride > *self.patch_size.iter().min().unwrap() {
            return Err(Error::InvalidArgument(format!(
                "stride {} exceeds patch size {:?}",
                self.stride, self.patch_size
            )));
        }
        if self.gaussian_sigma_fraction <= 0.0 {
            return Err(Error::InvalidArgument(
                "gaussian_sigma_fraction must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pre/post-atrophy labels with the matching atrophied images.
pub struct AtrophyPair {
    pub tis_orig: TissueLabelVolume,
    pub tis_atr: TissueLabelVolume,
    pub t1_atr: Volume,
    pub flair_atr: Volume,
}

impl AtrophyPair {
    pub fn validate(&self) -> Result<()> {
        let s = self.tis_orig.shape();
        for (name, shape) in [
            ("tis_atr", self.tis_atr.shape()),
            ("t1_atr", self.t1_atr.shape()),
            ("flair_atr", self.flair_atr.shape()),
        ] {
            if shape != s {
                return Err(Error::shape_mismatch(
                    &format!("atrophy pair tis_orig vs {name}"),
                    &s,
                    &shape,
                ));
            }
        }
        Ok(())
    }
}

/// Dropout mask for CSF inpainting: voxels that flipped GM -> CSF between the
/// original and atrophied labellings, dilated by `ring_radius` steps of
/// 6-connected growth restricted to non-background voxels.
pub fn build_csf_dropout_mask(pair: &AtrophyPair, ring_radius: usize) -> Result<DropoutMask> {
    pair.validate()?;
    let dims = pair.tis_orig.data.dim();
    let mut mask = Array3::<u8>::zeros(dims);
    let mut frontier: Vec<[usize; 3]> = Vec::new();
    for ((i, j, k), (&orig, &atr)) in pair
        .tis_orig
        .data
        .indexed_iter()
        .map(|(idx, v)| (idx, (v, &pair.tis_atr.data[idx])))
    {
        if orig == CLASS_CORTICAL_GM && (*atr == CLASS_CSF || *atr == CLASS_VENTRICLES) {
            mask[[i, j, k]] = 1;
            frontier.push([i, j, k]);
        }
    }
    if frontier.is_empty() {
        return Err(Error::NoAtrophy);
    }

    let shape = [dims.0, dims.1, dims.2];
    for _ in 0..ring_radius {
        let mut next = Vec::new();
        for &[i, j, k] in &frontier {
            for (di, dj, dk) in [
                (-1isize, 0isize, 0isize),
                (1, 0, 0),
                (0, -1, 0),
                (0, 1, 0),
                (0, 0, -1),
                (0, 0, 1),
            ] {
                let (ni, nj, nk) = (i as isize + di, j as isize + dj, k as isize + dk);
                if ni < 0
                    || nj < 0
                    || nk < 0
                    || ni >= shape[0] as isize
                    || nj >= shape[1] as isize
                    || nk >= shape[2] as isize
                {
                    continue;
                }
                let idx = [ni as usize, nj as usize, nk as usize];
                if mask[idx] == 0 && pair.tis_atr.data[idx] != CLASS_BACKGROUND {
                    mask[idx] = 1;
                    next.push(idx);
                }
            }
        }
        frontier = next;
    }

    let count = mask.iter().filter(|&&m| m != 0).count();
    Ok(DropoutMask {
        data: mask,
        accepted_patches: Vec::new(),
        total_drop_volume: count,
    })
}

/// Anything that can synthesize one window of an assembled channel stack.
/// The production implementation is the trained generator; tests use stubs
/// to isolate fusion arithmetic.
pub trait WindowSynthesizer {
    fn synthesize(&self, window: ArrayView4<'_, f64>) -> Result<Array3<f64>>;
}

impl WindowSynthesizer for ModelBundle {
    fn synthesize(&self, window: ArrayView4<'_, f64>) -> Result<Array3<f64>> {
        no_grad(|| {
            let x = Tensor::constant(window.to_owned().into_dyn());
            self.generator.forward(&x, false).map(|t| {
                t.to_array()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("generator output is 3d")
            })
        })
    }
}

/// Window start offsets: multiples of the stride, with a final window clamped
/// to the boundary so every voxel is covered.
pub fn window_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let last = extent - patch;
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s >= last {
            starts.push(last);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts
}

/// Separable Gaussian fusion weights over a patch, centered, strictly
/// positive.
pub fn gaussian_patch_weights(patch: [usize; 3], sigma_fraction: f64) -> Array3<f64> {
    let axis_weights: Vec<Vec<f64>> = patch
        .iter()
        .map(|&n| {
            let sigma = (n as f64 * sigma_fraction).max(1e-6);
            let c = (n as f64 - 1.0) / 2.0;
            (0..n)
                .map(|x| (-0.5 * ((x as f64 - c) / sigma).powi(2)).exp())
                .collect()
        })
        .collect();
    let mut w = Array3::zeros((patch[0], patch[1], patch[2]));
    for ((i, j, k), v) in w.indexed_iter_mut() {
        *v = axis_weights[0][i] * axis_weights[1][j] * axis_weights[2][k];
    }
    w
}

/// Synthesize a whole volume by fusing overlapping windows with normalized
/// Gaussian weights. The stack is reflect-padded up to the patch size when
/// smaller; the result is cropped back.
pub fn sliding_window_fuse(
    stack: &ChannelStack,
    model: &dyn WindowSynthesizer,
    cfg: &SlidingWindowConfig,
) -> Result<Array3<f64>> {
    cfg.validate()?;
    let orig_shape = stack.spatial_shape();
    let channels = pad_channels_reflect_to(&stack.channels, cfg.patch_size);
    let dims = [
        channels.dim().1,
        channels.dim().2,
        channels.dim().3,
    ];
    let weights = gaussian_patch_weights(cfg.patch_size, cfg.gaussian_sigma_fraction);
    let mut accum = Array3::<f64>::zeros((dims[0], dims[1], dims[2]));
    let mut wsum = Array3::<f64>::zeros((dims[0], dims[1], dims[2]));

    let starts: [Vec<usize>; 3] = [
        window_starts(dims[0], cfg.patch_size[0], cfg.stride),
        window_starts(dims[1], cfg.patch_size[1], cfg.stride),
        window_starts(dims[2], cfg.patch_size[2], cfg.stride),
    ];
    for &si in &starts[0] {
        for &sj in &starts[1] {
            for &sk in &starts[2] {
                let window = channels.slice(ndarray::s![
                    ..,
                    si..si + cfg.patch_size[0],
                    sj..sj + cfg.patch_size[1],
                    sk..sk + cfg.patch_size[2]
                ]);
                let out = model.synthesize(window)?;
                if out.dim() != (cfg.patch_size[0], cfg.patch_size[1], cfg.patch_size[2]) {
                    return Err(Error::InvalidArgument(format!(
                        "window synthesizer returned {:?}, expected {:?}",
                        out.dim(),
                        cfg.patch_size
                    )));
                }
                let mut acc_view = accum.slice_mut(ndarray::s![
                    si..si + cfg.patch_size[0],
                    sj..sj + cfg.patch_size[1],
                    sk..sk + cfg.patch_size[2]
                ]);
                ndarray::Zip::from(&mut acc_view)
                    .and(&out)
                    .and(&weights)
                    .for_each(|a, &o, &w| *a += o * w);
                let mut w_view = wsum.slice_mut(ndarray::s![
                    si..si + cfg.patch_size[0],
                    sj..sj + cfg.patch_size[1],
                    sk..sk + cfg.patch_size[2]
                ]);
                w_view += &weights;
            }
        }
    }

    ndarray::Zip::from(&mut accum).and(&wsum).for_each(|a, &w| {
        debug_assert!(w > 0.0, "every voxel must be covered by a window");
        *a /= w;
    });
    Ok(accum
        .slice(ndarray::s![0..orig_shape[0], 0..orig_shape[1], 0..orig_shape[2]])
        .to_owned())
}

/// Inpaint the masked voxels of an atrophied volume with a trained model.
///
/// Channels are assembled from the noise-filled atrophied images, the
/// atrophied tissue labels, and the mask-restricted labels, with the edge map
/// from the noise-filled target modality. Voxels outside the mask are
/// bit-identical to the atrophied input.
pub fn sliding_window_inpaint(
    pair: &AtrophyPair,
    mask: &DropoutMask,
    bundle: &ModelBundle,
    cfg: &SlidingWindowConfig,
    canny: &CannyConfig,
    target: Modality,
    rng: &mut RngStream,
) -> Result<Volume> {
    pair.validate()?;
    cfg.validate()?;
    if bundle.meta.target != target {
        return Err(Error::InvalidArgument(format!(
            "model was trained for {} but target is {target}",
            bundle.meta.target
        )));
    }
    let m = bundle.generator.spec.spatial_multiple();
    if cfg.patch_size.iter().any(|&p| p % m != 0) {
        return Err(Error::InvalidArgument(format!(
            "patch size {:?} must be a multiple of {m}",
            cfg.patch_size
        )));
    }
    if mask.shape() != pair.tis_orig.shape() {
        return Err(Error::shape_mismatch(
            "sliding_window_inpaint mask",
            &mask.shape(),
            &pair.tis_orig.shape(),
        ));
    }

    let t1_drop = apply_noise_fill(&pair.t1_atr, mask, &mut rng.derive("t1"))?;
    let fl_drop = apply_noise_fill(&pair.flair_atr, mask, &mut rng.derive("fl"))?;
    let mtis = make_mtis(&pair.tis_atr, mask)?;
    let stack = assemble_channels(
        &t1_drop,
        &fl_drop,
        &pair.tis_atr,
        &mtis,
        target,
        &bundle.spe,
        canny,
    )?;
    if stack.n_channels() != bundle.generator.spec.in_channels {
        return Err(Error::InvalidArgument(format!(
            "assembled {} channels but the model expects {}",
            stack.n_channels(),
            bundle.generator.spec.in_channels
        )));
    }

    let fused = sliding_window_fuse(&stack, bundle, cfg)?;
    let atrophied = match target {
        Modality::T1w => &pair.t1_atr,
        _ => &pair.flair_atr,
    };
    let pred = atrophied.with_data(fused, target);
    crate::networks::composite(&pred, atrophied, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom;

    fn phantom_pair(n: usize) -> (AtrophyPair, Vec<[usize; 3]>) {
        let (tis_orig, tis_atr, t1_atr, fl_atr, changed) = phantom::atrophied_brain(n, 0.05, 3);
        (
            AtrophyPair {
                tis_orig,
                tis_atr,
                t1_atr,
                flair_atr: fl_atr,
            },
            changed,
        )
    }

    #[test]
    fn csf_mask_ring0_equals_changed_set() {
        let (pair, changed) = phantom_pair(32);
        let mask = build_csf_dropout_mask(&pair, 0).unwrap();
        assert_eq!(mask.count_ones(), changed.len());
        for &idx in &changed {
            assert_eq!(mask.data[idx], 1);
        }
    }

    #[test]
    fn csf_mask_ring1_matches_neighborhood_oracle() {
        let (pair, changed) = phantom_pair(32);
        let mask = build_csf_dropout_mask(&pair, 1).unwrap();

        // brute-force oracle: changed set plus 6-neighbors on non-background
        let mut oracle = Array3::<u8>::zeros(pair.tis_orig.data.dim());
        for &[i, j, k] in &changed {
            oracle[[i, j, k]] = 1;
        }
        let dims = pair.tis_orig.shape();
        let mut grown = oracle.clone();
        for ((i, j, k), &v) in oracle.indexed_iter() {
            if v == 0 {
                continue;
            }
            for (di, dj, dk) in [
                (-1isize, 0isize, 0isize),
                (1, 0, 0),
                (0, -1, 0),
                (0, 1, 0),
                (0, 0, -1),
                (0, 0, 1),
            ] {
                let (ni, nj, nk) = (i as isize + di, j as isize + dj, k as isize + dk);
                if ni < 0 || nj < 0 || nk < 0 {
                    continue;
                }
                let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                if ni >= dims[0] || nj >= dims[1] || nk >= dims[2] {
                    continue;
                }
                if pair.tis_atr.data[[ni, nj, nk]] != CLASS_BACKGROUND {
                    grown[[ni, nj, nk]] = 1;
                }
            }
        }
        assert_eq!(mask.data, grown);
    }

    #[test]
    fn single_voxel_change_with_rings() {
        // hand-built pair: one GM voxel becomes CSF
        let n = 12;
        let mut orig = Array3::<u8>::from_elem((n, n, n), CLASS_CORTICAL_GM);
        orig[[0, 0, 0]] = CLASS_BACKGROUND;
        let mut atr = orig.clone();
        atr[[6, 6, 6]] = CLASS_CSF;
        let mk = |d: &Array3<u8>| TissueLabelVolume::from_array(d.clone()).unwrap();
        let img = Volume::from_array(Array3::from_elem((n, n, n), 0.5), Modality::T1w);
        let pair = AtrophyPair {
            tis_orig: mk(&orig),
            tis_atr: mk(&atr),
            t1_atr: img.clone(),
            flair_atr: img.with_data(img.data.clone(), Modality::Flair),
        };
        let m0 = build_csf_dropout_mask(&pair, 0).unwrap();
        assert_eq!(m0.count_ones(), 1);
        assert_eq!(m0.data[[6, 6, 6]], 1);
        let m1 = build_csf_dropout_mask(&pair, 1).unwrap();
        assert_eq!(m1.count_ones(), 7, "center plus 6-connected shell");
    }

    #[test]
    fn no_atrophy_is_an_error() {
        let (t1, fl, tis) = phantom::brain_volumes(16, 0.05, 5);
        let pair = AtrophyPair {
            tis_orig: tis.clone(),
            tis_atr: tis,
            t1_atr: t1,
            flair_atr: fl,
        };
        assert!(matches!(
            build_csf_dropout_mask(&pair, 1),
            Err(Error::NoAtrophy)
        ));
    }

    #[test]
    fn window_starts_cover_everything_with_clamped_tail() {
        for (extent, patch, stride) in [(96, 96, 20), (100, 96, 20), (140, 96, 20), (97, 32, 8)] {
            let starts = window_starts(extent, patch, stride);
            assert_eq!(starts[0], 0);
            assert_eq!(*starts.last().unwrap(), extent - patch);
            let mut covered = vec![false; extent];
            for &s in &starts {
                assert!(s == extent - patch || s % stride == 0);
                for c in covered.iter_mut().skip(s).take(patch) {
                    *c = true;
                }
            }
            assert!(covered.iter().all(|&c| c));
        }
        assert_eq!(window_starts(50, 96, 20), vec![0]);
    }

    #[test]
    fn normalized_weight_sums_are_unity() {
        struct Ones;
        impl WindowSynthesizer for Ones {
            fn synthesize(&self, w: ArrayView4<'_, f64>) -> Result<Array3<f64>> {
                Ok(Array3::from_elem((w.dim().1, w.dim().2, w.dim().3), 1.0))
            }
        }
        // fusing all-ones output must give exactly one everywhere
        for dims in [[32usize, 32, 32], [40, 36, 32], [33, 32, 45]] {
            let stack = ChannelStack {
                channels: ndarray::Array4::zeros((1, dims[0], dims[1], dims[2])),
                manifest: vec!["c".into()],
                target: Modality::T1w,
                spacing: [1.0; 3],
                affine: crate::volume::IDENTITY_AFFINE,
            };
            let cfg = SlidingWindowConfig {
                patch_size: [32, 32, 32],
                stride: 8,
                ..SlidingWindowConfig::default()
            };
            let fused = sliding_window_fuse(&stack, &Ones, &cfg).unwrap();
            for &v in fused.iter() {
                assert!((v - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn coordinate_stub_makes_sliding_window_equal_whole_volume() {
        // stub echoes an SPE channel: a function of absolute position only
        struct EchoChannel(usize);
        impl WindowSynthesizer for EchoChannel {
            fn synthesize(&self, w: ArrayView4<'_, f64>) -> Result<Array3<f64>> {
                Ok(w.index_axis(Axis(0), self.0).to_owned())
            }
        }
        let (t1, fl, tis) = phantom::brain_volumes(40, 0.05, 6);
        let mut rng = RngStream::new(2);
        let mask = crate::dropout::generate_dropout_mask(&t1, &mut rng).unwrap();
        let t1d = apply_noise_fill(&t1, &mask, &mut rng.derive("t1")).unwrap();
        let fld = apply_noise_fill(&fl, &mask, &mut rng.derive("fl")).unwrap();
        let mtis = make_mtis(&tis, &mask).unwrap();
        let stack = assemble_channels(
            &t1d,
            &fld,
            &tis,
            &mtis,
            Modality::T1w,
            &crate::spe::SpeConfig::default(),
            &CannyConfig::default(),
        )
        .unwrap();

        let cfg = SlidingWindowConfig {
            patch_size: [24, 24, 24],
            stride: 7,
            ..SlidingWindowConfig::default()
        };
        let stub = EchoChannel(6); // a cosine positional channel
        let fused = sliding_window_fuse(&stack, &stub, &cfg).unwrap();
        let whole = stack.channels.index_axis(Axis(0), 6).to_owned();
        for (a, b) in fused.iter().zip(whole.iter()) {
            assert!((a - b).abs() < 1e-6, "seam artifact: {a} vs {b}");
        }
    }

    #[test]
    fn inpaint_preserves_unmasked_voxels_bit_exactly() {
        let (pair, _) = phantom_pair(32);
        let mask = build_csf_dropout_mask(&pair, 1).unwrap();
        let cfg = crate::trainer::TrainConfig {
            generator: crate::networks::GeneratorSpec {
                base_width: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut gen_spec = cfg.generator.clone();
        gen_spec.in_channels = cfg.input_channels();
        let mut rng = RngStream::new(4);
        let bundle = ModelBundle::init(
            gen_spec,
            crate::networks::DiscriminatorSpec {
                base_width: 2,
                ..Default::default()
            },
            cfg.spe,
            crate::networks::BundleMeta {
                epoch: 0,
                seed: 4,
                dataset_id: "t".into(),
                target: Modality::T1w,
            },
            &mut rng,
        )
        .unwrap();
        let sw = SlidingWindowConfig {
            patch_size: [24, 24, 24],
            stride: 12,
            ..SlidingWindowConfig::default()
        };
        let out = sliding_window_inpaint(
            &pair,
            &mask,
            &bundle,
            &sw,
            &CannyConfig::default(),
            Modality::T1w,
            &mut RngStream::new(11),
        )
        .unwrap();
        for ((i, j, k), &v) in out.data.indexed_iter() {
            if mask.data[[i, j, k]] == 0 {
                assert_eq!(v.to_bits(), pair.t1_atr.data[[i, j, k]].to_bits());
            }
        }
        // masked voxels must actually change (generator output, not input)
        let changed = out
            .data
            .indexed_iter()
            .filter(|((i, j, k), &v)| {
                mask.data[[*i, *j, *k]] != 0 && v != pair.t1_atr.data[[*i, *j, *k]]
            })
            .count();
        assert!(changed > 0);
    }

    #[test]
    fn wrong_target_model_is_rejected() {
        let (pair, _) = phantom_pair(16);
        let mask = build_csf_dropout_mask(&pair, 0).unwrap();
        let cfg = crate::trainer::TrainConfig::default();
        let mut gen_spec = cfg.generator.clone();
        gen_spec.in_channels = cfg.input_channels();
        gen_spec.base_width = 2;
        let mut rng = RngStream::new(4);
        let bundle = ModelBundle::init(
            gen_spec,
            crate::networks::DiscriminatorSpec::default(),
            cfg.spe,
            crate::networks::BundleMeta {
                epoch: 0,
                seed: 4,
                dataset_id: "t".into(),
                target: Modality::Flair,
            },
            &mut rng,
        )
        .unwrap();
        let err = sliding_window_inpaint(
            &pair,
            &mask,
            &bundle,
            &SlidingWindowConfig::default(),
            &CannyConfig::default(),
            Modality::T1w,
            &mut RngStream::new(1),
        )
        .unwrap_err();
        assert!(err.to_string().contains("trained for"));
    }
}
