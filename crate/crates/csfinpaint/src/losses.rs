//! The four training losses and their weighted combination.
//!
//! Reconstruction is a masked mean absolute difference; the adversarial pair
//! is the non-saturating logistic objective over patch-logit grids; the
//! perceptual and style losses compare feature-pyramid activations (and their
//! Gram matrices) slice by slice along the axial axis.
//!
//! Every loss exists in two forms: a `*_t` graph version used in training,
//! and a plain wrapper that evaluates the same graph and returns the scalar,
//! so there is exactly one computation path to test.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dropout::DropoutMask;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::networks::PatchLogits;
use crate::tensor::Tensor;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub recon: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            adversarial: 0.1,
            perceptual: 0.1,
            style: 250.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("recon", self.recon),
            ("adversarial", self.adversarial),
            ("perceptual", self.perceptual),
            ("style", self.style),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be a nonnegative finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn mask_as_f64(mask: &DropoutMask) -> Array3<f64> {
    mask.data.mapv(|m| m as f64)
}

/// Masked mean absolute difference as a graph node.
pub fn recon_loss_t(pred: &Tensor, orig: &Array3<f64>, mask: &Array3<f64>) -> Result<Tensor> {
    let count = mask.iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::EmptyMask {
            context: "recon_loss".into(),
        });
    }
    if pred.shape() != orig.shape().to_vec() || orig.shape() != mask.shape() {
        return Err(Error::shape_mismatch(
            "recon_loss",
            &pred.shape(),
            &mask.shape().to_vec(),
        ));
    }
    let neg = orig.mapv(|v| -v).into_dyn();
    Ok(pred
        .add_const(&neg)
        .mul_const(&mask.clone().into_dyn())
        .abs()
        .sum_all()
        .scale(1.0 / count as f64))
}

/// Mean absolute intensity difference over mask voxels.
pub fn recon_loss(orig: &Volume, pred: &Volume, mask: &DropoutMask) -> Result<f64> {
    let t = Tensor::constant(pred.data.clone().into_dyn());
    Ok(recon_loss_t(&t, &orig.data, &mask_as_f64(mask))?.scalar_value())
}

/// Discriminator objective: `-E[log sigma(real)] - E[log(1 - sigma(fake))]`,
/// written with softplus for stability.
pub fn adv_d_loss_t(real_logits: &Tensor, fake_logits: &Tensor) -> Tensor {
    let real_term = real_logits.scale(-1.0).softplus().mean_all();
    let fake_term = fake_logits.softplus().mean_all();
    real_term.add(&fake_term)
}

/// Non-saturating generator objective: `-E[log sigma(fake)]`.
pub fn adv_g_loss_t(fake_logits: &Tensor) -> Tensor {
    fake_logits.scale(-1.0).softplus().mean_all()
}

/// Both adversarial losses from logit grids: `(d_loss, g_loss)`.
pub fn adv_loss(real_logits: &PatchLogits, fake_logits: &PatchLogits) -> (f64, f64) {
    let r = Tensor::constant(real_logits.clone().into_dyn());
    let f = Tensor::constant(fake_logits.clone().into_dyn());
    (
        adv_d_loss_t(&r, &f).scalar_value(),
        adv_g_loss_t(&f).scalar_value(),
    )
}

/// Per-slice feature losses: returns `(perceptual, style)` over all axial
/// slices and all tap layers.
pub fn feature_losses_t(
    pred: &Tensor,
    orig: &Array3<f64>,
    fx: &FeatureExtractor,
) -> Result<(Tensor, Tensor)> {
    let shape = pred.shape();
    if shape != orig.shape().to_vec() {
        return Err(Error::shape_mismatch(
            "feature_losses",
            &shape,
            &orig.shape().to_vec(),
        ));
    }
    let depth = shape[2];
    let n_taps = fx.n_taps() as f64;
    let mut perc_terms: Option<Tensor> = None;
    let mut style_terms: Option<Tensor> = None;
    for k in 0..depth {
        let pred_slice = pred.axial_slice(k);
        let orig_slice = {
            let mut s = Array3::zeros((1, shape[0], shape[1]));
            for i in 0..shape[0] {
                for j in 0..shape[1] {
                    s[[0, i, j]] = orig[[i, j, k]];
                }
            }
            Tensor::constant(s.into_dyn())
        };
        let pred_taps = fx.features(&pred_slice)?;
        let orig_taps = fx.features(&orig_slice)?;
        for (pt, ot) in pred_taps.iter().zip(&orig_taps) {
            let perc = pt.sub(ot).abs().mean_all().scale(1.0 / n_taps);
            let style = pt
                .gram()
                .sub(&ot.gram())
                .abs()
                .mean_all()
                .scale(1.0 / n_taps);
            perc_terms = Some(match perc_terms {
                Some(acc) => acc.add(&perc),
                None => perc,
            });
            style_terms = Some(match style_terms {
                Some(acc) => acc.add(&style),
                None => style,
            });
        }
    }
    let scale = 1.0 / depth as f64;
    Ok((
        perc_terms.expect("depth >= 1").scale(scale),
        style_terms.expect("depth >= 1").scale(scale),
    ))
}

/// Mean feature-map distance between two volumes (axial slices, all taps).
pub fn perceptual_loss(orig: &Volume, pred: &Volume, fx: &FeatureExtractor) -> Result<f64> {
    let t = Tensor::constant(pred.data.clone().into_dyn());
    Ok(feature_losses_t(&t, &orig.data, fx)?.0.scalar_value())
}

/// Mean Gram-matrix distance between two volumes (axial slices, all taps).
pub fn style_loss(orig: &Volume, pred: &Volume, fx: &FeatureExtractor) -> Result<f64> {
    let t = Tensor::constant(pred.data.clone().into_dyn());
    Ok(feature_losses_t(&t, &orig.data, fx)?.1.scalar_value())
}

/// Weighted sum of the four components; rejects non-finite inputs so a
/// diverging run aborts instead of training on garbage.
pub fn total_loss(components: [f64; 4], w: &LossWeights) -> Result<f64> {
    let names = ["recon", "adversarial", "perceptual", "style"];
    for (name, v) in names.iter().zip(components.iter()) {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                name: name.to_string(),
                value: *v,
            });
        }
    }
    Ok(w.recon * components[0]
        + w.adversarial * components[1]
        + w.perceptual * components[2]
        + w.style * components[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{assert_close, numeric_grad};
    use crate::volume::Modality;
    use ndarray::{Array3, ArrayD, IxDyn};

    fn randv(n: usize, seed: u64) -> Array3<f64> {
        let mut rng = crate::rng::RngStream::new(seed);
        Array3::from_shape_simple_fn((n, n, n), || rng.uniform(0.0, 1.0))
    }

    fn vol(data: Array3<f64>) -> Volume {
        Volume::from_array(data, Modality::T1w)
    }

    fn mask_cuboid(n: usize, lo: usize, hi: usize) -> DropoutMask {
        let mut m = Array3::<u8>::zeros((n, n, n));
        m.slice_mut(ndarray::s![lo..hi, lo..hi, lo..hi]).fill(1);
        let vol = (hi - lo).pow(3);
        DropoutMask {
            data: m,
            accepted_patches: vec![],
            total_drop_volume: vol,
        }
    }

    #[test]
    fn recon_identity_and_constant_difference() {
        let a = randv(8, 1);
        let full = DropoutMask {
            data: Array3::from_elem((8, 8, 8), 1),
            accepted_patches: vec![],
            total_drop_volume: 512,
        };
        assert_eq!(recon_loss(&vol(a.clone()), &vol(a.clone()), &full).unwrap(), 0.0);

        let orig = Array3::from_elem((8, 8, 8), 0.5);
        let pred = Array3::from_elem((8, 8, 8), 0.75);
        let l = recon_loss(&vol(orig), &vol(pred), &full).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
    }

    #[test]
    fn recon_matches_voxel_loop_oracle() {
        let orig = randv(8, 2);
        let pred = randv(8, 3);
        let mask = mask_cuboid(8, 2, 6);
        let l = recon_loss(&vol(orig.clone()), &vol(pred.clone()), &mask).unwrap();
        let mut acc = 0.0;
        let mut count = 0usize;
        for ((i, j, k), &m) in mask.data.indexed_iter() {
            if m != 0 {
                acc += (orig[[i, j, k]] - pred[[i, j, k]]).abs();
                count += 1;
            }
        }
        assert!((l - acc / count as f64).abs() < 1e-12);
    }

    #[test]
    fn recon_scale_equivariance() {
        let orig = randv(6, 4);
        let pred = randv(6, 5);
        let mask = mask_cuboid(6, 1, 5);
        let base = recon_loss(&vol(orig.clone()), &vol(pred.clone()), &mask).unwrap();
        let c = 3.7;
        let scaled = recon_loss(
            &vol(orig.mapv(|v| c * v)),
            &vol(pred.mapv(|v| c * v)),
            &mask,
        )
        .unwrap();
        assert!((scaled - c * base).abs() < 1e-10);
    }

    #[test]
    fn recon_empty_mask_is_an_error() {
        let a = randv(4, 6);
        let empty = DropoutMask {
            data: Array3::zeros((4, 4, 4)),
            accepted_patches: vec![],
            total_drop_volume: 0,
        };
        assert!(matches!(
            recon_loss(&vol(a.clone()), &vol(a), &empty),
            Err(Error::EmptyMask { .. })
        ));
    }

    #[test]
    fn adv_loss_closed_forms() {
        // perfect discriminator limit
        let real = Array3::from_elem((2, 2, 2), 60.0);
        let fake = Array3::from_elem((2, 2, 2), -60.0);
        let (d, _) = adv_loss(&real, &fake);
        assert!(d.abs() < 1e-12, "perfect split gives ~0 d-loss, got {d}");

        // all-zero logits: softplus(0) = ln 2 on both terms
        let zeros = Array3::zeros((4, 4, 4));
        let (d, g) = adv_loss(&zeros, &zeros);
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adv_loss_matches_elementwise_oracle() {
        let mut rng = crate::rng::RngStream::new(7);
        let real = Array3::from_shape_simple_fn((4, 4, 4), || rng.standard_normal());
        let fake = Array3::from_shape_simple_fn((4, 4, 4), || rng.standard_normal());
        let (d, g) = adv_loss(&real, &fake);
        let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
        let n = 64.0;
        let d_oracle = -real.iter().map(|&x| sigma(x).ln()).sum::<f64>() / n
            - fake.iter().map(|&x| (1.0 - sigma(x)).ln()).sum::<f64>() / n;
        let g_oracle = -fake.iter().map(|&x| sigma(x).ln()).sum::<f64>() / n;
        assert!((d - d_oracle).abs() < 1e-10);
        assert!((g - g_oracle).abs() < 1e-10);
    }

    #[test]
    fn feature_losses_vanish_on_identical_inputs_and_are_symmetric() {
        let fx = FeatureExtractor::toy(11);
        let a = randv(8, 8);
        let b = randv(8, 9);
        assert!(perceptual_loss(&vol(a.clone()), &vol(a.clone()), &fx).unwrap() < 1e-8);
        assert!(style_loss(&vol(a.clone()), &vol(a.clone()), &fx).unwrap() < 1e-8);
        let pab = perceptual_loss(&vol(a.clone()), &vol(b.clone()), &fx).unwrap();
        let pba = perceptual_loss(&vol(b.clone()), &vol(a.clone()), &fx).unwrap();
        assert!((pab - pba).abs() < 1e-12);
        assert!(pab > 0.0);
    }

    /// Test-only scalar reimplementation of the pyramid forward pass: an
    /// independent oracle for the perceptual/style path.
    mod oracle {
        use super::*;

        pub fn conv2d_direct(
            x: &ndarray::Array3<f64>,
            w: &ndarray::ArrayD<f64>,
            b: &ndarray::ArrayD<f64>,
        ) -> ndarray::Array3<f64> {
            let (cin, h, wd) = x.dim();
            let cout = w.shape()[0];
            let mut out = ndarray::Array3::zeros((cout, h, wd));
            for co in 0..cout {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = b[[co]];
                        for ci in 0..cin {
                            for a in 0..3usize {
                                for bb in 0..3usize {
                                    let ii = i as isize + a as isize - 1;
                                    let jj = j as isize + bb as isize - 1;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                        continue;
                                    }
                                    acc += x[[ci, ii as usize, jj as usize]]
                                        * w[[co, ci, a, bb]];
                                }
                            }
                        }
                        out[[co, i, j]] = acc.max(0.0); // fused relu
                    }
                }
            }
            out
        }

        pub fn pool2(x: &ndarray::Array3<f64>) -> ndarray::Array3<f64> {
            let (c, h, w) = x.dim();
            let mut out = ndarray::Array3::zeros((c, h / 2, w / 2));
            for ci in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let mut m = f64::NEG_INFINITY;
                        for di in 0..2 {
                            for dj in 0..2 {
                                m = m.max(x[[ci, 2 * i + di, 2 * j + dj]]);
                            }
                        }
                        out[[ci, i, j]] = m;
                    }
                }
            }
            out
        }

        pub fn gram(x: &ndarray::Array3<f64>) -> ndarray::Array2<f64> {
            let (c, h, w) = x.dim();
            let norm = (c * h * w) as f64;
            let mut g = ndarray::Array2::zeros((c, c));
            for a in 0..c {
                for b in 0..c {
                    let mut acc = 0.0;
                    for i in 0..h {
                        for j in 0..w {
                            acc += x[[a, i, j]] * x[[b, i, j]];
                        }
                    }
                    g[[a, b]] = acc / norm;
                }
            }
            g
        }
    }

    /// Extract toy-pyramid taps with the scalar oracle.
    fn oracle_taps(
        slice2d: &ndarray::Array2<f64>,
        fx_weights: &[(ArrayD<f64>, ArrayD<f64>)],
    ) -> Vec<ndarray::Array3<f64>> {
        let (h, w) = slice2d.dim();
        let mut x = ndarray::Array3::zeros((3, h, w));
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    x[[c, i, j]] = slice2d[[i, j]]; // toy mean 0 / std 1
                }
            }
        }
        let mut taps = Vec::new();
        let t0 = oracle::conv2d_direct(&x, &fx_weights[0].0, &fx_weights[0].1);
        taps.push(t0.clone());
        let pooled = oracle::pool2(&t0);
        let t1 = oracle::conv2d_direct(&pooled, &fx_weights[1].0, &fx_weights[1].1);
        taps.push(t1);
        taps
    }

    #[test]
    fn perceptual_and_style_match_scalar_oracle_on_single_slice() {
        let fx = FeatureExtractor::toy(21);
        let dir = tempfile::tempdir().unwrap();
        fx.save(dir.path()).unwrap(); // reuse the artifact to extract raw weights
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        let entries: Vec<crate::io::blob::BlobEntry> =
            serde_json::from_value(manifest["params"].clone()).unwrap();
        let sha = manifest["params_sha256"].as_str().unwrap();
        let arrays = crate::io::blob::read_blob(&dir.path().join("params.bin"), &entries, sha)
            .unwrap();
        let weights: Vec<(ArrayD<f64>, ArrayD<f64>)> = vec![
            (arrays[0].1.clone(), arrays[1].1.clone()),
            (arrays[2].1.clone(), arrays[3].1.clone()),
        ];

        // single-slice volumes (depth 1), 64x64
        let n = 64;
        let mut rng = crate::rng::RngStream::new(17);
        let orig2d = ndarray::Array2::from_shape_simple_fn((n, n), || rng.uniform(0.0, 1.0));
        let pred2d = ndarray::Array2::from_shape_simple_fn((n, n), || rng.uniform(0.0, 1.0));
        let mut orig = Array3::zeros((n, n, 1));
        let mut pred = Array3::zeros((n, n, 1));
        for i in 0..n {
            for j in 0..n {
                orig[[i, j, 0]] = orig2d[[i, j]];
                pred[[i, j, 0]] = pred2d[[i, j]];
            }
        }

        let perc = perceptual_loss(&vol(orig.clone()), &vol(pred.clone()), &fx).unwrap();
        let style = style_loss(&vol(orig), &vol(pred), &fx).unwrap();

        let taps_o = oracle_taps(&orig2d, &weights);
        let taps_p = oracle_taps(&pred2d, &weights);
        let mut perc_oracle = 0.0;
        let mut style_oracle = 0.0;
        for (to, tp) in taps_o.iter().zip(&taps_p) {
            let n_el = to.len() as f64;
            perc_oracle += to
                .iter()
                .zip(tp.iter())
                .map(|(&a, &b)| (a - b).abs())
                .sum::<f64>()
                / n_el
                / 2.0;
            let (go, gp) = (oracle::gram(to), oracle::gram(tp));
            let c2 = (go.len()) as f64;
            style_oracle += go
                .iter()
                .zip(gp.iter())
                .map(|(&a, &b)| (a - b).abs())
                .sum::<f64>()
                / c2
                / 2.0;
        }
        assert!(
            (perc - perc_oracle).abs() < 1e-5,
            "perceptual {perc} vs oracle {perc_oracle}"
        );
        assert!(
            (style - style_oracle).abs() < 1e-5,
            "style {style} vs oracle {style_oracle}"
        );
    }

    #[test]
    fn all_losses_pass_gradient_check_on_toy_setup() {
        // 8^3 volume, toy extractor, central differences at 1e-3, rel 1e-3
        let n = 8;
        let orig = randv(n, 30);
        let pred0 = randv(n, 31);
        let mask = mask_cuboid(n, 2, 6);
        let mask_f = mask.data.mapv(|m| m as f64);
        let fx = FeatureExtractor::toy(32);

        // reconstruction
        let p = Tensor::parameter(pred0.clone().into_dyn());
        recon_loss_t(&p, &orig, &mask_f).unwrap().backward();
        let num = numeric_grad(
            &mut |x| {
                let t = Tensor::parameter(x.clone());
                recon_loss_t(&t, &orig, &mask_f).unwrap().scalar_value()
            },
            &pred0.clone().into_dyn(),
            1e-3,
        );
        assert_close(&p.grad().unwrap(), &num, 1e-3, "recon grad");

        // adversarial (g-side through logits)
        let logits0 = randv(4, 33).into_dyn();
        let lp = Tensor::parameter(logits0.clone());
        adv_g_loss_t(&lp).backward();
        let num = numeric_grad(
            &mut |x| adv_g_loss_t(&Tensor::parameter(x.clone())).scalar_value(),
            &logits0,
            1e-3,
        );
        assert_close(&lp.grad().unwrap(), &num, 1e-3, "adv grad");

        // perceptual and style through the extractor
        let p = Tensor::parameter(pred0.clone().into_dyn());
        let (perc, style) = feature_losses_t(&p, &orig, &fx).unwrap();
        perc.backward();
        let num = numeric_grad(
            &mut |x| {
                let t = Tensor::parameter(x.clone());
                feature_losses_t(&t, &orig, &fx).unwrap().0.scalar_value()
            },
            &pred0.clone().into_dyn(),
            1e-3,
        );
        assert_close(&p.grad().unwrap(), &num, 1e-3, "perceptual grad");

        let p2 = Tensor::parameter(pred0.clone().into_dyn());
        let (_, style2) = feature_losses_t(&p2, &orig, &fx).unwrap();
        style2.backward();
        let num = numeric_grad(
            &mut |x| {
                let t = Tensor::parameter(x.clone());
                feature_losses_t(&t, &orig, &fx).unwrap().1.scalar_value()
            },
            &pred0.into_dyn(),
            1e-3,
        );
        assert_close(&p2.grad().unwrap(), &num, 1e-3, "style grad");
        drop(style);
    }

    #[test]
    fn total_loss_weighted_sum_and_guards() {
        let w = LossWeights::default();
        let t = total_loss([1.0, 1.0, 1.0, 1.0], &w).unwrap();
        assert!((t - 251.2).abs() < 1e-12);
        assert_eq!(total_loss([0.0; 4], &w).unwrap(), 0.0);

        let proj = LossWeights {
            recon: 1.0,
            adversarial: 0.0,
            perceptual: 0.0,
            style: 0.0,
        };
        assert_eq!(total_loss([0.37, 9.0, 9.0, 9.0], &proj).unwrap(), 0.37);

        assert!(matches!(
            total_loss([f64::NAN, 0.0, 0.0, 0.0], &w),
            Err(Error::NonFiniteLoss { .. })
        ));
        assert!(total_loss([0.0, f64::INFINITY, 0.0, 0.0], &w).is_err());

        // linearity in each component
        let base = total_loss([1.0, 2.0, 3.0, 4.0], &w).unwrap();
        let bumped = total_loss([1.0, 2.0, 3.0 + 1.0, 4.0], &w).unwrap();
        assert!((bumped - base - w.perceptual).abs() < 1e-12);
    }
}
