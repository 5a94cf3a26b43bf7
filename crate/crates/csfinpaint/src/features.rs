//! Frozen 2D convolutional feature pyramids for the perceptual and style
//! losses.
//!
//! The production configuration mirrors VGG-19 up to `relu5_1`, with taps at
//! the first activation of each stage. Weights load from a pinned artifact
//! directory with a recorded checksum; without one, a seeded random
//! initialization gives a deterministic (untrained) pyramid. A two-stage toy
//! pyramid keeps desk-scale tests and gradient checks fast.

use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::blob::{read_blob, write_blob, BlobEntry};
use crate::rng::RngStream;
use crate::tensor::{conv2d, maxpool2d, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PyramidStage {
    pub out_channels: usize,
    pub n_convs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PyramidConfig {
    /// Channels the input slice is replicated to before normalization.
    pub input_channels: usize,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub stages: Vec<PyramidStage>,
}

impl PyramidConfig {
    /// VGG-19 feature stack through `relu5_1`; taps land on relu1_1..relu5_1.
    pub fn vgg19() -> Self {
        PyramidConfig {
            input_channels: 3,
            input_mean: vec![0.485, 0.456, 0.406],
            input_std: vec![0.229, 0.224, 0.225],
            stages: vec![
                PyramidStage { out_channels: 64, n_convs: 2 },
                PyramidStage { out_channels: 128, n_convs: 2 },
                PyramidStage { out_channels: 256, n_convs: 4 },
                PyramidStage { out_channels: 512, n_convs: 4 },
                PyramidStage { out_channels: 512, n_convs: 1 },
            ],
        }
    }

    /// Small two-stage pyramid for tests and smoke training.
    pub fn toy() -> Self {
        PyramidConfig {
            input_channels: 3,
            input_mean: vec![0.0; 3],
            input_std: vec![1.0; 3],
            stages: vec![
                PyramidStage { out_channels: 4, n_convs: 1 },
                PyramidStage { out_channels: 8, n_convs: 1 },
            ],
        }
    }

    /// Minimum slice extent: each stage after the first sits behind a 2x pool.
    pub fn min_input_extent(&self) -> usize {
        1 << (self.stages.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("feature pyramid needs stages".into()));
        }
        if self.input_mean.len() != self.input_channels
            || self.input_std.len() != self.input_channels
        {
            return Err(Error::InvalidArgument(
                "input_mean/input_std length must match input_channels".into(),
            ));
        }
        Ok(())
    }
}

/// A frozen feature pyramid: weights are plain constants, never trained.
/// Identical inputs always produce identical activations.
pub struct FeatureExtractor {
    pub config: PyramidConfig,
    /// per stage, per conv: (weight (Cout,Cin,3,3), bias (Cout))
    convs: Vec<Vec<(ArrayD<f64>, ArrayD<f64>)>>,
    /// SHA-256 of the weight blob when loaded from an artifact file.
    pub checksum: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExtractorManifest {
    version: u32,
    config: PyramidConfig,
    params_sha256: String,
    params: Vec<BlobEntry>,
}

const EXTRACTOR_FORMAT_VERSION: u32 = 1;

impl FeatureExtractor {
    /// Deterministic He-style random initialization for the given pyramid.
    pub fn seeded(config: PyramidConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed).derive("feature-extractor");
        let mut convs = Vec::new();
        let mut in_ch = config.input_channels;
        for stage in &config.stages {
            let mut stage_convs = Vec::new();
            for _ in 0..stage.n_convs {
                let std = (2.0 / (in_ch as f64 * 9.0)).sqrt();
                let w = ArrayD::from_shape_simple_fn(
                    IxDyn(&[stage.out_channels, in_ch, 3, 3]),
                    || std * rng.standard_normal(),
                );
                let b = ArrayD::zeros(IxDyn(&[stage.out_channels]));
                stage_convs.push((w, b));
                in_ch = stage.out_channels;
            }
            convs.push(stage_convs);
        }
        Ok(FeatureExtractor {
            config,
            convs,
            checksum: None,
        })
    }

    pub fn toy(seed: u64) -> Self {
        Self::seeded(PyramidConfig::toy(), seed).expect("toy config is valid")
    }

    pub fn vgg19_seeded(seed: u64) -> Self {
        Self::seeded(PyramidConfig::vgg19(), seed).expect("vgg19 config is valid")
    }

    pub fn n_taps(&self) -> usize {
        self.config.stages.len()
    }

    /// Persist weights as a pinned artifact directory (manifest + blob).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut arrays = Vec::new();
        for (si, stage) in self.convs.iter().enumerate() {
            for (ci, (w, b)) in stage.iter().enumerate() {
                arrays.push((format!("stage{si}.conv{ci}.w"), w.clone()));
                arrays.push((format!("stage{si}.conv{ci}.b"), b.clone()));
            }
        }
        let (params, sha) = write_blob(&dir.join("params.bin"), &arrays)?;
        let manifest = ExtractorManifest {
            version: EXTRACTOR_FORMAT_VERSION,
            config: self.config.clone(),
            params_sha256: sha,
            params,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), text).map_err(|e| Error::io(dir, e))
    }

    /// Load a pinned artifact; the blob checksum is verified and recorded.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: ExtractorManifest = serde_json::from_str(&text)?;
        if manifest.version != EXTRACTOR_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported extractor version {}",
                manifest.version
            )));
        }
        manifest.config.validate()?;
        let arrays = read_blob(
            &dir.join("params.bin"),
            &manifest.params,
            &manifest.params_sha256,
        )?;
        let mut map: std::collections::HashMap<String, ArrayD<f64>> =
            arrays.into_iter().collect();
        let mut convs = Vec::new();
        let mut in_ch = manifest.config.input_channels;
        for (si, stage) in manifest.config.stages.iter().enumerate() {
            let mut stage_convs = Vec::new();
            for ci in 0..stage.n_convs {
                let w = map
                    .remove(&format!("stage{si}.conv{ci}.w"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing stage{si}.conv{ci}.w")))?;
                let b = map
                    .remove(&format!("stage{si}.conv{ci}.b"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing stage{si}.conv{ci}.b")))?;
                if w.shape() != [stage.out_channels, in_ch, 3, 3] {
                    return Err(Error::Checkpoint(format!(
                        "stage{si}.conv{ci}.w has shape {:?}",
                        w.shape()
                    )));
                }
                stage_convs.push((w, b));
                in_ch = stage.out_channels;
            }
            convs.push(stage_convs);
        }
        Ok(FeatureExtractor {
            checksum: Some(manifest.params_sha256),
            config: manifest.config,
            convs,
        })
    }

    /// Activation maps at the tap points for a single slice.
    ///
    /// `slice` is `(1,H,W)` (or already `(C,H,W)` matching the input width).
    /// Returns one `(C_i, H_i, W_i)` tensor per stage, each the output of the
    /// stage's first convolution + ReLU; stages beyond the first see 2x
    /// max-pooled inputs.
    pub fn features(&self, slice: &Tensor) -> Result<Vec<Tensor>> {
        let shape = slice.shape();
        if shape.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "feature extractor expects (C,H,W), got {shape:?}"
            )));
        }
        let min = self.config.min_input_extent();
        if shape[1] < min || shape[2] < min {
            return Err(Error::InvalidArgument(format!(
                "slice {}x{} below extractor minimum {min}x{min}",
                shape[1], shape[2]
            )));
        }
        let mut x = if shape[0] == self.config.input_channels {
            slice.clone()
        } else if shape[0] == 1 {
            let copies: Vec<Tensor> = (0..self.config.input_channels)
                .map(|_| slice.clone())
                .collect();
            Tensor::concat0(&copies)
        } else {
            return Err(Error::InvalidArgument(format!(
                "slice has {} channels; extractor takes 1 or {}",
                shape[0], self.config.input_channels
            )));
        };

        // published input normalization, broadcast over the slice
        let (h, w) = (shape[1], shape[2]);
        let mut neg_mean = ArrayD::zeros(IxDyn(&[self.config.input_channels, h, w]));
        let mut inv_std = ArrayD::zeros(IxDyn(&[self.config.input_channels, h, w]));
        for c in 0..self.config.input_channels {
            neg_mean
                .index_axis_mut(ndarray::Axis(0), c)
                .fill(-self.config.input_mean[c]);
            inv_std
                .index_axis_mut(ndarray::Axis(0), c)
                .fill(1.0 / self.config.input_std[c]);
        }
        x = x.add_const(&neg_mean).mul_const(&inv_std);

        let mut taps = Vec::with_capacity(self.convs.len());
        for (si, stage) in self.convs.iter().enumerate() {
            if si > 0 {
                x = maxpool2d(&x);
            }
            for (ci, (wgt, bias)) in stage.iter().enumerate() {
                let wt = Tensor::constant(wgt.clone());
                let bt = Tensor::constant(bias.clone());
                x = conv2d(&x, &wt, Some(&bt), 1, 1).relu();
                if ci == 0 {
                    taps.push(x.clone());
                }
            }
        }
        Ok(taps)
    }

    /// Convenience wrapper for plain arrays (no gradient tracking).
    pub fn features_of_array(&self, slice: &Array3<f64>) -> Result<Vec<ArrayD<f64>>> {
        let t = Tensor::constant(slice.clone().into_dyn());
        Ok(self.features(&t)?.iter().map(|t| t.to_array()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg19_configuration_matches_published_stack() {
        let cfg = PyramidConfig::vgg19();
        assert_eq!(cfg.stages.len(), 5);
        let widths: Vec<usize> = cfg.stages.iter().map(|s| s.out_channels).collect();
        assert_eq!(widths, vec![64, 128, 256, 512, 512]);
        let convs: Vec<usize> = cfg.stages.iter().map(|s| s.n_convs).collect();
        assert_eq!(convs, vec![2, 2, 4, 4, 1]);
        assert_eq!(cfg.min_input_extent(), 16);
    }

    #[test]
    fn tap_shapes_follow_the_pooling_ladder() {
        let fx = FeatureExtractor::toy(3);
        let slice = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 16, 12]), 0.5));
        let taps = fx.features(&slice).unwrap();
        assert_eq!(taps.len(), 2);
        assert_eq!(taps[0].shape(), vec![4, 16, 12]);
        assert_eq!(taps[1].shape(), vec![8, 8, 6]);
    }

    #[test]
    fn identical_inputs_identical_features() {
        let fx = FeatureExtractor::toy(3);
        let data = ArrayD::from_shape_fn(IxDyn(&[1, 8, 8]), |ix| (ix[1] as f64 * 0.3).sin());
        let a = fx.features(&Tensor::constant(data.clone())).unwrap();
        let b = fx.features(&Tensor::constant(data)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_array(), y.to_array());
        }
    }

    #[test]
    fn too_small_slice_reports_required_minimum() {
        let fx = FeatureExtractor::vgg19_seeded(1);
        let slice = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 8, 8])));
        let err = fx.features(&slice).unwrap_err();
        assert!(err.to_string().contains("16"), "error should name the minimum: {err}");
    }

    #[test]
    fn artifact_roundtrip_preserves_weights_and_checksum() {
        let fx = FeatureExtractor::toy(9);
        let dir = tempfile::tempdir().unwrap();
        fx.save(dir.path()).unwrap();
        let loaded = FeatureExtractor::load(dir.path()).unwrap();
        assert!(loaded.checksum.is_some());
        let data = ArrayD::from_shape_fn(IxDyn(&[1, 8, 8]), |ix| (ix[2] as f64 * 0.2).cos());
        let a = fx.features(&Tensor::constant(data.clone())).unwrap();
        let b = loaded.features(&Tensor::constant(data)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_array(), y.to_array());
        }
    }
}
