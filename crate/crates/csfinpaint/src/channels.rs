//! Assembly of the network input: five semantic channels plus the positional
//! encoding, in a fixed, recorded order.
//!
//! Channel order: noise-filled T1w, masked tissue labels, whole tissue
//! labels, noise-filled FLAIR, edge map of the noise-filled target modality,
//! then the encoding channels. Label channels are rescaled to `[0,1]` by
//! dividing class codes by 6.

use std::path::Path;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::edges::{compute_edge_stack, CannyConfig};
use crate::error::{Error, Result};
use crate::spe::{spe_channels, SpeConfig};
use crate::volume::{Modality, TissueLabelVolume, Volume, NUM_TISSUE_CLASSES};

/// The five semantic channels preceding the positional encoding.
pub const SEMANTIC_CHANNELS: usize = 5;

/// Scale factor mapping tissue class codes into `[0,1]`.
pub const LABEL_SCALE: f64 = (NUM_TISSUE_CLASSES - 1) as f64;

/// Ordered multi-channel input tensor `(C, H, W, D)` with its manifest.
#[derive(Debug, Clone)]
pub struct ChannelStack {
    pub channels: Array4<f64>,
    pub manifest: Vec<String>,
    pub target: Modality,
    pub spacing: [f64; 3],
    pub affine: [[f64; 4]; 4],
}

impl ChannelStack {
    pub fn n_channels(&self) -> usize {
        self.channels.dim().0
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let d = self.channels.dim();
        [d.1, d.2, d.3]
    }

    /// Owned crop `[start, start+size)` of all channels.
    pub fn crop(&self, start: [usize; 3], size: [usize; 3]) -> Array4<f64> {
        self.channels
            .slice(ndarray::s![
                ..,
                start[0]..start[0] + size[0],
                start[1]..start[1] + size[1],
                start[2]..start[2] + size[2]
            ])
            .to_owned()
    }
}

/// Build the full input stack for one training or inference sample.
///
/// `t1_drop` and `fl_drop` are the noise-filled intensity volumes, `tis` the
/// whole-volume labels, and `mtis` the labels restricted to the dropout mask.
/// The edge channel is computed from the noise-filled volume of the *target*
/// modality.
pub fn assemble_channels(
    t1_drop: &Volume,
    fl_drop: &Volume,
    tis: &TissueLabelVolume,
    mtis: &Volume,
    target: Modality,
    spe_cfg: &SpeConfig,
    canny_cfg: &CannyConfig,
) -> Result<ChannelStack> {
    if !matches!(target, Modality::T1w | Modality::Flair) {
        return Err(Error::InvalidArgument(format!(
            "target modality must be T1w or FLAIR, got {target}"
        )));
    }
    let shape = t1_drop.shape();
    for (name, s) in [
        ("fl_drop", fl_drop.shape()),
        ("tis", tis.shape()),
        ("mtis", mtis.shape()),
    ] {
        if s != shape {
            return Err(Error::shape_mismatch(
                &format!("assemble_channels t1_drop vs {name}"),
                &shape,
                &s,
            ));
        }
    }
    spe_cfg.validate()?;

    let edge_source = match target {
        Modality::T1w => t1_drop,
        _ => fl_drop,
    };
    let edge = compute_edge_stack(edge_source, canny_cfg);

    let n_spe = spe_cfg.n_channels();
    let c_total = SEMANTIC_CHANNELS + n_spe;
    let mut channels = Array4::<f64>::zeros((c_total, shape[0], shape[1], shape[2]));

    channels.index_axis_mut(Axis(0), 0).assign(&t1_drop.data);
    channels
        .index_axis_mut(Axis(0), 1)
        .assign(&mtis.data.mapv(|x| x / LABEL_SCALE));
    channels
        .index_axis_mut(Axis(0), 2)
        .assign(&tis.data.mapv(|x| x as f64 / LABEL_SCALE));
    channels.index_axis_mut(Axis(0), 3).assign(&fl_drop.data);
    channels.index_axis_mut(Axis(0), 4).assign(&edge.data);

    let spe = spe_channels(shape, spe_cfg)?;
    for c in 0..n_spe {
        channels
            .index_axis_mut(Axis(0), SEMANTIC_CHANNELS + c)
            .assign(&spe.index_axis(Axis(0), c));
    }

    let mut manifest = vec![
        "dropout_t1".to_string(),
        "mtis".to_string(),
        "tis".to_string(),
        "dropout_flair".to_string(),
        "edge_target".to_string(),
    ];
    manifest.extend(spe_cfg.channel_names());

    Ok(ChannelStack {
        channels,
        manifest,
        target,
        spacing: t1_drop.spacing,
        affine: t1_drop.affine,
    })
}

/// Reflect-extend the spatial tail of a channel tensor to `dims` (identity
/// when already large enough). Used to reach generator-divisible or
/// window-sized extents on small volumes.
pub fn pad_channels_reflect_to(channels: &Array4<f64>, dims: [usize; 3]) -> Array4<f64> {
    let (c, h, w, d) = channels.dim();
    let target = [dims[0].max(h), dims[1].max(w), dims[2].max(d)];
    if target == [h, w, d] {
        return channels.clone();
    }
    let reflect = |idx: usize, n: usize| -> usize {
        if idx < n {
            idx
        } else {
            n - 2 - (idx - n)
        }
    };
    let mut big = Array4::zeros((c, target[0], target[1], target[2]));
    for ci in 0..c {
        for i in 0..target[0] {
            for j in 0..target[1] {
                for k in 0..target[2] {
                    big[[ci, i, j, k]] =
                        channels[[ci, reflect(i, h), reflect(j, w), reflect(k, d)]];
                }
            }
        }
    }
    big
}

#[derive(Debug, Serialize, Deserialize)]
struct StackManifestFile {
    target: String,
    shape: [usize; 3],
    channels: Vec<String>,
}

/// Serialize a stack as one NIfTI volume per channel plus a JSON manifest.
pub fn save_stack(stack: &ChannelStack, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (idx, name) in stack.manifest.iter().enumerate() {
        let vol = Volume {
            data: stack.channels.index_axis(Axis(0), idx).to_owned(),
            spacing: stack.spacing,
            affine: stack.affine,
            modality: Modality::T1w, // stored as float intensities
        };
        crate::io::save_volume(&vol, &dir.join(format!("channel_{idx:02}_{name}.nii.gz")))?;
    }
    let manifest = StackManifestFile {
        target: stack.target.to_string(),
        shape: stack.spatial_shape(),
        channels: stack.manifest.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), text).map_err(|e| Error::io(dir, e))
}

/// Load a stack previously written by [`save_stack`].
pub fn load_stack(dir: &Path) -> Result<ChannelStack> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: StackManifestFile = serde_json::from_str(&text)?;
    let target = match manifest.target.as_str() {
        "T1w" => Modality::T1w,
        "FLAIR" => Modality::Flair,
        other => {
            return Err(Error::InvalidArgument(format!(
                "stack manifest target {other:?} is not a synthesis modality"
            )))
        }
    };
    let [h, w, d] = manifest.shape;
    let mut channels = Array4::<f64>::zeros((manifest.channels.len(), h, w, d));
    let mut spacing = [1.0; 3];
    let mut affine = crate::volume::IDENTITY_AFFINE;
    for (idx, name) in manifest.channels.iter().enumerate() {
        let path = dir.join(format!("channel_{idx:02}_{name}.nii.gz"));
        let vol = crate::io::load_volume(&path, Modality::T1w)?;
        if vol.shape() != manifest.shape {
            return Err(Error::shape_mismatch(
                "stack channel shape vs manifest",
                &vol.shape(),
                &manifest.shape,
            ));
        }
        channels.index_axis_mut(Axis(0), idx).assign(&vol.data);
        spacing = vol.spacing;
        affine = vol.affine;
    }
    Ok(ChannelStack {
        channels,
        manifest: manifest.channels,
        target,
        spacing,
        affine,
    })
}
