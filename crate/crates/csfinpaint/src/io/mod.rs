//! Volume file ingestion and emission.
//!
//! NIfTI-1 (`.nii` / `.nii.gz`) is the canonical on-disk format; FreeSurfer
//! `.mgz` / `.mgh` volumes are accepted read-only through a conversion shim.

pub mod blob;
mod mgh;
mod nifti_io;

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume};

/// Load a 3D volume, dispatching on the file extension.
///
/// Trailing singleton dimensions are squeezed; anything still non-3D is
/// rejected. Intensities are returned unmodified.
pub fn load_volume(path: &Path, modality: Modality) -> Result<Volume> {
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".mgz") || name.ends_with(".mgh") {
        mgh::load_mgh(path, modality)
    } else if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        nifti_io::load_nifti(path, modality)
    } else {
        Err(Error::MalformedVolume {
            path: path.to_path_buf(),
            reason: format!("unsupported volume extension in {name:?} (expected .nii, .nii.gz, .mgz, .mgh)"),
        })
    }
}

/// Save a volume as NIfTI-1. The on-disk element type follows the modality:
/// float64 for intensities, uint8 for masks and edges, int32 for labels.
/// A `.nii.gz` path enables gzip compression.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    nifti_io::save_nifti(v, path)
}
