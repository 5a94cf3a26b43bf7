//! Canonical 3D volume data model, intensity normalization, and the 7-class
//! tissue-label remapping.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// Tissue classes used throughout the pipeline.
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_CORTICAL_GM: u8 = 1;
pub const CLASS_WM: u8 = 2;
pub const CLASS_CSF: u8 = 3;
pub const CLASS_VENTRICLES: u8 = 4;
pub const CLASS_SUBCORTICAL: u8 = 5;
pub const CLASS_HEAD: u8 = 6;

/// Number of tissue classes (codes `0..=6`).
pub const NUM_TISSUE_CLASSES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Modality {
    T1w,
    Flair,
    Label,
    Mask,
    Edge,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::T1w => "T1w",
            Modality::Flair => "FLAIR",
            Modality::Label => "label",
            Modality::Mask => "mask",
            Modality::Edge => "edge",
        };
        f.write_str(s)
    }
}

/// A 3D scalar grid with spatial metadata. Depending on its role it carries
/// intensities, integer labels, a binary mask, or a binary edge map; `modality`
/// records which.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f64>,
    /// Voxel spacing in mm along each axis.
    pub spacing: [f64; 3],
    /// 4x4 voxel-to-world transform (row major).
    pub affine: [[f64; 4]; 4],
    pub modality: Modality,
}

pub const IDENTITY_AFFINE: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

impl Volume {
    pub fn new(data: Array3<f64>, spacing: [f64; 3], affine: [[f64; 4]; 4], modality: Modality) -> Result<Self> {
        let dim = data.dim();
        if dim.0 < 1 || dim.1 < 1 || dim.2 < 1 {
            return Err(Error::InvalidArgument(format!(
                "volume shape components must be >= 1, got {:?}",
                dim
            )));
        }
        if spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {:?}",
                spacing
            )));
        }
        Ok(Volume {
            data,
            spacing,
            affine,
            modality,
        })
    }

    /// Convenience constructor with unit spacing and identity affine.
    pub fn from_array(data: Array3<f64>, modality: Modality) -> Self {
        Volume {
            data,
            spacing: [1.0; 3],
            affine: IDENTITY_AFFINE,
            modality,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.shape() == other.shape()
    }

    /// New volume with the same spatial metadata but different contents.
    pub fn with_data(&self, data: Array3<f64>, modality: Modality) -> Volume {
        Volume {
            data,
            spacing: self.spacing,
            affine: self.affine,
            modality,
        }
    }
}

/// Map intensities into `[0, 1]` with a global min/max affine rescale.
///
/// A constant volume has no range; it maps to all zeros and logs a warning.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let min = v.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let data = if max > min {
        let range = max - min;
        v.data.mapv(|x| (x - min) / range)
    } else {
        log::warn!(
            "normalize_intensity: constant volume (value {min}), output set to all zeros"
        );
        Array3::zeros(v.data.dim())
    };
    v.with_data(data, v.modality)
}

/// Whole-volume 7-class tissue labels.
#[derive(Debug, Clone)]
pub struct TissueLabelVolume {
    pub data: Array3<u8>,
    pub spacing: [f64; 3],
    pub affine: [[f64; 4]; 4],
}

impl TissueLabelVolume {
    pub fn new(data: Array3<u8>, spacing: [f64; 3], affine: [[f64; 4]; 4]) -> Result<Self> {
        if let Some(bad) = data.iter().find(|&&c| c as usize >= NUM_TISSUE_CLASSES) {
            return Err(Error::InvalidArgument(format!(
                "tissue class code {bad} outside 0..={}",
                NUM_TISSUE_CLASSES - 1
            )));
        }
        Ok(TissueLabelVolume {
            data,
            spacing,
            affine,
        })
    }

    pub fn from_array(data: Array3<u8>) -> Result<Self> {
        Self::new(data, [1.0; 3], IDENTITY_AFFINE)
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    /// Voxel counts per class code.
    pub fn class_histogram(&self) -> [usize; NUM_TISSUE_CLASSES] {
        let mut counts = [0usize; NUM_TISSUE_CLASSES];
        for &c in self.data.iter() {
            counts[c as usize] += 1;
        }
        counts
    }

    /// View the labels as an intensity-like volume (codes as f64).
    pub fn to_volume(&self) -> Volume {
        Volume {
            data: self.data.mapv(|c| c as f64),
            spacing: self.spacing,
            affine: self.affine,
            modality: Modality::Label,
        }
    }
}

/// Maps source segmentation integers (e.g. FreeSurfer aseg codes) onto the
/// seven tissue classes. Loaded from a plain-text `source=class` file; `a-b`
/// ranges are accepted on the left-hand side.
#[derive(Debug, Clone)]
pub struct LabelRemapTable {
    entries: Vec<(i32, i32, u8)>, // (lo, hi, class), inclusive
    /// Class assigned to voxels inside the skull-strip mask that the source
    /// segmentation leaves unlabeled. Defaults to non-ventricle CSF.
    pub inbrain_unlabeled_class: u8,
    /// When set, voxels outside the skull-strip mask are reclassified by
    /// image intensity (head vs background) regardless of source labels.
    pub skullstrip_overrides: bool,
}

/// The default table shipped with the crate, covering the standard FreeSurfer
/// aseg and aparc+aseg code ranges.
pub const DEFAULT_REMAP_TABLE: &str = include_str!("../data/aseg_remap.default.txt");

impl LabelRemapTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut inbrain_unlabeled_class = CLASS_CSF;
        let mut skullstrip_overrides = true;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "remap table line {}: expected key=value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if let Some(option) = key.strip_prefix('@') {
                match option {
                    "inbrain_unlabeled" => {
                        inbrain_unlabeled_class = parse_class(value, lineno)?;
                    }
                    "outside_skullstrip_head" => {
                        skullstrip_overrides = value.parse().map_err(|_| {
                            Error::InvalidArgument(format!(
                                "remap table line {}: expected true/false, got {value:?}",
                                lineno + 1
                            ))
                        })?;
                    }
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "remap table line {}: unknown option @{other}",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let (lo, hi) = match key.split_once('-') {
                Some((a, b)) => (parse_label(a, lineno)?, parse_label(b, lineno)?),
                None => {
                    let v = parse_label(key, lineno)?;
                    (v, v)
                }
            };
            if lo > hi {
                return Err(Error::InvalidArgument(format!(
                    "remap table line {}: empty range {key:?}",
                    lineno + 1
                )));
            }
            entries.push((lo, hi, parse_class(value, lineno)?));
        }
        Ok(LabelRemapTable {
            entries,
            inbrain_unlabeled_class,
            skullstrip_overrides,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn default_table() -> Self {
        Self::parse(DEFAULT_REMAP_TABLE).expect("bundled remap table parses")
    }

    pub fn lookup(&self, label: i32) -> Option<u8> {
        self.entries
            .iter()
            .find(|(lo, hi, _)| (*lo..=*hi).contains(&label))
            .map(|(_, _, class)| *class)
    }
}

fn parse_label(s: &str, lineno: usize) -> Result<i32> {
    s.trim().parse().map_err(|_| {
        Error::InvalidArgument(format!(
            "remap table line {}: bad label integer {s:?}",
            lineno + 1
        ))
    })
}

fn parse_class(s: &str, lineno: usize) -> Result<u8> {
    let c: u8 = s.trim().parse().map_err(|_| {
        Error::InvalidArgument(format!(
            "remap table line {}: bad class code {s:?}",
            lineno + 1
        ))
    })?;
    if c as usize >= NUM_TISSUE_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "remap table line {}: class code {c} outside 0..={}",
            lineno + 1,
            NUM_TISSUE_CLASSES - 1
        )));
    }
    Ok(c)
}

/// Convert a source segmentation into the 7-class tissue labelling.
///
/// Voxels inside the skull-strip mask take the table's class for their source
/// label (unlabeled ones take the table's in-brain policy class). Outside the
/// mask, voxels with nonzero image intensity become head and the rest
/// background.
pub fn remap_tissue_labels(
    aseg: &Volume,
    skullstrip: &Volume,
    intensity: &Volume,
    table: &LabelRemapTable,
) -> Result<TissueLabelVolume> {
    for (name, v) in [("skullstrip", skullstrip), ("intensity", intensity)] {
        if !aseg.same_shape(v) {
            return Err(Error::shape_mismatch(
                &format!("remap_tissue_labels aseg vs {name}"),
                &aseg.shape(),
                &v.shape(),
            ));
        }
    }

    // Reject any unmapped in-brain label up front so the error is exhaustive.
    let mut unmapped = BTreeSet::new();
    for (&label, &inside) in aseg.data.iter().zip(skullstrip.data.iter()) {
        let label = label.round() as i32;
        if inside != 0.0 && label != 0 && table.lookup(label).is_none() {
            unmapped.insert(label);
        }
    }
    if !unmapped.is_empty() {
        return Err(Error::UnmappedLabels {
            labels: unmapped.into_iter().collect(),
        });
    }

    let mut out = Array3::<u8>::zeros(aseg.data.dim());
    ndarray::Zip::from(&mut out)
        .and(&aseg.data)
        .and(&skullstrip.data)
        .and(&intensity.data)
        .for_each(|o, &label, &inside, &img| {
            let label = label.round() as i32;
            *o = if inside != 0.0 {
                if label == 0 {
                    table.inbrain_unlabeled_class
                } else {
                    table.lookup(label).unwrap()
                }
            } else if table.skullstrip_overrides {
                if img != 0.0 {
                    CLASS_HEAD
                } else {
                    CLASS_BACKGROUND
                }
            } else if label != 0 {
                table.lookup(label).unwrap_or(CLASS_HEAD)
            } else if img != 0.0 {
                CLASS_HEAD
            } else {
                CLASS_BACKGROUND
            };
        });

    TissueLabelVolume::new(out, aseg.spacing, aseg.affine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn vol(data: Array3<f64>, modality: Modality) -> Volume {
        Volume::from_array(data, modality)
    }

    #[test]
    fn normalize_maps_range_to_unit_interval() {
        let mut data = Array3::zeros((4, 4, 4));
        data[[0, 0, 0]] = 255.0;
        data[[1, 1, 1]] = 100.0;
        let out = normalize_intensity(&vol(data, Modality::T1w));
        let min = out.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = out.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
        assert!((out.data[[1, 1, 1]] - 100.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_constant_volume_is_all_zeros() {
        let data = Array3::from_elem((3, 3, 3), 7.0);
        let out = normalize_intensity(&vol(data, Modality::T1w));
        assert!(out.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_is_idempotent_on_full_range_input() {
        let mut data = Array3::zeros((4, 4, 4));
        data[[0, 0, 0]] = 1.0;
        data[[2, 2, 2]] = 0.25;
        let v = vol(data, Modality::T1w);
        let once = normalize_intensity(&v);
        let twice = normalize_intensity(&once);
        assert_eq!(once.data, twice.data);
    }

    #[test]
    fn remap_covers_ventricles_head_and_background() {
        let n = 4;
        let mut aseg = Array3::zeros((n, n, n));
        let mut strip = Array3::zeros((n, n, n));
        let mut img = Array3::zeros((n, n, n));
        // one lateral-ventricle voxel inside the brain
        aseg[[1, 1, 1]] = 4.0;
        strip[[1, 1, 1]] = 1.0;
        img[[1, 1, 1]] = 0.5;
        // one unlabeled voxel inside the brain
        strip[[2, 2, 2]] = 1.0;
        img[[2, 2, 2]] = 0.4;
        // one bright voxel outside the skull strip
        img[[3, 3, 3]] = 0.9;

        let tis = remap_tissue_labels(
            &vol(aseg, Modality::Label),
            &vol(strip, Modality::Mask),
            &vol(img, Modality::T1w),
            &LabelRemapTable::default_table(),
        )
        .unwrap();
        assert_eq!(tis.data[[1, 1, 1]], CLASS_VENTRICLES);
        assert_eq!(tis.data[[2, 2, 2]], CLASS_CSF);
        assert_eq!(tis.data[[3, 3, 3]], CLASS_HEAD);
        assert_eq!(tis.data[[0, 0, 0]], CLASS_BACKGROUND);
    }

    #[test]
    fn remap_all_zero_inputs_give_all_background() {
        let n = 3;
        let z = || Array3::zeros((n, n, n));
        let tis = remap_tissue_labels(
            &vol(z(), Modality::Label),
            &vol(z(), Modality::Mask),
            &vol(z(), Modality::T1w),
            &LabelRemapTable::default_table(),
        )
        .unwrap();
        assert!(tis.data.iter().all(|&c| c == CLASS_BACKGROUND));
    }

    #[test]
    fn remap_partition_property() {
        let n = 5;
        let mut aseg = Array3::zeros((n, n, n));
        let mut strip = Array3::zeros((n, n, n));
        let mut img = Array3::zeros((n, n, n));
        for ((i, j, k), v) in aseg.indexed_iter_mut() {
            if i >= 1 && i < 4 && j >= 1 && j < 4 && k >= 1 && k < 4 {
                *v = if i == 2 { 2.0 } else { 3.0 };
                strip[[i, j, k]] = 1.0;
                img[[i, j, k]] = 0.5;
            }
        }
        let tis = remap_tissue_labels(
            &vol(aseg, Modality::Label),
            &vol(strip, Modality::Mask),
            &vol(img, Modality::T1w),
            &LabelRemapTable::default_table(),
        )
        .unwrap();
        let total: usize = tis.class_histogram().iter().sum();
        assert_eq!(total, n * n * n);
    }

    #[test]
    fn remap_rejects_unknown_label() {
        let n = 2;
        let mut aseg = Array3::zeros((n, n, n));
        let mut strip = Array3::zeros((n, n, n));
        aseg[[0, 0, 0]] = 9999.0;
        strip[[0, 0, 0]] = 1.0;
        let err = remap_tissue_labels(
            &vol(aseg, Modality::Label),
            &vol(strip, Modality::Mask),
            &vol(Array3::zeros((n, n, n)), Modality::T1w),
            &LabelRemapTable::default_table(),
        )
        .unwrap_err();
        match err {
            Error::UnmappedLabels { labels } => assert_eq!(labels, vec![9999]),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn remap_shape_mismatch_is_an_error() {
        let a = vol(Array3::zeros((2, 2, 2)), Modality::Label);
        let s = vol(Array3::zeros((3, 2, 2)), Modality::Mask);
        let i = vol(Array3::zeros((2, 2, 2)), Modality::T1w);
        assert!(matches!(
            remap_tissue_labels(&a, &s, &i, &LabelRemapTable::default_table()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn remap_table_parses_ranges_and_options() {
        let table = LabelRemapTable::parse(
            "# comment\n@inbrain_unlabeled = 3\n10-12 = 5\n42 = 1 # cortex\n",
        )
        .unwrap();
        assert_eq!(table.lookup(11), Some(5));
        assert_eq!(table.lookup(42), Some(1));
        assert_eq!(table.lookup(13), None);
        assert_eq!(table.inbrain_unlabeled_class, 3);
    }
}
