//! NIfTI-1 read/write via the `nifti` crate, adapted to [`Volume`].

use std::path::Path;

use ndarray::{Array3, ArrayD, Ix3};
use nifti::{
    object::NiftiObject, volume::ndarray::IntoNdArray, NiftiHeader, ReaderOptions,
};

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume};

pub fn load_nifti(path: &Path, modality: Modality) -> Result<Volume> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| match e {
        nifti::NiftiError::Io(io) => Error::io(path, io),
        other => Error::MalformedVolume {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let header = obj.header().clone();
    let data: ArrayD<f64> = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| Error::MalformedVolume {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;

    // Squeeze trailing singleton axes; true multi-frame data stays non-3D.
    let mut data = data;
    while data.ndim() > 3 && data.shape()[data.ndim() - 1] == 1 {
        let last = data.ndim() - 1;
        data = data.index_axis_move(ndarray::Axis(last), 0);
    }
    if data.ndim() != 3 {
        return Err(Error::NonVolumetric {
            path: path.to_path_buf(),
            ndim: data.ndim(),
        });
    }
    let data: Array3<f64> = data
        .into_dimensionality::<Ix3>()
        .expect("ndim checked above")
        .as_standard_layout()
        .to_owned();

    let spacing = [
        header.pixdim[1] as f64,
        header.pixdim[2] as f64,
        header.pixdim[3] as f64,
    ];
    let affine = affine_from_header(&header);
    Volume::new(data, sanitize_spacing(spacing), affine, modality)
}

pub fn save_nifti(v: &Volume, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let header = header_for(v);
    let options = nifti::writer::WriterOptions::new(path).reference_header(&header);
    let result = match v.modality {
        Modality::Mask | Modality::Edge => {
            options.write_nifti(&v.data.mapv(|x| if x != 0.0 { 1u8 } else { 0u8 }))
        }
        Modality::Label => options.write_nifti(&v.data.mapv(|x| x.round() as i32)),
        Modality::T1w | Modality::Flair => options.write_nifti(&v.data),
    };
    result.map_err(|e| Error::MalformedVolume {
        path: path.to_path_buf(),
        reason: format!("write failed: {e}"),
    })
}

fn header_for(v: &Volume) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    let shape = v.shape();
    h.dim = [3, shape[0] as u16, shape[1] as u16, shape[2] as u16, 1, 1, 1, 1];
    h.pixdim = [
        1.0,
        v.spacing[0] as f32,
        v.spacing[1] as f32,
        v.spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    h.scl_slope = 0.0; // no rescaling on read
    h.scl_inter = 0.0;
    h.sform_code = 2;
    h.qform_code = 0;
    h.srow_x = row(&v.affine[0]);
    h.srow_y = row(&v.affine[1]);
    h.srow_z = row(&v.affine[2]);
    h.xyzt_units = 2; // millimetres
    h.descrip = b"csfinpaint".to_vec();
    h
}

fn row(r: &[f64; 4]) -> [f32; 4] {
    [r[0] as f32, r[1] as f32, r[2] as f32, r[3] as f32]
}

fn sanitize_spacing(s: [f64; 3]) -> [f64; 3] {
    // Some headers carry zero pixdim entries; fall back to unit spacing.
    [
        if s[0] > 0.0 { s[0] } else { 1.0 },
        if s[1] > 0.0 { s[1] } else { 1.0 },
        if s[2] > 0.0 { s[2] } else { 1.0 },
    ]
}

/// Voxel-to-world transform: sform when present, else qform, else a scaled
/// identity from pixdim.
fn affine_from_header(h: &NiftiHeader) -> [[f64; 4]; 4] {
    if h.sform_code > 0 {
        return [
            widen(&h.srow_x),
            widen(&h.srow_y),
            widen(&h.srow_z),
            [0.0, 0.0, 0.0, 1.0],
        ];
    }
    if h.qform_code > 0 {
        return affine_from_quaternion(h);
    }
    let mut a = crate::volume::IDENTITY_AFFINE;
    for (i, s) in sanitize_spacing([
        h.pixdim[1] as f64,
        h.pixdim[2] as f64,
        h.pixdim[3] as f64,
    ])
    .iter()
    .enumerate()
    {
        a[i][i] = *s;
    }
    a
}

fn widen(r: &[f32; 4]) -> [f64; 4] {
    [r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64]
}

fn affine_from_quaternion(h: &NiftiHeader) -> [[f64; 4]; 4] {
    let b = h.quatern_b as f64;
    let c = h.quatern_c as f64;
    let d = h.quatern_d as f64;
    let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
    let qfac = if (h.pixdim[0] as f64) < 0.0 { -1.0 } else { 1.0 };
    let [sx, sy, sz] = sanitize_spacing([
        h.pixdim[1] as f64,
        h.pixdim[2] as f64,
        h.pixdim[3] as f64,
    ]);
    let r = [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - b * b - c * c,
        ],
    ];
    let scale = [sx, sy, sz * qfac];
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[i][j] * scale[j];
        }
    }
    out[0][3] = h.quatern_x as f64;
    out[1][3] = h.quatern_y as f64;
    out[2][3] = h.quatern_z as f64;
    out[3][3] = 1.0;
    out
}
