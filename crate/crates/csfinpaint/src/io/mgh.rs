//! Read-only ingestion shim for FreeSurfer MGH / MGZ volumes.
//!
//! Big-endian, 284-byte header, data ordered x-fastest. Only the fields this
//! pipeline needs (dims, element type, geometry) are interpreted; the optional
//! footer is ignored.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume};

const HEADER_LEN: usize = 284;

const MRI_UCHAR: i32 = 0;
const MRI_INT: i32 = 1;
const MRI_FLOAT: i32 = 3;
const MRI_SHORT: i32 = 4;
const MRI_USHRT: i32 = 10;

pub fn load_mgh(path: &Path, modality: Modality) -> Result<Volume> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    let bytes = if name.ends_with(".mgz") || raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::MalformedVolume {
                path: path.to_path_buf(),
                reason: format!("gzip decode failed: {e}"),
            })?;
        out
    } else {
        raw
    };
    parse_mgh(&bytes, path, modality)
}

fn parse_mgh(bytes: &[u8], path: &Path, modality: Modality) -> Result<Volume> {
    let malformed = |reason: String| Error::MalformedVolume {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(malformed(format!(
            "file too short for MGH header ({} bytes)",
            bytes.len()
        )));
    }
    let i32_at = |off: usize| i32::from_be_bytes(bytes[off..off + 4].try_into().unwrap());
    let i16_at = |off: usize| i16::from_be_bytes(bytes[off..off + 2].try_into().unwrap());
    let f32_at = |off: usize| f32::from_be_bytes(bytes[off..off + 4].try_into().unwrap());

    let version = i32_at(0);
    if version != 1 {
        return Err(malformed(format!("unsupported MGH version {version}")));
    }
    let width = i32_at(4);
    let height = i32_at(8);
    let depth = i32_at(12);
    let nframes = i32_at(16);
    let dtype = i32_at(20);
    let good_ras = i16_at(28);
    if width < 1 || height < 1 || depth < 1 {
        return Err(malformed(format!(
            "bad dimensions {width}x{height}x{depth}"
        )));
    }
    if nframes > 1 {
        return Err(Error::NonVolumetric {
            path: path.to_path_buf(),
            ndim: 4,
        });
    }

    let (mut spacing, mut affine) = ([1.0f64; 3], crate::volume::IDENTITY_AFFINE);
    if good_ras == 1 {
        let xsize = f32_at(30) as f64;
        let ysize = f32_at(34) as f64;
        let zsize = f32_at(38) as f64;
        spacing = [xsize, ysize, zsize];
        let mut mdc = [[0.0f64; 3]; 3]; // columns: x/y/z direction cosines
        for col in 0..3 {
            for rowi in 0..3 {
                mdc[rowi][col] = f32_at(42 + (col * 3 + rowi) * 4) as f64;
            }
        }
        let pxyz_c = [
            f32_at(78) as f64,
            f32_at(82) as f64,
            f32_at(86) as f64,
        ];
        let scale = [xsize, ysize, zsize];
        let center = [width as f64 / 2.0, height as f64 / 2.0, depth as f64 / 2.0];
        for i in 0..3 {
            for j in 0..3 {
                affine[i][j] = mdc[i][j] * scale[j];
            }
            affine[i][3] =
                pxyz_c[i] - (0..3).map(|j| affine[i][j] * center[j]).sum::<f64>();
        }
    }

    let n = (width as usize) * (height as usize) * (depth as usize);
    let elem = match dtype {
        MRI_UCHAR => 1,
        MRI_SHORT | MRI_USHRT => 2,
        MRI_INT | MRI_FLOAT => 4,
        other => return Err(malformed(format!("unsupported MGH element type {other}"))),
    };
    let data_bytes = bytes
        .get(HEADER_LEN..HEADER_LEN + n * elem)
        .ok_or_else(|| malformed("truncated MGH data section".into()))?;

    let mut values = Vec::with_capacity(n);
    match dtype {
        MRI_UCHAR => values.extend(data_bytes.iter().map(|&b| b as f64)),
        MRI_SHORT => values.extend(data_bytes.chunks_exact(2).map(|c| {
            i16::from_be_bytes(c.try_into().unwrap()) as f64
        })),
        MRI_USHRT => values.extend(data_bytes.chunks_exact(2).map(|c| {
            u16::from_be_bytes(c.try_into().unwrap()) as f64
        })),
        MRI_INT => values.extend(data_bytes.chunks_exact(4).map(|c| {
            i32::from_be_bytes(c.try_into().unwrap()) as f64
        })),
        MRI_FLOAT => values.extend(data_bytes.chunks_exact(4).map(|c| {
            f32::from_be_bytes(c.try_into().unwrap()) as f64
        })),
        _ => unreachable!(),
    }

    // MGH stores x fastest: Fortran order for shape (width, height, depth).
    let data = Array3::from_shape_vec(
        (width as usize, height as usize, depth as usize).f(),
        values,
    )
    .map_err(|e| malformed(format!("shape error: {e}")))?
    .as_standard_layout()
    .to_owned();

    Volume::new(data, spacing, affine, modality)
}
