//! Convolution, normalization, pooling, and padding ops with hand-derived
//! backward passes.
//!
//! 3D convolutions run as chunked im2col + GEMM. Chunks are groups of output
//! rows; forward GEMMs and per-chunk gradient partials are computed in
//! parallel but always combined in chunk order, so results are bit-stable
//! across runs regardless of thread scheduling.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rayon::prelude::*;

use super::Tensor;

/// Geometry shared by the col builder and the col scatterer.
///
/// `grid` enumerates the voxels a column is built for; for a forward
/// convolution that is the output grid, for the transposed direction it is
/// the operator's input grid. `data_dims` are the spatial dims of the array
/// being gathered from (or scattered into).
#[derive(Clone, Copy, Debug)]
struct ColGeom {
    channels: usize,
    data_dims: [usize; 3],
    grid: [usize; 3],
    kernel: [usize; 3],
    stride: usize,
    pad: usize,
    dilation: usize,
}

impl ColGeom {
    fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    /// Number of (g0, g1) grid rows; each contributes `grid[2]` columns.
    fn grid_rows(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    /// Valid range of the innermost grid coordinate for a kernel offset:
    /// data index `g2*stride + off` must land in `[0, dim2)`.
    fn valid_g2(&self, off: isize) -> (usize, usize) {
        let d2 = self.data_dims[2] as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 {
            0
        } else {
            ((-off) + s - 1) / s
        };
        let hi = if d2 > off {
            (d2 - off + s - 1) / s
        } else {
            0
        };
        let lo = (lo.max(0) as usize).min(self.grid[2]);
        let hi = (hi.max(0) as usize).min(self.grid[2]);
        (lo, hi.max(lo))
    }
}

/// Gather columns for grid rows `[row_start, row_end)` into `col`
/// (`rows() x (row_count * grid[2])`), zero-filling out-of-bounds taps.
fn build_col3d(src: &[f64], geom: &ColGeom, row_start: usize, row_end: usize, col: &mut Array2<f64>) {
    let [dh, dw, dd] = geom.data_dims;
    let [k0, k1, k2] = geom.kernel;
    let g2 = geom.grid[2];
    let s = geom.stride;
    let p = geom.pad as isize;
    let dil = geom.dilation as isize;
    col.fill(0.0);
    let col_slice = col.as_slice_mut().expect("col is standard layout");
    let ncols = (row_end - row_start) * g2;

    for r in 0..geom.rows() {
        let c = r % k2;
        let b = (r / k2) % k1;
        let a = (r / (k2 * k1)) % k0;
        let ci = r / (k2 * k1 * k0);
        let off2 = c as isize * dil - p;
        let (lo, hi) = geom.valid_g2(off2);
        let row_base = r * ncols;

        for (idx, gr) in (row_start..row_end).enumerate() {
            let g0 = gr / geom.grid[1];
            let g1 = gr % geom.grid[1];
            let i = g0 as isize * s as isize + a as isize * dil - p;
            let j = g1 as isize * s as isize + b as isize * dil - p;
            if i < 0 || i >= dh as isize || j < 0 || j >= dw as isize {
                continue;
            }
            let src_base = ((ci * dh + i as usize) * dw + j as usize) * dd;
            let dst_base = row_base + idx * g2;
            if s == 1 {
                let d_lo = (lo as isize + off2) as usize;
                col_slice[dst_base + lo..dst_base + hi]
                    .copy_from_slice(&src[src_base + d_lo..src_base + d_lo + (hi - lo)]);
            } else {
                for g in lo..hi {
                    let d2 = (g * s) as isize + off2;
                    col_slice[dst_base + g] = src[src_base + d2 as usize];
                }
            }
        }
    }
}

/// Scatter-add columns back: the adjoint of [`build_col3d`].
fn scatter_col3d(dst: &mut [f64], geom: &ColGeom, row_start: usize, row_end: usize, col: &Array2<f64>) {
    let [dh, dw, dd] = geom.data_dims;
    let [k0, k1, k2] = geom.kernel;
    let g2 = geom.grid[2];
    let s = geom.stride;
    let p = geom.pad as isize;
    let dil = geom.dilation as isize;
    let col_slice = col.as_slice().expect("col is standard layout");
    let ncols = (row_end - row_start) * g2;

    for r in 0..geom.rows() {
        let c = r % k2;
        let b = (r / k2) % k1;
        let a = (r / (k2 * k1)) % k0;
        let ci = r / (k2 * k1 * k0);
        let off2 = c as isize * dil - p;
        let (lo, hi) = geom.valid_g2(off2);
        let row_base = r * ncols;

        for (idx, gr) in (row_start..row_end).enumerate() {
            let g0 = gr / geom.grid[1];
            let g1 = gr % geom.grid[1];
            let i = g0 as isize * s as isize + a as isize * dil - p;
            let j = g1 as isize * s as isize + b as isize * dil - p;
            if i < 0 || i >= dh as isize || j < 0 || j >= dw as isize {
                continue;
            }
            let dst_base = ((ci * dh + i as usize) * dw + j as usize) * dd;
            let src_base = row_base + idx * g2;
            for g in lo..hi {
                let d2 = ((g * s) as isize + off2) as usize;
                dst[dst_base + d2] += col_slice[src_base + g];
            }
        }
    }
}

/// Split grid rows into chunks sized so a col buffer stays around 32 MB.
fn chunk_ranges(geom: &ColGeom) -> Vec<(usize, usize)> {
    let bytes_per_row = geom.rows() * geom.grid[2] * 8;
    let rows_per_chunk = (32_000_000 / bytes_per_row.max(1)).clamp(1, geom.grid_rows().max(1));
    let mut out = Vec::new();
    let mut start = 0;
    while start < geom.grid_rows() {
        let end = (start + rows_per_chunk).min(geom.grid_rows());
        out.push((start, end));
        start = end;
    }
    out
}

fn as_std_slice(a: &ArrayD<f64>) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().cloned().collect()),
    }
}

fn conv_out_dim(n: usize, k: usize, s: usize, p: usize, d: usize) -> usize {
    let padded = n + 2 * p;
    let span = d * (k - 1) + 1;
    assert!(
        padded >= span,
        "convolution input extent {n} (pad {p}) too small for kernel {k} dilation {d}"
    );
    (padded - span) / s + 1
}

/// 3D convolution: `x (Cin,H,W,D)`, `w (Cout,Cin,k,k,k)`, optional bias
/// `(Cout)`; zero padding.
pub fn conv3d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Tensor {
    let xshape = x.shape();
    let wshape = w.shape();
    assert_eq!(xshape.len(), 4, "conv3d input must be (C,H,W,D)");
    assert_eq!(wshape.len(), 5, "conv3d weight must be (Cout,Cin,k,k,k)");
    assert_eq!(xshape[0], wshape[1], "conv3d channel mismatch");
    let cin = xshape[0];
    let cout = wshape[0];
    let kernel = [wshape[2], wshape[3], wshape[4]];
    let grid = [
        conv_out_dim(xshape[1], kernel[0], stride, pad, dilation),
        conv_out_dim(xshape[2], kernel[1], stride, pad, dilation),
        conv_out_dim(xshape[3], kernel[2], stride, pad, dilation),
    ];
    let geom = ColGeom {
        channels: cin,
        data_dims: [xshape[1], xshape[2], xshape[3]],
        grid,
        kernel,
        stride,
        pad,
        dilation,
    };

    let k_rows = geom.rows();
    let total_cols = grid.iter().product::<usize>();
    let w2 = w.with_data(|wd| {
        Array2::from_shape_vec((cout, k_rows), wd.iter().cloned().collect()).unwrap()
    });

    let mut out2 = Array2::<f64>::zeros((cout, total_cols));
    let chunks = chunk_ranges(&geom);
    x.with_data(|xd| {
        let xs = as_std_slice(xd);
        let blocks: Vec<(usize, Array2<f64>)> = chunks
            .par_iter()
            .map(|&(r0, r1)| {
                let ncols = (r1 - r0) * grid[2];
                let mut col = Array2::<f64>::zeros((k_rows, ncols));
                build_col3d(&xs, &geom, r0, r1, &mut col);
                let mut block = Array2::<f64>::zeros((cout, ncols));
                ndarray::linalg::general_mat_mul(1.0, &w2, &col, 0.0, &mut block);
                (r0 * grid[2], block)
            })
            .collect();
        for (offset, block) in blocks {
            let ncols = block.ncols();
            out2
                .slice_mut(ndarray::s![.., offset..offset + ncols])
                .assign(&block);
        }
    });

    if let Some(b) = bias {
        b.with_data(|bd| {
            for (ci, mut row) in out2.rows_mut().into_iter().enumerate() {
                row += bd[[ci]];
            }
        });
    }
    let out = out2
        .into_shape_with_order(IxDyn(&[cout, grid[0], grid[1], grid[2]]))
        .unwrap();

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let x_saved = x.clone();
    let w2_saved = w2;
    let wshape_full = wshape.clone();
    let xshape_full = xshape.clone();
    Tensor::from_op(
        out,
        parents,
        Box::new(move |g| {
            let g2 = Array2::from_shape_vec(
                (cout, total_cols),
                g.iter().cloned().collect(),
            )
            .unwrap();
            let chunks = chunk_ranges(&geom);

            // grad wrt input: colg = W^T g, scattered back
            let mut gx = vec![0.0f64; xshape_full.iter().product()];
            let colgs: Vec<(usize, usize, Array2<f64>)> = chunks
                .par_iter()
                .map(|&(r0, r1)| {
                    let ncols = (r1 - r0) * grid[2];
                    let gblock = g2.slice(ndarray::s![.., r0 * grid[2]..r0 * grid[2] + ncols]);
                    let mut colg = Array2::<f64>::zeros((k_rows, ncols));
                    ndarray::linalg::general_mat_mul(1.0, &w2_saved.t(), &gblock, 0.0, &mut colg);
                    (r0, r1, colg)
                })
                .collect();
            for (r0, r1, colg) in &colgs {
                scatter_col3d(&mut gx, &geom, *r0, *r1, colg);
            }
            let gx = ArrayD::from_shape_vec(IxDyn(&xshape_full), gx).unwrap();

            // grad wrt weight: sum over chunks of g_chunk col_chunk^T, in order
            let partials: Vec<Array2<f64>> = x_saved.with_data(|xd| {
                let xs = as_std_slice(xd);
                chunks
                    .par_iter()
                    .map(|&(r0, r1)| {
                        let ncols = (r1 - r0) * grid[2];
                        let mut col = Array2::<f64>::zeros((k_rows, ncols));
                        build_col3d(&xs, &geom, r0, r1, &mut col);
                        let gblock =
                            g2.slice(ndarray::s![.., r0 * grid[2]..r0 * grid[2] + ncols]);
                        let mut gw = Array2::<f64>::zeros((cout, k_rows));
                        ndarray::linalg::general_mat_mul(1.0, &gblock, &col.t(), 0.0, &mut gw);
                        gw
                    })
                    .collect()
            });
            let mut gw2 = Array2::<f64>::zeros((cout, k_rows));
            for p in partials {
                gw2 += &p;
            }
            let gw = gw2
                .into_shape_with_order(IxDyn(&wshape_full))
                .unwrap();

            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                let gb = Array1::from_iter(g2.rows().into_iter().map(|r| r.sum()));
                grads.push(Some(gb.into_dyn()));
            }
            grads
        }),
    )
}

/// Transposed 3D convolution: `x (Cin,H,W,D)`, `w (Cin,Cout,k,k,k)`;
/// output spatial size `(n-1)*stride - 2*pad + k`.
pub fn conv_transpose3d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let xshape = x.shape();
    let wshape = w.shape();
    assert_eq!(xshape.len(), 4);
    assert_eq!(wshape.len(), 5, "conv_transpose3d weight must be (Cin,Cout,k,k,k)");
    assert_eq!(xshape[0], wshape[0], "conv_transpose3d channel mismatch");
    let cin = xshape[0];
    let cout = wshape[1];
    let kernel = [wshape[2], wshape[3], wshape[4]];
    let in_dims = [xshape[1], xshape[2], xshape[3]];
    let out_dims = [
        (in_dims[0] - 1) * stride + kernel[0] - 2 * pad,
        (in_dims[1] - 1) * stride + kernel[1] - 2 * pad,
        (in_dims[2] - 1) * stride + kernel[2] - 2 * pad,
    ];
    // grid = the operator's input voxels; data = the (larger) output array
    let geom = ColGeom {
        channels: cout,
        data_dims: out_dims,
        grid: in_dims,
        kernel,
        stride,
        pad,
        dilation: 1,
    };
    let k_rows = geom.rows();
    let total_cols = in_dims.iter().product::<usize>();
    // W2: (Cin, Cout*k^3)
    let w2 = w.with_data(|wd| {
        Array2::from_shape_vec((cin, k_rows), wd.iter().cloned().collect()).unwrap()
    });
    let x2 = x.with_data(|xd| {
        Array2::from_shape_vec((cin, total_cols), xd.iter().cloned().collect()).unwrap()
    });

    let mut out = vec![0.0f64; cout * out_dims.iter().product::<usize>()];
    let chunks = chunk_ranges(&geom);
    let cols: Vec<(usize, usize, Array2<f64>)> = chunks
        .par_iter()
        .map(|&(r0, r1)| {
            let ncols = (r1 - r0) * in_dims[2];
            let xblock = x2.slice(ndarray::s![.., r0 * in_dims[2]..r0 * in_dims[2] + ncols]);
            let mut col = Array2::<f64>::zeros((k_rows, ncols));
            ndarray::linalg::general_mat_mul(1.0, &w2.t(), &xblock, 0.0, &mut col);
            (r0, r1, col)
        })
        .collect();
    for (r0, r1, col) in &cols {
        scatter_col3d(&mut out, &geom, *r0, *r1, col);
    }
    let mut out = ArrayD::from_shape_vec(
        IxDyn(&[cout, out_dims[0], out_dims[1], out_dims[2]]),
        out,
    )
    .unwrap();
    if let Some(b) = bias {
        b.with_data(|bd| {
            for (ci, mut ch) in out.outer_iter_mut().enumerate() {
                ch += bd[[ci]];
            }
        });
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let xshape_full = xshape.clone();
    let wshape_full = wshape.clone();
    let w2_saved = w2;
    let x2_saved = x2;
    Tensor::from_op(
        out,
        parents,
        Box::new(move |g| {
            let gs = as_std_slice(g).into_owned();
            let chunks = chunk_ranges(&geom);
            // colg gathers the output-gradient taps for each input voxel
            let colgs: Vec<(usize, usize, Array2<f64>)> = chunks
                .par_iter()
                .map(|&(r0, r1)| {
                    let ncols = (r1 - r0) * in_dims[2];
                    let mut colg = Array2::<f64>::zeros((k_rows, ncols));
                    build_col3d(&gs, &geom, r0, r1, &mut colg);
                    (r0, r1, colg)
                })
                .collect();

            // grad wrt x: W2 (Cin,K) x colg
            let mut gx2 = Array2::<f64>::zeros((cin, total_cols));
            for (r0, _r1, colg) in &colgs {
                let ncols = colg.ncols();
                let mut block = Array2::<f64>::zeros((cin, ncols));
                ndarray::linalg::general_mat_mul(1.0, &w2_saved, colg, 0.0, &mut block);
                gx2
                    .slice_mut(ndarray::s![.., r0 * in_dims[2]..r0 * in_dims[2] + ncols])
                    .assign(&block);
            }
            let gx = gx2.into_shape_with_order(IxDyn(&xshape_full)).unwrap();

            // grad wrt w: sum over chunks of X2_chunk colg^T
            let mut gw2 = Array2::<f64>::zeros((cin, k_rows));
            let partials: Vec<Array2<f64>> = colgs
                .par_iter()
                .map(|(r0, _r1, colg)| {
                    let ncols = colg.ncols();
                    let xblock = x2_saved
                        .slice(ndarray::s![.., r0 * in_dims[2]..r0 * in_dims[2] + ncols]);
                    let mut gw = Array2::<f64>::zeros((cin, k_rows));
                    ndarray::linalg::general_mat_mul(1.0, &xblock, &colg.t(), 0.0, &mut gw);
                    gw
                })
                .collect();
            for p in partials {
                gw2 += &p;
            }
            let gw = gw2.into_shape_with_order(IxDyn(&wshape_full)).unwrap();

            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                let gdyn = g
                    .view()
                    .into_shape_with_order((cout, out_dims.iter().product::<usize>()))
                    .unwrap();
                let gb = Array1::from_iter(gdyn.rows().into_iter().map(|r| r.sum()));
                grads.push(Some(gb.into_dyn()));
            }
            grads
        }),
    )
}

/// 2D convolution for the slice-wise feature extractor:
/// `x (Cin,H,W)`, `w (Cout,Cin,k,k)`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    // implemented as a depth-1 3D convolution
    let xshape = x.shape();
    let wshape = w.shape();
    assert_eq!(xshape.len(), 3, "conv2d input must be (C,H,W)");
    assert_eq!(wshape.len(), 4, "conv2d weight must be (Cout,Cin,k,k)");
    let x3 = x.reshape(&[xshape[0], xshape[1], xshape[2], 1]);
    let w3 = w.reshape(&[wshape[0], wshape[1], wshape[2], wshape[3], 1]);
    let out = conv3d_padded_hw(&x3, &w3, bias, stride, pad);
    let oshape = out.shape();
    out.reshape(&[oshape[0], oshape[1], oshape[2]])
}

/// conv3d that pads only the first two spatial axes (depth stays size 1).
fn conv3d_padded_hw(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    if pad == 0 {
        return conv3d(x, w, bias, stride, 0, 1);
    }
    let padded = zero_pad_hw(x, pad);
    conv3d(&padded, w, bias, stride, 0, 1)
}

fn zero_pad_hw(x: &Tensor, p: usize) -> Tensor {
    let s = x.shape();
    let (c, h, w, d) = (s[0], s[1], s[2], s[3]);
    let mut out = ArrayD::zeros(IxDyn(&[c, h + 2 * p, w + 2 * p, d]));
    x.with_data(|xd| {
        out.slice_mut(ndarray::s![.., p..p + h, p..p + w, ..])
            .assign(&xd.view().into_dimensionality::<ndarray::Ix4>().unwrap());
    });
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            vec![Some(
                g4.slice(ndarray::s![.., p..p + h, p..p + w, ..])
                    .to_owned()
                    .into_dyn(),
            )]
        }),
    )
}

/// 2x2 stride-2 max pooling on `(C,H,W)`; odd trailing rows/cols dropped.
pub fn maxpool2d(x: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 3, "maxpool2d expects (C,H,W)");
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = ArrayD::zeros(IxDyn(&[c, oh, ow]));
    let mut argmax = vec![0usize; c * oh * ow];
    x.with_data(|xd| {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (ii, jj) = (2 * i + di, 2 * j + dj);
                            let v = xd[[ci, ii, jj]];
                            if v > best {
                                best = v;
                                best_idx = (ci * h + ii) * w + jj;
                            }
                        }
                    }
                    out[[ci, i, j]] = best;
                    argmax[(ci * oh + i) * ow + j] = best_idx;
                }
            }
        }
    });
    let in_shape = [c, h, w];
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0f64; in_shape.iter().product()];
            for (flat, &src) in argmax.iter().enumerate() {
                gx[src] += g.as_slice().unwrap()[flat];
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&in_shape), gx).unwrap())]
        }),
    )
}

/// Reflection padding (border not repeated) on all three spatial axes of
/// `(C,H,W,D)`. Requires every spatial dim > pad.
pub fn reflect_pad3d(x: &Tensor, p: usize) -> Tensor {
    if p == 0 {
        return x.clone();
    }
    let s = x.shape();
    assert_eq!(s.len(), 4);
    let (c, h, w, d) = (s[0], s[1], s[2], s[3]);
    assert!(h > p && w > p && d > p, "reflect_pad3d needs dims > pad");
    let maps: Vec<Vec<usize>> = [h, w, d]
        .iter()
        .map(|&n| {
            (0..n + 2 * p)
                .map(|o| {
                    let x = o as isize - p as isize;
                    let n = n as isize;
                    let r = if x < 0 {
                        -x
                    } else if x >= n {
                        2 * n - 2 - x
                    } else {
                        x
                    };
                    r as usize
                })
                .collect()
        })
        .collect();

    let mut out = ArrayD::zeros(IxDyn(&[c, h + 2 * p, w + 2 * p, d + 2 * p]));
    x.with_data(|xd| {
        for ci in 0..c {
            for oi in 0..h + 2 * p {
                for oj in 0..w + 2 * p {
                    for ok in 0..d + 2 * p {
                        out[[ci, oi, oj, ok]] =
                            xd[[ci, maps[0][oi], maps[1][oj], maps[2][ok]]];
                    }
                }
            }
        }
    });
    let in_shape = [c, h, w, d];
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&in_shape));
            for ci in 0..in_shape[0] {
                for oi in 0..maps[0].len() {
                    for oj in 0..maps[1].len() {
                        for ok in 0..maps[2].len() {
                            gx[[ci, maps[0][oi], maps[1][oj], maps[2][ok]]] +=
                                g[[ci, oi, oj, ok]];
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Instance normalization over the spatial dims of `(C, ...)` with learnable
/// per-channel scale and shift.
pub fn instance_norm3d(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let s = x.shape();
    let c = s[0];
    let spatial: usize = s[1..].iter().product();
    assert_eq!(gamma.shape(), vec![c]);
    assert_eq!(beta.shape(), vec![c]);

    let mut xhat = ArrayD::zeros(IxDyn(&s));
    let mut invstd = vec![0.0f64; c];
    x.with_data(|xd| {
        let xs = as_std_slice(xd);
        let xh = xhat.as_slice_mut().unwrap();
        for ci in 0..c {
            let chunk = &xs[ci * spatial..(ci + 1) * spatial];
            let mean = chunk.iter().sum::<f64>() / spatial as f64;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
                / spatial as f64;
            let is = 1.0 / (var + eps).sqrt();
            invstd[ci] = is;
            for (o, &v) in xh[ci * spatial..(ci + 1) * spatial].iter_mut().zip(chunk) {
                *o = (v - mean) * is;
            }
        }
    });
    let mut out = xhat.clone();
    gamma.with_data(|gd| {
        beta.with_data(|bd| {
            let os = out.as_slice_mut().unwrap();
            for ci in 0..c {
                let (gc, bc) = (gd[[ci]], bd[[ci]]);
                for o in os[ci * spatial..(ci + 1) * spatial].iter_mut() {
                    *o = gc * *o + bc;
                }
            }
        })
    });

    let gamma_saved = gamma.clone();
    let shape_full = s.clone();
    Tensor::from_op(
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let gs = as_std_slice(g);
            let xh = xhat.as_slice().unwrap();
            let n = spatial as f64;
            let mut gx = vec![0.0f64; c * spatial];
            let mut ggamma = vec![0.0f64; c];
            let mut gbeta = vec![0.0f64; c];
            gamma_saved.with_data(|gammad| {
                for ci in 0..c {
                    let grange = &gs[ci * spatial..(ci + 1) * spatial];
                    let xrange = &xh[ci * spatial..(ci + 1) * spatial];
                    let sum_g: f64 = grange.iter().sum();
                    let sum_gx: f64 = grange.iter().zip(xrange).map(|(&a, &b)| a * b).sum();
                    gbeta[ci] = sum_g;
                    ggamma[ci] = sum_gx;
                    let k = gammad[[ci]] * invstd[ci];
                    let mg = sum_g / n;
                    let mgx = sum_gx / n;
                    for ((o, &gv), &xv) in gx[ci * spatial..(ci + 1) * spatial]
                        .iter_mut()
                        .zip(grange)
                        .zip(xrange)
                    {
                        *o = k * (gv - mg - xv * mgx);
                    }
                }
            });
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&shape_full), gx).unwrap()),
                Some(Array1::from_vec(ggamma).into_dyn()),
                Some(Array1::from_vec(gbeta).into_dyn()),
            ]
        }),
    )
}

/// Scale a weight by the reciprocal of its leading singular value estimate:
/// `w / sigma` with `sigma = u^T W v` for the supplied (fixed) power-iteration
/// vectors. The gradient includes the quotient-rule term through `sigma`.
pub fn spectral_scale(w: &Tensor, u: &Array1<f64>, v: &Array1<f64>) -> Tensor {
    let shape = w.shape();
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    assert_eq!(u.len(), rows);
    assert_eq!(v.len(), cols);
    let (sigma, data) = w.with_data(|wd| {
        let w2 = wd
            .view()
            .into_shape_with_order((rows, cols))
            .expect("spectral_scale reshape");
        let wv = w2.dot(v);
        let sigma = u.dot(&wv);
        let sigma = if sigma.abs() < 1e-12 { 1e-12 } else { sigma };
        (sigma, wd.mapv(|x| x / sigma))
    });
    let u = u.clone();
    let v = v.clone();
    let w_saved = w.clone();
    let shape_full = shape.clone();
    Tensor::from_op(
        data,
        vec![w.clone()],
        Box::new(move |g| {
            let dot_gw: f64 = w_saved.with_data(|wd| {
                g.iter().zip(wd.iter()).map(|(&a, &b)| a * b).sum()
            });
            let coef = dot_gw / (sigma * sigma);
            let mut gw = vec![0.0f64; rows * cols];
            let gsl = as_std_slice(g);
            for r in 0..rows {
                for cidx in 0..cols {
                    gw[r * cols + cidx] =
                        gsl[r * cols + cidx] / sigma - coef * u[r] * v[cidx];
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&shape_full), gw).unwrap())]
        }),
    )
}

/// One power-iteration refinement of (u, v) for the 2D view of `w`,
/// returning the updated estimate of the leading singular value.
pub fn power_iteration(w: &ArrayD<f64>, u: &mut Array1<f64>, v: &mut Array1<f64>) -> f64 {
    let rows = w.shape()[0];
    let cols: usize = w.shape()[1..].iter().product();
    let w2 = w
        .view()
        .into_shape_with_order((rows, cols))
        .expect("power_iteration reshape");
    let mut vt = w2.t().dot(u);
    normalize(&mut vt);
    let mut ut = w2.dot(&vt);
    normalize(&mut ut);
    *u = ut;
    *v = vt;
    u.dot(&w2.dot(v))
}

fn normalize(x: &mut Array1<f64>) {
    let n = x.dot(x).sqrt();
    if n > 1e-12 {
        x.mapv_inplace(|v| v / n);
    } else {
        x.fill(0.0);
        if !x.is_empty() {
            x[0] = 1.0;
        }
    }
}
