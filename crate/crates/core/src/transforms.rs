//! Shape transforms bridging convolutions and matrix multiplications:
//! Im2Row, Im2Col, Block-Transpose and gradient padding.
//!
//! Im2Row writes one window per row. The element order inside a row follows
//! the source layout so that it matches the weight matrix of the same layout:
//! `(kh, kw, c)` for HWC sources and `(c, kh, kw)` for CHW sources. HWC rows
//! are filled with contiguous `k_w * C` chunks, CHW rows with `k_w`-element
//! chunks read at a stride. Zero padding is applied while copying; no padded
//! copy of the input is ever built. Im2Col is the transpose of Im2Row.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::exec::ExecConfig;
use crate::geometry::{ConvSpec, WindowGeom};
use crate::mat::Mat;
use crate::tensor::{copy_box, physical_strides, Dims, Layout, Stored, Tensor};
use crate::with_elem;

fn check_input(x: &Tensor, c: usize, h: usize, w: usize) -> Result<()> {
    match x.dims() {
        Dims::Activation { c: xc, h: xh, w: xw } if (xc, xh, xw) == (c, h, w) => Ok(()),
        Dims::Activation { c: xc, h: xh, w: xw } => {
            Err(Error::Shape(format!("expected a {c}x{h}x{w} activation, got {xc}x{xh}x{xw}")))
        }
        other => Err(Error::TensorKind { expected: "activation", got: other.kind() }),
    }
}

/// Im2Row of the layer input: `(H_O*W_O) x (k_h*k_w*C_I)`.
pub fn im2row<T: Stored>(x: &Tensor, spec: &ConvSpec, cfg: &ExecConfig) -> Result<Mat<T>> {
    check_input(x, spec.c_in, spec.h_in, spec.w_in)?;
    let g = spec.forward_window();
    let mut out = Mat::zeros(g.windows(), g.window_len());
    im2row_into(x.data::<T>()?, x.layout(), &g, out.as_mut_slice(), cfg);
    Ok(out)
}

/// Im2Col of the layer input: `(k_h*k_w*C_I) x (H_O*W_O)`, the transpose of [`im2row`].
pub fn im2col<T: Stored>(x: &Tensor, spec: &ConvSpec, cfg: &ExecConfig) -> Result<Mat<T>> {
    check_input(x, spec.c_in, spec.h_in, spec.w_in)?;
    let g = spec.forward_window();
    let mut out = Mat::zeros(g.window_len(), g.windows());
    im2col_into(x.data::<T>()?, x.layout(), &g, out.as_mut_slice(), cfg);
    Ok(out)
}

/// Im2Row over a source described by `g`; `out` is `windows x window_len`.
pub fn im2row_into<T: Copy + Default + Send + Sync>(
    src: &[T],
    layout: Layout,
    g: &WindowGeom,
    out: &mut [T],
    cfg: &ExecConfig,
) {
    assert_eq!(src.len(), g.in_len());
    let row_len = g.window_len();
    assert_eq!(out.len(), g.windows() * row_len);
    if row_len == 0 || g.windows() == 0 {
        return;
    }
    let zero = T::default();
    let c = g.channels;
    // One channel: both layouts address the same elements in the same order.
    let layout = if c == 1 { Layout::Chw } else { layout };
    let plane = g.in_h * g.in_w;
    cfg.split_rows(out, row_len, g.windows(), |rows, chunk| {
        let (mut oh, mut ow) = (rows.start / g.out_w, rows.start % g.out_w);
        for dst in chunk.chunks_exact_mut(row_len) {
            let iw0 = ow as isize - g.off_w;
            let cols_inside = iw0 >= 0 && iw0 as usize + g.k_w <= g.in_w;
            match layout {
                Layout::Hwc => {
                    let chunk_len = g.k_w * c;
                    for (kh, d) in dst.chunks_exact_mut(chunk_len).enumerate() {
                        match g.in_row(oh, kh) {
                            None => d.fill(zero),
                            Some(ih) if cols_inside => {
                                let s = (ih * g.in_w + iw0 as usize) * c;
                                d.copy_from_slice(&src[s..s + chunk_len]);
                            }
                            Some(ih) => {
                                for (kw, px) in d.chunks_exact_mut(c).enumerate() {
                                    match g.in_col(ow, kw) {
                                        Some(iw) => {
                                            let s = (ih * g.in_w + iw) * c;
                                            px.copy_from_slice(&src[s..s + c]);
                                        }
                                        None => px.fill(zero),
                                    }
                                }
                            }
                        }
                    }
                }
                Layout::Chw => {
                    let mut taps = dst.chunks_exact_mut(g.k_w);
                    for ch in 0..c {
                        for kh in 0..g.k_h {
                            let d = taps.next().expect("row holds c * k_h taps");
                            match g.in_row(oh, kh) {
                                None => d.fill(zero),
                                Some(ih) if cols_inside => {
                                    let s = ch * plane + ih * g.in_w + iw0 as usize;
                                    for (e, &v) in d.iter_mut().zip(&src[s..s + g.k_w]) {
                                        *e = v;
                                    }
                                }
                                Some(ih) => {
                                    for (kw, e) in d.iter_mut().enumerate() {
                                        *e = match g.in_col(ow, kw) {
                                            Some(iw) => src[ch * plane + ih * g.in_w + iw],
                                            None => zero,
                                        };
                                    }
                                }
                            }
                        }
                    }
                }
            }
            ow += 1;
            if ow == g.out_w {
                ow = 0;
                oh += 1;
            }
        }
    });
}

/// Im2Col over a source described by `g`; `out` is `window_len x windows`.
pub fn im2col_into<T: Copy + Default + Send + Sync>(
    src: &[T],
    layout: Layout,
    g: &WindowGeom,
    out: &mut [T],
    cfg: &ExecConfig,
) {
    assert_eq!(src.len(), g.in_len());
    let n_cols = g.windows();
    assert_eq!(out.len(), g.window_len() * n_cols);
    if n_cols == 0 || g.window_len() == 0 {
        return;
    }
    let (c_n, kh_n, kw_n) = (g.channels, g.k_h, g.k_w);
    // One channel: both layouts address the same elements in the same order.
    let layout = if c_n == 1 { Layout::Chw } else { layout };
    cfg.split_rows(out, n_cols, g.window_len(), |rows, chunk| {
        chunk.fill(T::default());
        // Row counters advance incrementally; divisions only happen once per chunk.
        let r0 = rows.start;
        let (mut ch, mut kh, mut kw) = match layout {
            Layout::Hwc => (r0 % c_n, r0 / (kw_n * c_n), (r0 / c_n) % kw_n),
            Layout::Chw => (r0 / (kh_n * kw_n), (r0 / kw_n) % kh_n, r0 % kw_n),
        };
        let mut r = r0;
        while r < rows.end {
            // HWC rows sharing a tap form a contiguous channel range.
            let n_ch = match layout {
                Layout::Hwc => (c_n - ch).min(rows.end - r),
                Layout::Chw => 1,
            };
            let base = (r - r0) * n_cols;
            // Output columns whose tap `kw` lands inside the input row.
            let lo = (g.off_w - kw as isize).clamp(0, g.out_w as isize) as usize;
            let hi = (g.in_w as isize + g.off_w - kw as isize).clamp(lo as isize, g.out_w as isize) as usize;
            if lo < hi {
                let iw_lo = (lo as isize + kw as isize - g.off_w) as usize;
                let len = hi - lo;
                for oh in 0..g.out_h {
                    let Some(ih) = g.in_row(oh, kh) else { continue };
                    let col = base + oh * g.out_w + lo;
                    match layout {
                        Layout::Chw => {
                            let s = (ch * g.in_h + ih) * g.in_w + iw_lo;
                            // Runs are a handful of elements; a plain loop beats a memcpy call.
                            for (d, &v) in chunk[col..col + len].iter_mut().zip(&src[s..s + len]) {
                                *d = v;
                            }
                        }
                        Layout::Hwc => {
                            let s = (ih * g.in_w + iw_lo) * c_n;
                            for (i, p) in src[s..s + len * c_n].chunks_exact(c_n).enumerate() {
                                for (j, &v) in p[ch..ch + n_ch].iter().enumerate() {
                                    chunk[col + j * n_cols + i] = v;
                                }
                            }
                        }
                    }
                }
            }
            r += n_ch;
            match layout {
                Layout::Hwc => {
                    ch = 0;
                    kw += 1;
                    if kw == kw_n {
                        kw = 0;
                        kh += 1;
                    }
                }
                Layout::Chw => {
                    kw += 1;
                    if kw == kw_n {
                        kw = 0;
                        kh += 1;
                        if kh == kh_n {
                            kh = 0;
                            ch += 1;
                        }
                    }
                }
            }
        }
    });
}

/// Block-Transpose of a weight tensor: every `k_h x k_w` filter is reversed
/// and the input/output channel roles are swapped, keeping the storage:
/// `out[ci][co][kh][kw] = w[co][ci][k_h-1-kh][k_w-1-kw]`.
pub fn block_transpose(w: &Tensor) -> Result<Tensor> {
    let Dims::Weight { c_out, c_in, k_h, k_w } = w.dims() else {
        return Err(Error::TensorKind { expected: "weight", got: w.dims().kind() });
    };
    let out_dims = Dims::weight(c_in, c_out, k_h, k_w);
    // Walk the output's logical (ci, co, kh, kw) box, reading the source at
    // (co, ci, k_h-1-kh, k_w-1-kw): swap the channel strides, negate the taps'.
    let [so, si, sh, sw] = w.strides().map(|v| v as isize);
    let s0 = ((k_h - 1) as isize * sh + (k_w - 1) as isize * sw) as usize;
    with_elem!(w.buffer(), T => {
        let src = w.data::<T>()?;
        let mut dst = vec![T::zero(); src.len()];
        let ds = physical_strides(out_dims, w.layout(), w.is_transposed());
        copy_box(src, s0, [si, so, -sh, -sw], &mut dst, 0, ds, [c_in, c_out, k_h, k_w]);
        Tensor::from_vec(out_dims, w.layout(), w.is_transposed(), dst)
    })
}

/// Borders the output gradient with `k - 1 - pad` zeros per side (cropping
/// when negative) so a full convolution with the reversed filters yields a
/// gradient of the input's spatial size. Result: `C_O x (H_I+k_h-1) x (W_I+k_w-1)`.
pub fn pad_gradient(dy: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    check_input(dy, spec.c_out, spec.h_out(), spec.w_out())?;
    let g = spec.backward_input_window();
    let (h, w) = (spec.h_in + spec.k_h - 1, spec.w_in + spec.k_w - 1);
    let dims = Dims::activation(spec.c_out, h, w);
    let mut out = Tensor::zeros(dims, dy.layout(), dy.elem());
    let probe = out.clone();
    with_elem!(dy.buffer(), T => {
        let src = dy.data::<T>()?;
        let dst = out.data_mut::<T>()?;
        for c in 0..spec.c_out {
            for ph in 0..h {
                let sh = ph as isize - g.off_h;
                if sh < 0 || sh as usize >= g.in_h {
                    continue;
                }
                for pw in 0..w {
                    let sw = pw as isize - g.off_w;
                    if sw < 0 || sw as usize >= g.in_w {
                        continue;
                    }
                    dst[probe.offset([c, ph, pw, 0])] = src[dy.offset([c, sh as usize, sw as usize, 0])];
                }
            }
        }
    });
    Ok(out)
}
