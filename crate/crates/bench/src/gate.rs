//! Reference results used by the correctness gates.
//!
//! Plain f64 loops over logical `(c, h, w)` and `(c_out, c_in, kh, kw)`
//! values, independent of the library's lowering.

use odl_kernels::{ConvSpec, ElemType};

/// Input pixel read by output `(oh, ow)` through tap `(kh, kw)`, if inside.
fn tap(spec: &ConvSpec, oh: usize, ow: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
    let ih = (oh + kh).checked_sub(spec.pad)?;
    let iw = (ow + kw).checked_sub(spec.pad)?;
    (ih < spec.h_in && iw < spec.w_in).then_some((ih, iw))
}

/// Visits every `(x index, w index, y index)` triple of the convolution.
fn for_each_mac(spec: &ConvSpec, mut f: impl FnMut(usize, usize, usize)) {
    let (ho, wo) = (spec.h_out(), spec.w_out());
    for co in 0..spec.c_out {
        for ci in 0..spec.c_in {
            for kh in 0..spec.k_h {
                for kw in 0..spec.k_w {
                    let wi = ((co * spec.c_in + ci) * spec.k_h + kh) * spec.k_w + kw;
                    for oh in 0..ho {
                        for ow in 0..wo {
                            if let Some((ih, iw)) = tap(spec, oh, ow, kh, kw) {
                                f((ci * spec.h_in + ih) * spec.w_in + iw, wi, (co * ho + oh) * wo + ow);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward(spec: &ConvSpec, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; spec.c_out * spec.h_out() * spec.w_out()];
    for_each_mac(spec, |xi, wi, yi| y[yi] += x[xi] * w[wi]);
    y
}

pub fn conv_input_grad(spec: &ConvSpec, w: &[f64], dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; spec.c_in * spec.h_in * spec.w_in];
    for_each_mac(spec, |xi, wi, yi| dx[xi] += w[wi] * dy[yi]);
    dx
}

pub fn conv_weight_grad(spec: &ConvSpec, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let mut dw = vec![0.0; spec.weight_len()];
    for_each_mac(spec, |xi, wi, yi| dw[wi] += x[xi] * dy[yi]);
    dw
}

/// `||got - want|| / ||want||`.
pub fn rel_error(got: &[f32], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(g, w)| (*g as f64 - w).powi(2)).sum();
    let den: f64 = want.iter().map(|w| w * w).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Normwise relative tolerance of a gate for `elem`.
pub fn tolerance(elem: ElemType) -> f64 {
    match elem {
        ElemType::F32 => 1e-5,
        ElemType::F16 => 1e-2,
    }
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}
