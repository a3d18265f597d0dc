//! Reference implementations shared by the integration tests.
//!
//! Everything here works on logical row-major values in f64 and never calls
//! into the library's kernels or transforms.
#![allow(dead_code)]

use odl_kernels::{half_flavor, ConvSpec, Dims, ElemType, Layout, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut StdRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()
}

/// Geometry from the sweep C in [1,8], H,W in [3,10], k in {1,2,3}, pad in {0,1}.
pub fn random_spec(rng: &mut StdRng) -> ConvSpec {
    let k = rng.gen_range(1..=3);
    ConvSpec::new(
        rng.gen_range(1..=8),
        rng.gen_range(3..=10),
        rng.gen_range(3..=10),
        rng.gen_range(1..=8),
        k,
        k,
        rng.gen_range(0..=1),
    )
    .expect("sweep geometries are valid")
}

/// Direct six-loop convolution. `x` is `(c_in, h, w)`, `w` is
/// `(c_out, c_in, kh, kw)`, result is `(c_out, h_out, w_out)`.
pub fn conv_oracle(spec: &ConvSpec, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (ho, wo) = (spec.h_out(), spec.w_out());
    let mut y = vec![0.0; spec.c_out * ho * wo];
    for co in 0..spec.c_out {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                for ci in 0..spec.c_in {
                    for kh in 0..spec.k_h {
                        for kw in 0..spec.k_w {
                            let ih = (oh + kh) as isize - spec.pad as isize;
                            let iw = (ow + kw) as isize - spec.pad as isize;
                            if ih < 0 || iw < 0 || ih >= spec.h_in as isize || iw >= spec.w_in as isize {
                                continue;
                            }
                            let xi = (ci * spec.h_in + ih as usize) * spec.w_in + iw as usize;
                            let wi = ((co * spec.c_in + ci) * spec.k_h + kh) * spec.k_w + kw;
                            acc += x[xi] * w[wi];
                        }
                    }
                }
                y[(co * ho + oh) * wo + ow] = acc;
            }
        }
    }
    y
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Rounds through the active 16-bit flavor when `elem` is F16.
pub fn round_to(elem: ElemType, v: &[f32]) -> Vec<f32> {
    match elem {
        ElemType::F32 => v.to_vec(),
        ElemType::F16 => v.iter().map(|&x| half_flavor().round(x)).collect(),
    }
}

pub fn activation(spec_c: usize, h: usize, w: usize, layout: Layout, elem: ElemType, v: &[f32]) -> Tensor {
    Tensor::from_logical(Dims::activation(spec_c, h, w), layout, elem, v).unwrap()
}

pub fn weights(spec: &ConvSpec, layout: Layout, elem: ElemType, v: &[f32]) -> Tensor {
    Tensor::weights_from_logical(Dims::weight(spec.c_out, spec.c_in, spec.k_h, spec.k_w), layout, false, elem, v)
        .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `||a - b|| / ||b||`, with `||b||` floored at 1e-12.
pub fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
