mod common;

use common::*;
use odl_kernels::{ConvSpec, ElemType, ExecConfig, KernelVariant, LayerState, Layout, Op, Tensor};

const LAYOUTS: [Layout; 2] = [Layout::Chw, Layout::Hwc];
const ELEMS: [ElemType; 2] = [ElemType::F32, ElemType::F16];

struct Case {
    spec: ConvSpec,
    x: Vec<f32>,
    w: Vec<f32>,
}

fn cases(n: usize, seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let spec = random_spec(&mut r);
            let x = uniform(&mut r, spec.c_in * spec.h_in * spec.w_in);
            let w = uniform(&mut r, spec.weight_len());
            Case { spec, x, w }
        })
        .collect()
}

/// Forward output in logical order.
fn forward(
    op: Op,
    c: &Case,
    layout: Layout,
    elem: ElemType,
    variant: KernelVariant,
    transposed: Option<bool>,
) -> Vec<f64> {
    let s = &c.spec;
    let mut st = LayerState::new(op, *s, layout, elem, &weights(s, layout, elem, &c.w)).unwrap();
    if let Some(t) = transposed {
        st = st.with_weight_storage(t).unwrap();
    }
    let mut st = st.with_variant(variant).unwrap();
    let x = activation(s.c_in, s.h_in, s.w_in, layout, elem, &c.x);
    widen(&st.forward(&x, &ExecConfig::default()).unwrap().to_logical())
}

fn check(elem: ElemType, got: &[f64], want: &[f64]) -> Result<(), String> {
    match elem {
        ElemType::F32 => {
            let d = max_abs_diff(got, want);
            (d <= 1e-5).then_some(()).ok_or(format!("max abs error {d:e}"))
        }
        ElemType::F16 => {
            let d = norm_rel(got, want);
            (d <= 1e-2).then_some(()).ok_or(format!("relative error {d:e}"))
        }
    }
}

fn oracle(c: &Case, elem: ElemType) -> Vec<f64> {
    conv_oracle(&c.spec, &widen(&round_to(elem, &c.x)), &widen(&round_to(elem, &c.w)))
}

#[test]
fn every_forward_variant_matches_direct_convolution() {
    let cases = cases(200, 1);
    let mut runs = 0;
    for c in &cases {
        for elem in ELEMS {
            let want = oracle(c, elem);
            for layout in LAYOUTS {
                for variant in KernelVariant::all(elem) {
                    let mut ops = vec![Op::Conv2d];
                    if c.spec.is_pointwise() && c.spec.pad == 0 {
                        ops.push(Op::Pointwise);
                    }
                    for op in ops {
                        let got = forward(op, c, layout, elem, variant, None);
                        if let Err(e) = check(elem, &got, &want) {
                            panic!("{op} {layout} {elem} {variant} {:?}: {e}", c.spec);
                        }
                        runs += 1;
                    }
                }
            }
        }
    }
    assert!(runs >= 200 * 2 * 2);
}

#[test]
fn non_canonical_weight_storage_gives_the_same_forward() {
    for c in &cases(40, 2) {
        for elem in ELEMS {
            let want = oracle(c, elem);
            for variant in KernelVariant::all(elem) {
                for t in [false, true] {
                    let got = forward(Op::Conv2d, c, Layout::Hwc, elem, variant, Some(t));
                    check(elem, &got, &want).unwrap_or_else(|e| panic!("{elem} {variant} transposed={t}: {e}"));
                }
            }
        }
    }
}

#[test]
fn fully_connected_matches_matrix_vector_product() {
    let mut r = rng(3);
    for _ in 0..50 {
        let spec = ConvSpec::new(r_range(&mut r, 1, 70), 1, 1, r_range(&mut r, 1, 20), 1, 1, 0).unwrap();
        let c = Case { x: uniform(&mut r, spec.c_in), w: uniform(&mut r, spec.weight_len()), spec };
        for elem in ELEMS {
            let want = oracle(&c, elem);
            for layout in LAYOUTS {
                for variant in
                    KernelVariant::all(elem).into_iter().filter(|v| v.vector == odl_kernels::VectorMode::Scalar)
                {
                    let got = forward(Op::Fc, &c, layout, elem, variant, None);
                    check(elem, &got, &want).unwrap_or_else(|e| panic!("fc {layout} {elem} {variant}: {e}"));
                }
            }
        }
    }
}

fn r_range(r: &mut rand::rngs::StdRng, lo: usize, hi: usize) -> usize {
    use rand::Rng;
    r.gen_range(lo..=hi)
}

#[test]
fn layouts_agree_on_every_step() {
    let cfg = ExecConfig::default();
    let mut r = rng(4);
    for c in &cases(60, 5) {
        let s = c.spec;
        let dy = uniform(&mut r, s.c_out * s.h_out() * s.w_out());
        for elem in ELEMS {
            let mut outs: Vec<[Vec<f64>; 3]> = Vec::new();
            for layout in LAYOUTS {
                let mut st = LayerState::new(Op::Conv2d, s, layout, elem, &weights(&s, layout, elem, &c.w)).unwrap();
                let x = activation(s.c_in, s.h_in, s.w_in, layout, elem, &c.x);
                let g = activation(s.c_out, s.h_out(), s.w_out(), layout, elem, &dy);
                let y = st.forward(&x, &cfg).unwrap();
                let grads = st.backward(&g, &cfg).unwrap();
                outs.push([y, grads.dx, grads.dw].map(|t: Tensor| widen(&t.to_logical())));
            }
            for (i, (a, b)) in outs[0].iter().zip(&outs[1]).enumerate() {
                match elem {
                    ElemType::F32 => assert!(max_abs_diff(a, b) <= 1e-5, "{s:?} output {i}"),
                    ElemType::F16 => assert!(norm_rel(a, b) <= 1e-2, "{s:?} output {i}"),
                }
            }
        }
    }
}

/// `(Y, dX, dW)` of one training step in logical order, plus the raw `dW`.
fn step(st: &mut LayerState, x: &Tensor, dy: &Tensor) -> ([Vec<f64>; 3], Tensor) {
    let cfg = ExecConfig::default();
    let y = st.forward(x, &cfg).unwrap();
    let g = st.backward(dy, &cfg).unwrap();
    let logical = [&y, &g.dx, &g.dw].map(|t| widen(&t.to_logical()));
    (logical, g.dw)
}

#[test]
fn transposed_half_storage_is_coherent_with_single_precision() {
    let mut r = rng(6);
    for c in &cases(60, 7) {
        let s = c.spec;
        let dy = uniform(&mut r, s.c_out * s.h_out() * s.w_out());
        let (f16, f32) = (ElemType::F16, ElemType::F32);
        let mut half = LayerState::new(Op::Conv2d, s, Layout::Hwc, f16, &weights(&s, Layout::Hwc, f16, &c.w)).unwrap();
        assert!(half.weights().is_transposed());
        let x = activation(s.c_in, s.h_in, s.w_in, Layout::Hwc, f16, &c.x);
        let g = activation(s.c_out, s.h_out(), s.w_out(), Layout::Hwc, f16, &dy);
        let (got, dw) = step(&mut half, &x, &g);
        assert!(dw.is_transposed(), "gradient keeps the weights' storage");

        let plain_w = half.weights().with_weight_storage(Layout::Hwc, false).unwrap().convert(f32);
        let plain_dw = dw.with_weight_storage(Layout::Hwc, false).unwrap().convert(f32);
        let mut single = LayerState::new(Op::Conv2d, s, Layout::Hwc, f32, &plain_w).unwrap();
        let (want, _) = step(&mut single, &x.convert(f32), &g.convert(f32));
        for i in 0..3 {
            assert!(norm_rel(&got[i], &want[i]) <= 1e-2, "{s:?} output {i}");
        }
        assert_eq!(widen(&plain_dw.to_logical()), got[2]);
    }
}

#[test]
fn every_variant_gives_the_same_training_step() {
    let mut r = rng(8);
    for c in &cases(40, 9) {
        let s = c.spec;
        let dy = uniform(&mut r, s.c_out * s.h_out() * s.w_out());
        for elem in ELEMS {
            for layout in LAYOUTS {
                let x = activation(s.c_in, s.h_in, s.w_in, layout, elem, &c.x);
                let g = activation(s.c_out, s.h_out(), s.w_out(), layout, elem, &dy);
                let w = weights(&s, layout, elem, &c.w);
                let mut reference = LayerState::new(Op::Conv2d, s, layout, elem, &w).unwrap();
                reference.set_variant(KernelVariant::NAIVE).unwrap();
                let (want, _) = step(&mut reference, &x, &g);
                for variant in KernelVariant::all(elem) {
                    let mut st =
                        LayerState::new(Op::Conv2d, s, layout, elem, &w).unwrap().with_variant(variant).unwrap();
                    let (got, _) = step(&mut st, &x, &g);
                    for i in 0..3 {
                        let ok = match elem {
                            ElemType::F32 => max_abs_diff(&got[i], &want[i]) <= 1e-5,
                            ElemType::F16 => norm_rel(&got[i], &want[i]) <= 1e-2,
                        };
                        assert!(ok, "{layout} {elem} {variant} {s:?} output {i}");
                    }
                }
            }
        }
    }
}
