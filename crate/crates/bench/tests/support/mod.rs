//! The acceptance criteria as functions returning a [`Verdict`], shared by
//! the `acceptance` and `perf` test targets.
#![allow(dead_code)]

use std::fmt;
use std::time::{Duration, Instant};

use half::f16;
use odl_bench::{
    bench_layer, bench_layout, bench_mm, bench_model, table3, LayerBench, MmCase, ModelBench, ModelKind, ModelOptions,
    Timing,
};
use odl_kernels::kernels::matmul_counted;
use odl_kernels::{
    mm, mm_t, plan_tiles, run_tiled, transpose, ConvSpec, Elem, ElemType, ExecConfig, Form, KernelVariant, LayerState,
    Layout, Mat, Op, Phase, Step, Tensor, Unroll,
};
use rand::rngs::StdRng;
use rand::Rng;

use crate::common::*;

pub const LAYOUTS: [Layout; 2] = [Layout::Chw, Layout::Hwc];
pub const ELEMS: [ElemType; 2] = [ElemType::F32, ElemType::F16];
pub const L1_BYTES: usize = 64 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Debug)]
pub struct Verdict {
    pub id: &'static str,
    pub status: Status,
    pub detail: String,
    pub elapsed: Duration,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIPPED",
        };
        write!(f, "criterion {}: {s} [{:.1}s] {}", self.id, self.elapsed.as_secs_f64(), self.detail)
    }
}

/// Runs `f`, which returns `Ok(detail)` on success and `Err(detail)` on failure.
pub fn judge(id: &'static str, f: impl FnOnce() -> Result<String, String>) -> Verdict {
    let t = Instant::now();
    let r = f();
    let elapsed = t.elapsed();
    match r {
        Ok(detail) => Verdict { id, status: Status::Pass, detail, elapsed },
        Err(detail) => Verdict { id, status: Status::Fail, detail, elapsed },
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Case {
    spec: ConvSpec,
    x: Vec<f32>,
    w: Vec<f32>,
    dy: Vec<f32>,
}

fn case(r: &mut StdRng) -> Case {
    let spec = random_spec(r);
    Case {
        spec,
        x: uniform(r, spec.c_in * spec.h_in * spec.w_in),
        w: uniform(r, spec.weight_len()),
        dy: uniform(r, spec.c_out * spec.h_out() * spec.w_out()),
    }
}

fn within_elem_tol(elem: ElemType, got: &[f64], want: &[f64]) -> Result<f64, f64> {
    match elem {
        ElemType::F32 => {
            let d = max_abs_diff(got, want);
            if d <= 1e-5 {
                Ok(d)
            } else {
                Err(d)
            }
        }
        ElemType::F16 => {
            let d = norm_rel(got, want);
            if d <= 1e-2 {
                Ok(d)
            } else {
                Err(d)
            }
        }
    }
}

/// Every FW primitive against the direct convolution on random geometries.
pub fn oracle_equivalence(geometries: usize) -> Verdict {
    judge("1", || {
        let cfg = ExecConfig::default();
        let mut r = rng(101);
        let (mut runs, mut worst) = (0usize, [0.0f64; 2]);
        for _ in 0..geometries {
            let c = case(&mut r);
            let s = c.spec;
            for (e, elem) in ELEMS.into_iter().enumerate() {
                let want = conv_oracle(&s, &widen(&round_to(elem, &c.x)), &widen(&round_to(elem, &c.w)));
                for layout in LAYOUTS {
                    let x = activation(s.c_in, s.h_in, s.w_in, layout, elem, &c.x);
                    let mut ops = vec![Op::Conv2d];
                    if s.is_pointwise() && s.pad == 0 {
                        ops.push(Op::Pointwise);
                    }
                    for op in ops {
                        for variant in KernelVariant::all(elem) {
                            let w = weights(&s, layout, elem, &c.w);
                            let mut st = LayerState::new(op, s, layout, elem, &w)
                                .and_then(|st| st.with_variant(variant))
                                .map_err(|e| e.to_string())?;
                            let y = st.forward(&x, &cfg).map_err(|e| e.to_string())?;
                            let d = within_elem_tol(elem, &widen(&y.to_logical()), &want)
                                .map_err(|d| format!("{op} {layout} {elem} {variant} {s:?}: error {d:.3e}"))?;
                            worst[e] = worst[e].max(d);
                            runs += 1;
                        }
                    }
                }
            }
        }
        Ok(format!(
            "{geometries} geometries, {runs} primitive runs; worst F32 abs {:.2e} (tol 1e-5), F16 rel {:.2e} (tol 1e-2)",
            worst[0], worst[1]
        ))
    })
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
fn numeric_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    const EPS: f64 = 1e-3;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + EPS;
            let hi = f(&p);
            p[i] = x[i] - EPS;
            let lo = f(&p);
            p[i] = x[i];
            (hi - lo) / (2.0 * EPS)
        })
        .collect()
}

/// F32 BW-IG and BW-WG against central differences of `sum(dY * conv(X, W))`.
pub fn gradient_checks(geometries: usize) -> Verdict {
    judge("2", || {
        let cfg = ExecConfig::default();
        let mut r = rng(202);
        let variants = [KernelVariant::mm(Unroll::U2x4), KernelVariant::mm_t(Unroll::U2x2), KernelVariant::NAIVE];
        let (mut worst_w, mut worst_x): (f64, f64) = (0.0, 0.0);
        for i in 0..geometries {
            let c = case(&mut r);
            let s = c.spec;
            let (layout, variant) = (LAYOUTS[i % 2], variants[(i / 2) % variants.len()]);
            let elem = ElemType::F32;
            let mut st = LayerState::new(Op::Conv2d, s, layout, elem, &weights(&s, layout, elem, &c.w))
                .and_then(|st| st.with_variant(variant))
                .map_err(|e| e.to_string())?;
            st.forward(&activation(s.c_in, s.h_in, s.w_in, layout, elem, &c.x), &cfg).map_err(|e| e.to_string())?;
            let g = st
                .backward(&activation(s.c_out, s.h_out(), s.w_out(), layout, elem, &c.dy), &cfg)
                .map_err(|e| e.to_string())?;
            let (x, w, dy) = (widen(&c.x), widen(&c.w), widen(&c.dy));
            let num_w = numeric_gradient(&w, |p| dot(&conv_oracle(&s, &x, p), &dy));
            let num_x = numeric_gradient(&x, |p| dot(&conv_oracle(&s, p, &w), &dy));
            let ew = norm_rel(&widen(&g.dw.to_logical()), &num_w);
            let ex = norm_rel(&widen(&g.dx.to_logical()), &num_x);
            worst_w = worst_w.max(ew);
            worst_x = worst_x.max(ex);
            ensure(ew <= 1e-3 && ex <= 1e-3, || format!("{layout} {variant} {s:?}: dW {ew:.3e}, dX {ex:.3e}"))?;
        }
        Ok(format!("{geometries} geometries; worst relative error dW {worst_w:.2e}, dX {worst_x:.2e} (tol 1e-3)"))
    })
}

fn random_mat<T: Elem>(rows: usize, cols: usize, seed: u64) -> Mat<T> {
    let v = uniform(&mut rng(seed), rows * cols);
    Mat::from_vec(rows, cols, v.into_iter().map(T::from_f32).collect()).expect("shape matches")
}

/// Largest ratio of `|mm_t(A, Tr(B)) - mm(A, B)|` to `8 K eps sum|a b|` over all elements.
fn transpose_identity_ratio<T: Elem>(n: usize, k: usize, m: usize, seed: u64) -> Result<f64, String> {
    let cfg = ExecConfig::default();
    let a = random_mat::<T>(n, k, seed);
    let b = random_mat::<T>(k, m, seed ^ 0x5bd1);
    let bt = transpose(b.view(), &cfg);
    let eps = T::TYPE.epsilon();
    let mut bound = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mag: f64 = (0..k).map(|p| (a.get(i, p).to_f32() as f64 * b.get(p, j).to_f32() as f64).abs()).sum();
            bound[i * m + j] = 8.0 * k as f64 * eps * mag;
        }
    }
    let mut worst: f64 = 0.0;
    for u in Unroll::ALL {
        let want = mm(a.view(), b.view(), KernelVariant::mm(u), &cfg).map_err(|e| e.to_string())?;
        for v in KernelVariant::all(T::TYPE).into_iter().filter(|v| v.form == Form::MmT) {
            let got = mm_t(a.view(), bt.view(), v, &cfg).map_err(|e| e.to_string())?;
            for ((p, q), b) in got.as_slice().iter().zip(want.as_slice()).zip(&bound) {
                let d = (p.to_f32() as f64 - q.to_f32() as f64).abs();
                if d > *b {
                    return Err(format!("mm-{u} vs {v} at {n}x{k}x{m}: |{p:?} - {q:?}| over {b:e}"));
                }
                if *b > 0.0 {
                    worst = worst.max(d / b);
                }
            }
        }
    }
    Ok(worst)
}

/// `mm_t(A, Tr(B)) == mm(A, B)` within `8 K ulp` for random and leftover-triggering sizes.
pub fn transpose_identity(random_cases: usize) -> Verdict {
    judge("3", || {
        let mut r = rng(303);
        let mut sizes: Vec<(usize, usize, usize)> =
            vec![(1, 1, 1), (1, 64, 1), (64, 1, 64), (3, 5, 7), (63, 63, 63), (64, 64, 64), (5, 3, 9), (2, 4, 8)];
        sizes.extend((0..random_cases).map(|_| (r.gen_range(1..=64), r.gen_range(1..=64), r.gen_range(1..=64))));
        let mut worst: f64 = 0.0;
        for (i, &(n, k, m)) in sizes.iter().enumerate() {
            worst = worst.max(transpose_identity_ratio::<f32>(n, k, m, i as u64)?);
            worst = worst.max(transpose_identity_ratio::<f16>(n, k, m, i as u64)?);
        }
        Ok(format!("{} sizes x both elems x every MM_T variant; worst error at {:.3} of the bound", sizes.len(), worst))
    })
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.to_logical().iter().map(|v| v.to_bits()).collect()
}

/// Bit-identical kernels and training steps for 1, 2, 4 and 8 workers, with exact MAC counts.
pub fn parallel_determinism(matmul_cases: usize, layer_cases: usize) -> Verdict {
    judge("4", || {
        let pools: Vec<ExecConfig> = [1, 2, 4, 8].into_iter().map(ExecConfig::new).collect();
        let mut r = rng(404);
        let mut checked = 0usize;
        for i in 0..matmul_cases {
            let (n, k, m) = (r.gen_range(1..=48), r.gen_range(1..=48), r.gen_range(1..=48));
            for elem in ELEMS {
                for v in KernelVariant::all(elem) {
                    let (br, bc) = if v.form == Form::Mm { (k, m) } else { (m, k) };
                    let mut outs: Vec<Vec<u32>> = Vec::new();
                    for cfg in &pools {
                        let (out, macs) = match elem {
                            ElemType::F32 => {
                                let (a, b) =
                                    (random_mat::<f32>(n, k, i as u64), random_mat::<f32>(br, bc, !(i as u64)));
                                let (o, c) = matmul_counted(a.view(), b.view(), v, cfg).map_err(|e| e.to_string())?;
                                (o.as_slice().iter().map(|x| x.to_bits()).collect(), c.total.mac)
                            }
                            ElemType::F16 => {
                                let (a, b) =
                                    (random_mat::<f16>(n, k, i as u64), random_mat::<f16>(br, bc, !(i as u64)));
                                let (o, c) = matmul_counted(a.view(), b.view(), v, cfg).map_err(|e| e.to_string())?;
                                (o.as_slice().iter().map(|x| u32::from(x.to_bits())).collect(), c.total.mac)
                            }
                        };
                        ensure(macs == (n * k * m) as u64, || {
                            format!("{v} {n}x{k}x{m} workers={}: {macs} MACs", cfg.workers())
                        })?;
                        outs.push(out);
                    }
                    ensure(outs.iter().all(|o| *o == outs[0]), || {
                        format!("{v} {n}x{k}x{m}: outputs differ across workers")
                    })?;
                    checked += 1;
                }
            }
        }
        for _ in 0..layer_cases {
            let c = case(&mut r);
            let s = c.spec;
            for elem in ELEMS {
                for layout in LAYOUTS {
                    let mut outs = Vec::new();
                    for cfg in &pools {
                        let mut st = LayerState::new(Op::Conv2d, s, layout, elem, &weights(&s, layout, elem, &c.w))
                            .map_err(|e| e.to_string())?;
                        let y = st.forward(&activation(s.c_in, s.h_in, s.w_in, layout, elem, &c.x), cfg);
                        let y = y.map_err(|e| e.to_string())?;
                        let g = st
                            .backward(&activation(s.c_out, s.h_out(), s.w_out(), layout, elem, &c.dy), cfg)
                            .map_err(|e| e.to_string())?;
                        outs.push([bits(&y), bits(&g.dx), bits(&g.dw)]);
                    }
                    ensure(outs.iter().all(|o| *o == outs[0]), || {
                        format!("{layout} {elem} {s:?}: steps differ across workers")
                    })?;
                    checked += 1;
                }
            }
        }
        Ok(format!("{checked} kernel and layer configurations bit-identical across 1/2/4/8 workers; MAC counts exact"))
    })
}

/// Random tiled runs against the untiled primitive, bit-exact in F32.
pub fn tiled_equals_untiled(plans: usize) -> Verdict {
    judge("5", || {
        let cfg = ExecConfig::default();
        let mut r = rng(505);
        let (mut done, mut multi, mut worst_f16): (usize, usize, f64) = (0, 0, 0.0);
        let mut attempts = 0;
        while done < plans {
            attempts += 1;
            ensure(attempts < plans * 20, || format!("only {done} feasible plans found"))?;
            let conv = r.gen_bool(0.75);
            let s = if conv {
                let k = r.gen_range(1..=3);
                ConvSpec::new(
                    r.gen_range(1..=12),
                    r.gen_range(3..=16),
                    r.gen_range(3..=16),
                    r.gen_range(1..=12),
                    k,
                    k,
                    r.gen_range(0..=1),
                )
            } else {
                ConvSpec::pointwise(r.gen_range(1..=16), r.gen_range(1..=12), r.gen_range(1..=12), r.gen_range(1..=16))
            }
            .map_err(|e| e.to_string())?;
            let op = if conv { Op::Conv2d } else { Op::Pointwise };
            let layout = LAYOUTS[r.gen_range(0..2)];
            let elem = ELEMS[r.gen_range(0..2)];
            let variants = KernelVariant::all(elem);
            let variant = variants[r.gen_range(0..variants.len())];
            let w = weights(&s, layout, elem, &uniform(&mut r, s.weight_len()));
            let mut st = LayerState::new(op, s, layout, elem, &w)
                .and_then(|st| st.with_variant(variant))
                .map_err(|e| e.to_string())?;
            let x = activation(s.c_in, s.h_in, s.w_in, layout, elem, &uniform(&mut r, s.c_in * s.h_in * s.w_in));
            let dy = activation(
                s.c_out,
                s.h_out(),
                s.w_out(),
                layout,
                elem,
                &uniform(&mut r, s.c_out * s.h_out() * s.w_out()),
            );
            let y = st.forward(&x, &cfg).map_err(|e| e.to_string())?;
            let g = st.backward(&dy, &cfg).map_err(|e| e.to_string())?;
            let want = [y, g.dx, g.dw];
            for (i, step) in Step::ALL.into_iter().enumerate() {
                let whole = plan_tiles(&st, step, usize::MAX).map_err(|e| e.to_string())?.max_footprint();
                let l1_bytes = r.gen_range(whole / 10..=whole);
                let Ok(plan) = plan_tiles(&st, step, l1_bytes) else { continue };
                let input = if step == Step::Fw { &x } else { &dy };
                let run = run_tiled(&mut st, input, &plan, &cfg).map_err(|e| e.to_string())?;
                let ctx = || format!("{op} {s:?} {layout} {elem} {variant} {step} l1={l1_bytes} tiles={}", plan.len());
                ensure(run.peak <= l1_bytes, || format!("{}: peak {} B", ctx(), run.peak))?;
                match elem {
                    ElemType::F32 => ensure(run.output == want[i], || format!("{}: not bit-identical", ctx()))?,
                    ElemType::F16 => {
                        let d = norm_rel(&widen(&run.output.to_logical()), &widen(&want[i].to_logical()));
                        worst_f16 = worst_f16.max(d);
                        ensure(d <= 1e-2, || format!("{}: relative error {d:.3e}", ctx()))?;
                    }
                }
                done += 1;
                multi += usize::from(plan.len() > 1);
            }
        }
        Ok(format!(
            "{done} random plans ({multi} multi-tile); F32 bit-exact, worst F16 rel {worst_f16:.2e}; peak within budget"
        ))
    })
}

fn inner_mix<T: Elem>(v: KernelVariant, a: &Mat<T>, b: &Mat<T>) -> Result<((u64, u64), f64), String> {
    let (_, c) = matmul_counted(a.view(), b.view(), v, &ExecConfig::default()).map_err(|e| e.to_string())?;
    Ok((c.per_inner_iter().ok_or("no inner iterations")?, c.inner_utilization()))
}

/// Innermost-loop instruction mix read from the op counters.
pub fn instruction_arithmetic() -> Verdict {
    judge("6", || {
        let (a, b) = (random_mat::<f32>(8, 16, 1), random_mat::<f32>(16, 8, 2));
        let (naive, u_naive) = inner_mix(KernelVariant::NAIVE, &a, &b)?;
        let (unrolled, u_unrolled) = inner_mix(KernelVariant::mm(Unroll::U2x4), &a, &b)?;
        let (a16, bt16) = (random_mat::<f16>(8, 16, 3), random_mat::<f16>(8, 16, 4));
        let (lanes, u_lanes) = inner_mix(KernelVariant::lanes2(Unroll::U1x2), &a16, &bt16)?;
        ensure(naive == (1, 2) && u_naive == 1.0 / 3.0, || format!("naive mix {naive:?}, utilization {u_naive}"))?;
        ensure(unrolled == (8, 6) && u_unrolled == 8.0 / 14.0, || {
            format!("2x4 mix {unrolled:?}, utilization {u_unrolled}")
        })?;
        ensure(lanes == (4, 3), || format!("lanes2 1x2 mix {lanes:?}"))?;
        Ok(format!(
            "naive {}/{} ({:.0}%), 2x4 {}/{} ({:.0}%), lanes2 1x2 {}/{} ({:.0}%) MAC/loads",
            naive.0,
            naive.1,
            u_naive * 100.0,
            unrolled.0,
            unrolled.1,
            u_unrolled * 100.0,
            lanes.0,
            lanes.1,
            u_lanes * 100.0
        ))
    })
}

/// Performance trends: three sub-verdicts, (c) skipped without eight cores.
pub fn performance_trends(timing: Timing) -> Vec<Verdict> {
    let f32_2x4 = KernelVariant::mm(Unroll::U2x4);
    let mut out = Vec::new();
    out.push(judge("7a", || {
        let cases: Vec<MmCase> = [KernelVariant::NAIVE, f32_2x4]
            .into_iter()
            .map(|variant| MmCase { n: 128, k: 128, m: 128, elem: ElemType::F32, variant, workers: 1 })
            .collect();
        let res = bench_mm(&cases, timing, 7).map_err(|e| e.to_string())?;
        let s = res[1].speedup_vs_naive.ok_or("no naive baseline")?;
        let d = format!("F32 2x4 over naive at 128^3: {s:.2}x (threshold 1.5x)");
        ensure(s >= 1.5, || d.clone())?;
        Ok(d)
    }));
    out.push(judge("7b", || {
        let mut cases = Vec::new();
        for k in [256, 512] {
            cases.push(MmCase { n: 64, k, m: 64, elem: ElemType::F32, variant: f32_2x4, workers: 1 });
            for u in [Unroll::U1x2, Unroll::U2x2, Unroll::U2x4] {
                cases.push(MmCase { n: 64, k, m: 64, elem: ElemType::F16, variant: KernelVariant::lanes2(u), workers: 1 });
            }
        }
        let res = bench_mm(&cases, timing, 7).map_err(|e| e.to_string())?;
        let best = res
            .iter()
            .filter_map(|r| r.speedup_vs_f32_2x4.map(|s| (s, r.case)))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .ok_or("no F16 case")?;
        let d = format!(
            "best F16 lanes2 MM_T over F32 2x4: {:.2}x ({}, threshold 1.2x; 16-bit arithmetic is emulated in software here)",
            best.0,
            best.1.name()
        );
        ensure(best.0 >= 1.2, || d.clone())?;
        Ok(d)
    }));
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    if cores < 8 {
        out.push(Verdict {
            id: "7c",
            status: Status::Skipped,
            detail: format!("8-worker speedup needs 8 cores; this machine has {cores}"),
            elapsed: Duration::ZERO,
        });
    } else {
        out.push(judge("7c", || {
            let cases: Vec<MmCase> = [1, 8]
                .into_iter()
                .map(|workers| MmCase { n: 256, k: 256, m: 256, elem: ElemType::F32, variant: f32_2x4, workers })
                .collect();
            let res = bench_mm(&cases, timing, 7).map_err(|e| e.to_string())?;
            let s = res[1].speedup_vs_one_worker.ok_or("no 1-worker baseline")?;
            let d = format!("8 workers over 1 at 256^3: {s:.2}x (threshold 6x)");
            ensure(s >= 6.0, || d.clone())?;
            Ok(d)
        }));
    }
    out
}

/// Table 3 layers in HWC, gated and timed, for both element types.
pub fn table3_benches(timing: Timing) -> Result<Vec<LayerBench>, String> {
    let cfg = ExecConfig::default();
    let mut out = Vec::new();
    for elem in ELEMS {
        for c in table3(Layout::Hwc, elem) {
            out.push(bench_layer(&c, &cfg, L1_BYTES, timing, 0).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

/// Per-layer MM and transform shares of whole training steps.
pub fn breakdown_structure(benches: &[LayerBench]) -> Verdict {
    judge("8", || {
        let mut notes = Vec::new();
        let mut failures = Vec::new();
        for elem in ELEMS {
            let of = |name: &str| {
                benches
                    .iter()
                    .find(|b| b.config.elem == elem && b.config.name == name)
                    .expect("every Table 3 layer ran")
            };
            let mut shares = Vec::new();
            for name in ["CONV1", "CONV2", "CONV3"] {
                let mm = of(name).train.mm_share();
                shares.push(format!("{name} {:.0}%", mm * 100.0));
                if mm < 0.6 {
                    failures.push(format!("{elem} {name} MM share {:.1}% < 60%", mm * 100.0));
                }
            }
            let pw = of("PW CONV").train.time(Phase::Im2Col);
            if !pw.is_zero() {
                failures.push(format!("{elem} PW CONV transform time {pw:?}"));
            }
            let (t4, t1) = (of("CONV4").train.transform_share(), of("CONV1").train.transform_share());
            if t4 <= t1 {
                failures.push(format!("{elem} CONV4 transform share {:.1}% <= CONV1 {:.1}%", t4 * 100.0, t1 * 100.0));
            }
            notes.push(format!(
                "{elem}: MM {}; PW transform {}ns; transform CONV4 {:.0}% vs CONV1 {:.0}%",
                shares.join(", "),
                pw.as_nanos(),
                t4 * 100.0,
                t1 * 100.0
            ));
        }
        let d = notes.join(" | ");
        if failures.is_empty() {
            Ok(d)
        } else {
            Err(format!("{} | {d}", failures.join("; ")))
        }
    })
}

/// ResNet8 training step in HWC under the 64 KiB budget.
pub fn resnet8(elem: ElemType, timing: Timing) -> Result<ModelBench, String> {
    let opts = ModelOptions { l1_bytes: Some(L1_BYTES), ..ModelOptions::new(ModelKind::ResNet8, Layout::Hwc, elem) };
    // six losses bracket five SGD updates
    bench_model(&opts, &ExecConfig::default(), timing, 6).map_err(|e| e.to_string())
}

/// End-to-end: the budget and loss checks, and the MM share of the step.
/// Returns the hardware-independent and the timing verdicts separately.
pub fn end_to_end(runs: &[ModelBench]) -> (Verdict, Verdict) {
    let hard = judge("9", || {
        let mut notes = Vec::new();
        for m in runs {
            ensure(m.peak <= L1_BYTES, || format!("{} peak {} B over {L1_BYTES} B", m.elem, m.peak))?;
            notes.push(format!("{} peak {} B, tiled gate {:.1e}", m.elem, m.peak, m.gate_error));
        }
        let f32_run = runs.iter().find(|m| m.elem == ElemType::F32).ok_or("no F32 run")?;
        let losses: Vec<String> = f32_run.losses.iter().map(|l| format!("{l:.4}")).collect();
        ensure(f32_run.loss_decreases() && f32_run.losses.len() == 6, || format!("F32 losses {}", losses.join(" > ")))?;
        notes.push(format!("F32 loss {}", losses.join(" > ")));
        Ok(notes.join("; "))
    });
    let share = judge("9 (MM share)", || {
        let mut notes = Vec::new();
        let mut ok = true;
        for m in runs {
            let s = m.report.mm_share();
            notes.push(format!("{} MM share {:.1}% (coverage {:.1}%)", m.elem, s * 100.0, m.report.coverage() * 100.0));
            if m.elem == ElemType::F32 {
                ok &= (0.6..=0.85).contains(&s);
            }
        }
        let d = format!("{} [gated on F32; 16-bit arithmetic is emulated]", notes.join(", "));
        ensure(ok, || d.clone())?;
        Ok(d)
    });
    (hard, share)
}

/// Table 3 layers compared across layouts for both element types.
pub fn layout_benches(timing: Timing) -> Result<Vec<odl_bench::LayoutComparison>, String> {
    let cfg = ExecConfig::default();
    let mut out = Vec::new();
    for elem in ELEMS {
        for c in table3(Layout::Hwc, elem) {
            out.push(bench_layout(&c, &cfg, L1_BYTES, timing, 0).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

/// Layout agreement (hardware-independent) and the F16 CONV1 transform trend.
pub fn layout_equivalence(cmp: &[odl_bench::LayoutComparison]) -> (Verdict, Verdict) {
    let hard = judge("10", || {
        ensure(!cmp.is_empty(), || "no comparisons".into())?;
        let mut worst = [0.0f64; 2];
        for c in cmp {
            let (e, tol) = match c.hwc.config.elem {
                ElemType::F32 => (0, 1e-5),
                ElemType::F16 => (1, 1e-2),
            };
            for d in c.agreement {
                ensure(d <= tol, || format!("{} {}: HWC/CHW differ by {d:.3e}", c.hwc.config.name, c.hwc.config.elem))?;
                worst[e] = worst[e].max(d);
            }
        }
        Ok(format!(
            "{} layer x elem pairs agree on Y, dX and dW; worst normwise difference F32 {:.2e}, F16 {:.2e}",
            cmp.len(),
            worst[0],
            worst[1]
        ))
    });
    let trend = judge("10 (F16 transform trend)", || {
        let c = cmp
            .iter()
            .find(|c| c.hwc.config.name == "CONV1" && c.hwc.config.elem == ElemType::F16)
            .ok_or("no F16 CONV1 comparison")?;
        let (h, w) = (c.hwc.train.time(Phase::Im2Col), c.chw.train.time(Phase::Im2Col));
        let d = format!(
            "F16 CONV1 transform time HWC {:.1}us vs CHW {:.1}us ({:.0}% faster)",
            h.as_secs_f64() * 1e6,
            w.as_secs_f64() * 1e6,
            (1.0 - h.as_secs_f64() / w.as_secs_f64()) * 100.0
        );
        ensure(h < w, || d.clone())?;
        Ok(d)
    });
    (hard, trend)
}
