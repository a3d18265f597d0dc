//! Non-MM layers needed to run whole models: ReLU, pooling, residual add and
//! the direct depthwise convolution.
//!
//! These are plain loops. Values are computed in f32 and rounded once to the
//! tensor's element type.

use crate::elem::{Elem, ElemType};
use crate::error::{Error, Result};
use crate::exec::ExecConfig;
use crate::geometry::ConvSpec;
use crate::profile::Phase;
use crate::tensor::{Dims, Layout, Stored, Tensor};
use crate::with_elem;

/// Physical offsets of an activation's logical `(c, h, w)` indices.
#[derive(Clone, Copy, Debug)]
struct Index {
    layout: Layout,
    c: usize,
    h: usize,
    w: usize,
}

impl Index {
    fn of(t: &Tensor) -> Result<Self> {
        match t.dims() {
            Dims::Activation { c, h, w } => Ok(Self { layout: t.layout(), c, h, w }),
            d => Err(Error::TensorKind { expected: "activation", got: d.kind() }),
        }
    }

    #[inline]
    fn at(&self, c: usize, h: usize, w: usize) -> usize {
        match self.layout {
            Layout::Chw => (c * self.h + h) * self.w + w,
            Layout::Hwc => (h * self.w + w) * self.c + c,
        }
    }
}

fn same_kind(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.layout() != b.layout() {
        return Err(Error::LayoutMismatch { expected: a.layout(), got: b.layout() });
    }
    if a.elem() != b.elem() {
        return Err(Error::ElemMismatch { expected: a.elem(), got: b.elem() });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    same_kind(a, b)?;
    with_elem!(a.buffer(), T => {
        let (x, y) = (a.data::<T>()?, b.data::<T>()?);
        let out: Vec<T> = x.iter().zip(y).map(|(p, q)| T::from_f32(f(p.to_f32(), q.to_f32()))).collect();
        Tensor::from_vec(a.dims(), a.layout(), false, out)
    })
}

pub fn relu(x: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    cfg.phase(Phase::Elementwise, || zip_map(x, x, |v, _| v.max(0.0)))
}

/// Passes `dy` where the forward input was positive.
pub fn relu_backward(x: &Tensor, dy: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    cfg.phase(Phase::Elementwise, || zip_map(x, dy, |v, g| if v > 0.0 { g } else { 0.0 }))
}

pub fn add(a: &Tensor, b: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    cfg.phase(Phase::Elementwise, || zip_map(a, b, |p, q| p + q))
}

/// Builds an activation by evaluating `f(c, h, w)` in f32.
fn build(dims: Dims, layout: Layout, elem: ElemType, f: impl Fn(usize, usize, usize) -> f32) -> Result<Tensor> {
    let Dims::Activation { c, h, w } = dims else {
        return Err(Error::TensorKind { expected: "activation", got: dims.kind() });
    };
    let idx = Index { layout, c, h, w };
    let mut vals = vec![0.0f32; dims.len()];
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                vals[idx.at(ci, hi, wi)] = f(ci, hi, wi);
            }
        }
    }
    with_elem!(Tensor::zeros(dims, layout, elem).buffer(), T => {
        Tensor::from_vec(dims, layout, false, vals.iter().map(|&v| T::from_f32(v)).collect::<Vec<T>>())
    })
}

fn pool_dims(x: &Tensor, k: usize) -> Result<(Index, Dims)> {
    let idx = Index::of(x)?;
    if k == 0 || idx.h % k != 0 || idx.w % k != 0 {
        return Err(Error::Geometry(format!("{}x{} input is not divisible into {k}x{k} windows", idx.h, idx.w)));
    }
    Ok((idx, Dims::activation(idx.c, idx.h / k, idx.w / k)))
}

/// Non-overlapping `k x k` average pooling.
pub fn avg_pool(x: &Tensor, k: usize, cfg: &ExecConfig) -> Result<Tensor> {
    let (idx, dims) = pool_dims(x, k)?;
    let scale = 1.0 / (k * k) as f32;
    cfg.phase(Phase::Elementwise, || {
        build(dims, x.layout(), x.elem(), |c, h, w| {
            let mut s = 0.0;
            for i in 0..k {
                for j in 0..k {
                    s += x.buffer().get_f32(idx.at(c, h * k + i, w * k + j));
                }
            }
            s * scale
        })
    })
}

/// Spreads each output gradient evenly over its `k x k` window.
pub fn avg_pool_backward(dy: &Tensor, k: usize, cfg: &ExecConfig) -> Result<Tensor> {
    let idx = Index::of(dy)?;
    let scale = 1.0 / (k * k) as f32;
    let dims = Dims::activation(idx.c, idx.h * k, idx.w * k);
    cfg.phase(Phase::Elementwise, || {
        build(dims, dy.layout(), dy.elem(), |c, h, w| dy.buffer().get_f32(idx.at(c, h / k, w / k)) * scale)
    })
}

/// Non-overlapping `k x k` max pooling.
pub fn max_pool(x: &Tensor, k: usize, cfg: &ExecConfig) -> Result<Tensor> {
    let (idx, dims) = pool_dims(x, k)?;
    cfg.phase(Phase::Elementwise, || {
        build(dims, x.layout(), x.elem(), |c, h, w| {
            let mut m = f32::NEG_INFINITY;
            for i in 0..k {
                for j in 0..k {
                    m = m.max(x.buffer().get_f32(idx.at(c, h * k + i, w * k + j)));
                }
            }
            m
        })
    })
}

/// Routes each output gradient to the first maximum of its window.
pub fn max_pool_backward(x: &Tensor, dy: &Tensor, k: usize, cfg: &ExecConfig) -> Result<Tensor> {
    let (idx, dims) = pool_didx(x, dy, k)?;
    let didx = Index::of(dy)?;
    cfg.phase(Phase::Elementwise, || {
        build(dims, x.layout(), x.elem(), |c, h, w| {
            let (oh, ow) = (h / k, w / k);
            let mut best = (0, 0);
            let mut m = f32::NEG_INFINITY;
            for i in 0..k {
                for j in 0..k {
                    let v = x.buffer().get_f32(idx.at(c, oh * k + i, ow * k + j));
                    if v > m {
                        m = v;
                        best = (i, j);
                    }
                }
            }
            if (h - oh * k, w - ow * k) == best {
                dy.buffer().get_f32(didx.at(c, oh, ow))
            } else {
                0.0
            }
        })
    })
}

fn pool_didx(x: &Tensor, dy: &Tensor, k: usize) -> Result<(Index, Dims)> {
    let (idx, pooled) = pool_dims(x, k)?;
    if dy.dims() != pooled {
        return Err(Error::Shape(format!("gradient {:?} does not match pooled {pooled:?}", dy.dims())));
    }
    Ok((idx, x.dims()))
}

/// Mean over the spatial grid: `(C, H, W) -> (C, 1, 1)`.
pub fn global_avg_pool(x: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    let idx = Index::of(x)?;
    let scale = 1.0 / (idx.h * idx.w) as f32;
    cfg.phase(Phase::Elementwise, || {
        build(Dims::activation(idx.c, 1, 1), x.layout(), x.elem(), |c, _, _| {
            let mut s = 0.0;
            for h in 0..idx.h {
                for w in 0..idx.w {
                    s += x.buffer().get_f32(idx.at(c, h, w));
                }
            }
            s * scale
        })
    })
}

pub fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize, cfg: &ExecConfig) -> Result<Tensor> {
    let idx = Index::of(dy)?;
    if (idx.h, idx.w) != (1, 1) {
        return Err(Error::Shape(format!("expected a Cx1x1 gradient, got {:?}", dy.dims())));
    }
    let scale = 1.0 / (h * w) as f32;
    cfg.phase(Phase::Elementwise, || {
        build(Dims::activation(idx.c, h, w), dy.layout(), dy.elem(), |c, _, _| dy.buffer().get_f32(c) * scale)
    })
}

/// Per-channel `k_h x k_w` convolution, computed directly in either layout.
/// Weights are always stored `(C, 1, k_h, k_w)`.
#[derive(Clone, Debug)]
pub struct DepthwiseState {
    spec: ConvSpec,
    elem: ElemType,
    weights: Tensor,
    saved_input: Option<Tensor>,
}

impl DepthwiseState {
    /// `spec.c_in == spec.c_out`; `weights` has dims `(C, 1, k_h, k_w)`.
    pub fn new(spec: ConvSpec, elem: ElemType, weights: &Tensor) -> Result<Self> {
        spec.validate()?;
        if spec.c_in != spec.c_out {
            return Err(Error::Geometry("depthwise layers keep the channel count".into()));
        }
        let want = Dims::weight(spec.c_out, 1, spec.k_h, spec.k_w);
        if weights.dims() != want {
            return Err(Error::Shape(format!("weights {:?} do not match {want:?}", weights.dims())));
        }
        let weights = weights.convert(elem).with_weight_storage(Layout::Chw, false)?;
        Ok(Self { spec, elem, weights, saved_input: None })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    fn check(&self, t: &Tensor, h: usize, w: usize) -> Result<()> {
        if let Some(x) = &self.saved_input {
            if t.layout() != x.layout() {
                return Err(Error::LayoutMismatch { expected: x.layout(), got: t.layout() });
            }
        }
        if t.elem() != self.elem {
            return Err(Error::ElemMismatch { expected: self.elem, got: t.elem() });
        }
        let want = Dims::activation(self.spec.c_in, h, w);
        if t.dims() != want {
            return Err(Error::Shape(format!("expected {want:?}, got {:?}", t.dims())));
        }
        Ok(())
    }

    /// Taps as a `(k_h * k_w) x C` f32 table, channels innermost.
    fn taps_by_channel(&self) -> Vec<f32> {
        let (c, taps) = (self.spec.c_out, self.spec.k_h * self.spec.k_w);
        let w = self.weights.buffer();
        let mut t = vec![0f32; taps * c];
        for ch in 0..c {
            for k in 0..taps {
                t[k * c + ch] = w.get_f32(ch * taps + k);
            }
        }
        t
    }

    pub fn forward(&mut self, x: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
        let s = self.spec;
        self.saved_input = None;
        self.check(x, s.h_in, s.w_in)?;
        let y = cfg.phase(Phase::DepthWise, || {
            if x.layout() == Layout::Hwc {
                return self.forward_hwc(x, cfg);
            }
            with_elem!(x.buffer(), T => {
                let (xs, ws) = (x.data::<T>()?, self.weights.data::<T>()?);
                let plane = s.h_out() * s.w_out();
                let mut out = vec![T::zero(); s.c_out * plane];
                cfg.split_rows(&mut out, plane, s.c_out, |chans, chunk| {
                    for (c, dst) in chans.zip(chunk.chunks_exact_mut(plane)) {
                        depthwise_plane(&s, &xs[c * s.h_in * s.w_in..], &ws[c * s.k_h * s.k_w..], dst);
                    }
                });
                Tensor::from_vec(Dims::activation(s.c_out, s.h_out(), s.w_out()), Layout::Chw, false, out)
            })
        })?;
        self.saved_input = Some(cfg.phase(Phase::Copy, || x.clone()));
        Ok(y)
    }

    pub fn backward_input(&self, dy: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
        let s = self.spec;
        self.check(dy, s.h_out(), s.w_out())?;
        cfg.phase(Phase::DepthWise, || {
            if dy.layout() == Layout::Hwc {
                return self.backward_input_hwc(dy, cfg);
            }
            with_elem!(dy.buffer(), T => {
                let (ds, ws) = (dy.data::<T>()?, self.weights.data::<T>()?);
                let plane = s.h_in * s.w_in;
                let mut out = vec![T::zero(); s.c_in * plane];
                cfg.split_rows(&mut out, plane, s.c_in, |chans, chunk| {
                    let mut acc = vec![0f32; plane];
                    let (w_out, plane_out) = (s.w_out(), s.h_out() * s.w_out());
                    for (c, dst) in chans.zip(chunk.chunks_exact_mut(plane)) {
                        acc.fill(0.0);
                        let d = widen(&ds[c * plane_out..][..plane_out]);
                        let w = widen(&ws[c * s.k_h * s.k_w..][..s.k_h * s.k_w]);
                        for_each_run(&s, |oh, kh, kw, ih, ow, iw, n| {
                            let wv = w[kh * s.k_w + kw];
                            let src = &d[oh * w_out + ow..][..n];
                            for (a, &v) in acc[ih * s.w_in + iw..][..n].iter_mut().zip(src) {
                                *a += v * wv;
                            }
                        });
                        for (o, &a) in dst.iter_mut().zip(&acc) {
                            *o = T::from_f32(a);
                        }
                    }
                });
                Tensor::from_vec(Dims::activation(s.c_in, s.h_in, s.w_in), Layout::Chw, false, out)
            })
        })
    }

    pub fn backward_weight(&self, dy: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
        let x = self.saved_input.as_ref().ok_or(Error::NoForward)?;
        let s = self.spec;
        self.check(dy, s.h_out(), s.w_out())?;
        cfg.phase(Phase::DepthWise, || {
            if dy.layout() == Layout::Hwc {
                return self.backward_weight_hwc(x, dy);
            }
            with_elem!(dy.buffer(), T => {
                let (xs, ds) = (x.data::<T>()?, dy.data::<T>()?);
                let taps = s.k_h * s.k_w;
                let mut out = vec![T::zero(); s.c_out * taps];
                cfg.split_rows(&mut out, taps, s.c_out, |chans, chunk| {
                    let (w_out, plane_in, plane_out) = (s.w_out(), s.h_in * s.w_in, s.h_out() * s.w_out());
                    for (c, dst) in chans.zip(chunk.chunks_exact_mut(taps)) {
                        let mut acc = vec![0f32; taps];
                        let xp = widen(&xs[c * plane_in..][..plane_in]);
                        let d = widen(&ds[c * plane_out..][..plane_out]);
                        for_each_run(&s, |oh, kh, kw, ih, ow, iw, n| {
                            let src = &xp[ih * s.w_in + iw..][..n];
                            let dot: f32 = src.iter().zip(&d[oh * w_out + ow..][..n]).map(|(a, b)| a * b).sum();
                            acc[kh * s.k_w + kw] += dot;
                        });
                        for (o, &a) in dst.iter_mut().zip(&acc) {
                            *o = T::from_f32(a);
                        }
                    }
                });
                Tensor::from_vec(self.weights.dims(), Layout::Chw, false, out)
            })
        })
    }

    fn forward_hwc(&self, x: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
        let s = self.spec;
        let (c, w_out) = (s.c_in, s.w_out());
        let wt = self.taps_by_channel();
        with_elem!(x.buffer(), T => {
            let xs = widen(x.data::<T>()?);
            let row = w_out * c;
            let mut out = vec![T::zero(); s.h_out() * row];
            cfg.split_rows(&mut out, row, s.h_out(), |rows, chunk| {
                let mut acc = vec![0f32; row];
                for (oh, dst) in rows.zip(chunk.chunks_exact_mut(row)) {
                    acc.fill(0.0);
                    for_each_run_in_row(&s, oh, |kh, kw, ih, ow, iw, n| {
                        let w = &wt[(kh * s.k_w + kw) * c..][..c];
                        let src = &xs[(ih * s.w_in + iw) * c..][..n * c];
                        for (a, v) in acc[ow * c..][..n * c].chunks_exact_mut(c).zip(src.chunks_exact(c)) {
                            for ((a, &v), &w) in a.iter_mut().zip(v).zip(w) {
                                *a += v * w;
                            }
                        }
                    });
                    for (o, &a) in dst.iter_mut().zip(&acc) {
                        *o = T::from_f32(a);
                    }
                }
            });
            Tensor::from_vec(Dims::activation(c, s.h_out(), w_out), Layout::Hwc, false, out)
        })
    }

    fn backward_input_hwc(&self, dy: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
        let s = self.spec;
        let (c, w_out, h_out) = (s.c_in, s.w_out(), s.h_out());
        let wt = self.taps_by_channel();
        with_elem!(dy.buffer(), T => {
            let ds = widen(dy.data::<T>()?);
            let row = s.w_in * c;
            let mut out = vec![T::zero(); s.h_in * row];
            cfg.split_rows(&mut out, row, s.h_in, |rows, chunk| {
                let mut acc = vec![0f32; row];
                for (ih, dst) in rows.zip(chunk.chunks_exact_mut(row)) {
                    acc.fill(0.0);
                    // dx[ih, iw] gathers dy[ih + pad - kh, iw + pad - kw] * w[kh, kw].
                    for kh in 0..s.k_h {
                        let oh = (ih + s.pad) as isize - kh as isize;
                        if oh < 0 || oh as usize >= h_out {
                            continue;
                        }
                        for kw in 0..s.k_w {
                            let w = &wt[(kh * s.k_w + kw) * c..][..c];
                            let lo = (kw as isize - s.pad as isize).clamp(0, s.w_in as isize) as usize;
                            let hi = (w_out + kw).saturating_sub(s.pad).clamp(lo, s.w_in);
                            if lo == hi {
                                continue;
                            }
                            let ow = lo + s.pad - kw;
                            let src = &ds[(oh as usize * w_out + ow) * c..][..(hi - lo) * c];
                            for (a, v) in acc[lo * c..hi * c].chunks_exact_mut(c).zip(src.chunks_exact(c)) {
                                for ((a, &v), &w) in a.iter_mut().zip(v).zip(w) {
                                    *a += v * w;
                                }
                            }
                        }
                    }
                    for (o, &a) in dst.iter_mut().zip(&acc) {
                        *o = T::from_f32(a);
                    }
                }
            });
            Tensor::from_vec(Dims::activation(c, s.h_in, s.w_in), Layout::Hwc, false, out)
        })
    }

    fn backward_weight_hwc(&self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let s = self.spec;
        let (c, taps) = (s.c_in, s.k_h * s.k_w);
        with_elem!(dy.buffer(), T => {
            let (xs, ds) = (widen(x.data::<T>()?), widen(dy.data::<T>()?));
            // `(tap, c)` accumulators; a sequential sweep keeps the sum order fixed.
            let mut acc = vec![0f32; taps * c];
            for oh in 0..s.h_out() {
                for_each_run_in_row(&s, oh, |kh, kw, ih, ow, iw, n| {
                    let a = &mut acc[(kh * s.k_w + kw) * c..][..c];
                    let xr = &xs[(ih * s.w_in + iw) * c..][..n * c];
                    let dr = &ds[(oh * s.w_out() + ow) * c..][..n * c];
                    for (xv, dv) in xr.chunks_exact(c).zip(dr.chunks_exact(c)) {
                        for ((a, &xv), &dv) in a.iter_mut().zip(xv).zip(dv) {
                            *a += xv * dv;
                        }
                    }
                });
            }
            let mut out = vec![T::zero(); c * taps];
            for ch in 0..c {
                for k in 0..taps {
                    out[ch * taps + k] = T::from_f32(acc[k * c + ch]);
                }
            }
            Tensor::from_vec(self.weights.dims(), Layout::Chw, false, out)
        })
    }

    pub fn sgd_update(&mut self, dw: &Tensor, lr: f32) -> Result<()> {
        if dw.dims() != self.weights.dims() || dw.layout() != Layout::Chw || dw.elem() != self.elem {
            return Err(Error::Shape("gradient does not match depthwise weights".into()));
        }
        let w = &mut self.weights;
        with_elem!(dw.buffer(), T => {
            let d = dw.data::<T>()?;
            for (x, g) in w.data_mut::<T>()?.iter_mut().zip(d) {
                *x = T::from_f32(x.to_f32() - lr * g.to_f32());
            }
        });
        Ok(())
    }
}

/// Calls `f(oh, kh, kw, ih, ow, iw, n)` for every run of `n` consecutive
/// output columns `ow..ow+n` whose tap `(kh, kw)` reads input columns `iw..iw+n` of row `ih`.
#[inline]
fn for_each_run(s: &ConvSpec, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
    for oh in 0..s.h_out() {
        for_each_run_in_row(s, oh, |kh, kw, ih, ow, iw, n| f(oh, kh, kw, ih, ow, iw, n));
    }
}

/// [`for_each_run`] restricted to output row `oh`.
#[inline]
fn for_each_run_in_row(s: &ConvSpec, oh: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let (w_out, pad) = (s.w_out() as isize, s.pad as isize);
    for kh in 0..s.k_h {
        let ih = (oh + kh) as isize - pad;
        if ih < 0 || ih as usize >= s.h_in {
            continue;
        }
        for kw in 0..s.k_w {
            let lo = (pad - kw as isize).clamp(0, w_out);
            let hi = (s.w_in as isize + pad - kw as isize).clamp(lo, w_out);
            if lo < hi {
                let iw = (lo + kw as isize - pad) as usize;
                f(kh, kw, ih as usize, lo as usize, iw, (hi - lo) as usize);
            }
        }
    }
}

fn widen<T: Stored>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32()).collect()
}

fn depthwise_plane<T: Stored>(s: &ConvSpec, x: &[T], w: &[T], out: &mut [T]) {
    let (x, w) = (widen(&x[..s.h_in * s.w_in]), widen(&w[..s.k_h * s.k_w]));
    let mut acc = vec![0f32; out.len()];
    let w_out = s.w_out();
    for_each_run(s, |oh, kh, kw, ih, ow, iw, n| {
        let wv = w[kh * s.k_w + kw];
        let src = &x[ih * s.w_in + iw..][..n];
        for (a, &v) in acc[oh * w_out + ow..][..n].iter_mut().zip(src) {
            *a += v * wv;
        }
    });
    for (o, a) in out.iter_mut().zip(acc) {
        *o = T::from_f32(a);
    }
}
