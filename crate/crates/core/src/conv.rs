//! Conv2D, PointWise and Fully-Connected training primitives.
//!
//! Each step is one matrix multiplication over transformed operands. `MM`
//! consumes the weights as `K x C_O` in HWC and `C_O x K` in CHW; `MM_T`
//! always consumes `C_O x K`. The canonical pairings (FP32 with `MM` and
//! plain weights, FP16 with `MM_T` and transposed HWC weights) need no
//! runtime transpose of the weights:
//!
//! | step  | HWC, `MM`               | HWC, `MM_T`                    | CHW, `MM`                 | CHW, `MM_T`                |
//! |-------|-------------------------|--------------------------------|---------------------------|----------------------------|
//! | FW    | `mm(Im2Row(X), W)`      | `mm_t(Im2Row(X), W^T)`         | `mm(W, Im2Col(X))`        | `mm_t(W, Im2Row(X))`       |
//! | BW-IG | `mm(Im2Row(dY), BT(W))` | `mm_t(Im2Row(dY), BT(W^T))`    | `mm(BT(W), Im2Col(dY))`   | `mm_t(BT(W), Im2Row(dY))`  |
//! | BW-WG | `mm(Im2Col(X), dY)`     | `mm_t(Tr(dY), Im2Col(X))`      | `mm(dY, Im2Row(X))`       | `mm_t(dY, Im2Col(X))`      |
//!
//! BW-IG windows run over the output gradient with a `k - 1 - pad` border,
//! so the input gradient comes out at the input's spatial size. PointWise
//! and Fully-Connected layers skip the window transforms: Im2Row and Im2Col
//! collapse to the activation matrix or its plain transpose.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::elem::{Elem, ElemType};
use crate::error::{Error, Result};
use crate::exec::ExecConfig;
use crate::geometry::{ConvSpec, WindowGeom};
use crate::kernels::{matmul_into, Form, KernelVariant, Unroll, VectorMode};
use crate::mat::{transpose, Mat, MatRef};
use crate::profile::Phase;
use crate::tensor::{Dims, Layout, Stored, Tensor};
use crate::transforms::{block_transpose, im2col_into, im2row_into};
use crate::with_elem;

/// Layer operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Conv2d,
    Pointwise,
    Fc,
}

impl Op {
    /// Checks that `spec` is a geometry this operator accepts.
    pub fn check_spec(self, spec: &ConvSpec) -> Result<()> {
        spec.validate()?;
        let pointwise = spec.is_pointwise() && spec.pad == 0;
        match self {
            Op::Conv2d => Ok(()),
            Op::Pointwise if pointwise => Ok(()),
            Op::Fc if pointwise && spec.h_in == 1 && spec.w_in == 1 => Ok(()),
            Op::Pointwise => Err(Error::Geometry("pointwise layers need a 1x1 filter without padding".into())),
            Op::Fc => Err(Error::Geometry("fully-connected layers need a 1x1x1 geometry".into())),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Op::Conv2d => "conv2d",
            Op::Pointwise => "pointwise",
            Op::Fc => "fc",
        })
    }
}

impl FromStr for Op {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv2d" | "conv" => Ok(Op::Conv2d),
            "pointwise" | "pw" => Ok(Op::Pointwise),
            "fc" | "linear" => Ok(Op::Fc),
            other => Err(Error::Parse(format!("unknown layer op `{other}`"))),
        }
    }
}

/// Training step of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Step {
    #[serde(rename = "fw")]
    Fw,
    #[serde(rename = "bw-ig")]
    BwIg,
    #[serde(rename = "bw-wg")]
    BwWg,
}

impl Step {
    pub const ALL: [Step; 3] = [Step::Fw, Step::BwIg, Step::BwWg];
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Step::Fw => "fw",
            Step::BwIg => "bw-ig",
            Step::BwWg => "bw-wg",
        })
    }
}

impl FromStr for Step {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fw" | "forward" => Ok(Step::Fw),
            "bw-ig" | "ig" => Ok(Step::BwIg),
            "bw-wg" | "wg" => Ok(Step::BwWg),
            other => Err(Error::Parse(format!("unknown step `{other}`"))),
        }
    }
}

/// Gradients of one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub dw: Tensor,
    pub dx: Tensor,
}

/// A layer's weights, configuration and the input saved by its last forward.
#[derive(Clone, Debug)]
pub struct LayerState {
    op: Op,
    spec: ConvSpec,
    layout: Layout,
    elem: ElemType,
    variant: KernelVariant,
    weights: Tensor,
    saved_input: Option<Tensor>,
}

impl LayerState {
    /// Weights are converted to `elem` and to the canonical storage of
    /// `layout` (transposed for 16-bit HWC).
    pub fn new(op: Op, spec: ConvSpec, layout: Layout, elem: ElemType, weights: &Tensor) -> Result<Self> {
        op.check_spec(&spec)?;
        let want = Dims::weight(spec.c_out, spec.c_in, spec.k_h, spec.k_w);
        if weights.dims() != want {
            return Err(Error::Shape(format!("weights {:?} do not match {want:?}", weights.dims())));
        }
        let weights = weights.convert(elem).with_weight_storage(layout, Self::canonical_transposed(layout, elem))?;
        Ok(Self { op, spec, layout, elem, variant: Self::default_variant(op, elem), weights, saved_input: None })
    }

    /// Whether `(layout, elem)` keeps its weights in the transposed storage.
    pub fn canonical_transposed(layout: Layout, elem: ElemType) -> bool {
        layout == Layout::Hwc && elem == ElemType::F16
    }

    pub fn default_variant(op: Op, elem: ElemType) -> KernelVariant {
        match (op, elem) {
            (Op::Fc, ElemType::F32) => KernelVariant::NAIVE,
            (Op::Fc, ElemType::F16) => KernelVariant::mm_t(Unroll::U1x1),
            (_, ElemType::F32) => KernelVariant::mm(Unroll::U2x4),
            (_, ElemType::F16) => KernelVariant::lanes2(Unroll::U1x2),
        }
    }

    pub fn with_variant(mut self, variant: KernelVariant) -> Result<Self> {
        self.set_variant(variant)?;
        Ok(self)
    }

    pub fn set_variant(&mut self, variant: KernelVariant) -> Result<()> {
        variant.validate(self.elem)?;
        if self.op == Op::Fc && variant.vector != VectorMode::Scalar {
            return Err(Error::Variant("fully-connected layers run scalar kernels".into()));
        }
        self.variant = variant;
        Ok(())
    }

    /// Switches between the plain and transposed HWC weight storage.
    pub fn with_weight_storage(mut self, transposed: bool) -> Result<Self> {
        self.weights = self.weights.with_weight_storage(self.layout, transposed)?;
        Ok(self)
    }

    pub fn op(&self) -> Op {
        self.op
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn elem(&self) -> ElemType {
        self.elem
    }

    pub fn variant(&self) -> KernelVariant {
        self.variant
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Replaces the weights, converting to this layer's element type and storage.
    pub fn set_weights(&mut self, w: &Tensor) -> Result<()> {
        if w.dims() != self.weights.dims() {
            return Err(Error::Shape(format!("weights {:?} do not match {:?}", w.dims(), self.weights.dims())));
        }
        self.weights = w.convert(self.elem).with_weight_storage(self.layout, self.weights.is_transposed())?;
        Ok(())
    }

    pub fn saved_input(&self) -> Option<&Tensor> {
        self.saved_input.as_ref()
    }

    pub(crate) fn save_input(&mut self, x: &Tensor, cfg: &ExecConfig) {
        let old = self.saved_input.take();
        self.saved_input = Some(cfg.phase(Phase::Copy, || {
            drop(old);
            x.clone()
        }));
    }

    /// True when the window transforms reduce to reshapes.
    pub(crate) fn reshapes(&self) -> bool {
        self.op != Op::Conv2d
    }

    pub(crate) fn check_activation(&self, t: &Tensor, c: usize, h: usize, w: usize) -> Result<()> {
        let want = Dims::activation(c, h, w);
        if t.dims() != want {
            return Err(Error::Shape(format!("expected {want:?}, got {:?}", t.dims())));
        }
        if t.layout() != self.layout {
            return Err(Error::LayoutMismatch { expected: self.layout, got: t.layout() });
        }
        if t.elem() != self.elem {
            return Err(Error::ElemMismatch { expected: self.elem, got: t.elem() });
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        self.check_activation(x, self.spec.c_in, self.spec.h_in, self.spec.w_in)
    }

    pub(crate) fn check_output_grad(&self, dy: &Tensor) -> Result<()> {
        self.check_activation(dy, self.spec.c_out, self.spec.h_out(), self.spec.w_out())
    }

    /// FW: `Y = W * X`. Saves `X` for the weight gradient.
    pub fn forward(&mut self, x: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
        self.check_input(x)?;
        let g = self.spec.forward_window();
        let y =
            with_elem!(x.buffer(), T => forward_with::<T>(x, &self.weights, &g, self.reshapes(), self.variant, cfg))?;
        self.save_input(x, cfg);
        Ok(y)
    }

    /// BW-IG: `dX = pad(dY) * BT(W)`.
    pub fn backward_input(&self, dy: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
        if self.saved_input.is_none() {
            return Err(Error::NoForward);
        }
        self.check_output_grad(dy)?;
        let bt = cfg.phase(Phase::Transpose, || block_transpose(&self.weights))?;
        let g = self.spec.backward_input_window();
        with_elem!(dy.buffer(), T => forward_with::<T>(dy, &bt, &g, self.reshapes(), self.variant, cfg))
    }

    /// BW-WG: `dW = X * dY`, in the storage of `W`.
    pub fn backward_weight(&self, dy: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
        let x = self.saved_input.as_ref().ok_or(Error::NoForward)?;
        self.check_output_grad(dy)?;
        let g = self.spec.forward_window();
        let (reshape, variant, w) = (self.reshapes(), self.variant, &self.weights);
        with_elem!(dy.buffer(), T => {
            let mut out = vec![T::zero(); w.len()];
            weight_grad_into::<T>(x, dy, &g, reshape, variant, cfg, &mut out, false)?;
            finish_weight_grad(out, w.dims(), w.layout(), w.is_transposed(), variant.form, cfg)
        })
    }

    pub fn backward(&self, dy: &Tensor, cfg: &ExecConfig) -> Result<GradPair> {
        Ok(GradPair { dw: self.backward_weight(dy, cfg)?, dx: self.backward_input(dy, cfg)? })
    }

    /// `W <- W - lr * dW`, rounded to the weights' element type.
    pub fn sgd_update(&mut self, dw: &Tensor, lr: f32) -> Result<()> {
        let w = &mut self.weights;
        if dw.dims() != w.dims() {
            return Err(Error::Shape(format!("gradient {:?} does not match weights {:?}", dw.dims(), w.dims())));
        }
        if dw.is_transposed() != w.is_transposed() {
            return Err(Error::TransposeFlag { weights: w.is_transposed(), gradient: dw.is_transposed() });
        }
        if dw.layout() != w.layout() {
            return Err(Error::LayoutMismatch { expected: w.layout(), got: dw.layout() });
        }
        if dw.elem() != w.elem() {
            return Err(Error::ElemMismatch { expected: w.elem(), got: dw.elem() });
        }
        with_elem!(dw.buffer(), T => {
            let d = dw.data::<T>()?;
            for (x, g) in w.data_mut::<T>()?.iter_mut().zip(d) {
                *x = T::from_f32(x.to_f32() - lr * g.to_f32());
            }
        });
        Ok(())
    }
}

fn expect_op(st: &LayerState, op: Op) -> Result<()> {
    if st.op == op {
        Ok(())
    } else {
        Err(Error::Geometry(format!("{} primitive called on a {} layer", op, st.op)))
    }
}

pub fn conv2d_fw(st: &mut LayerState, x: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    expect_op(st, Op::Conv2d)?;
    st.forward(x, cfg)
}

pub fn conv2d_bw_ig(st: &LayerState, dy: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    expect_op(st, Op::Conv2d)?;
    st.backward_input(dy, cfg)
}

pub fn conv2d_bw_wg(st: &LayerState, dy: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    expect_op(st, Op::Conv2d)?;
    st.backward_weight(dy, cfg)
}

pub fn pointwise_fw(st: &mut LayerState, x: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    expect_op(st, Op::Pointwise)?;
    st.forward(x, cfg)
}

pub fn pointwise_bw_ig(st: &LayerState, dy: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    expect_op(st, Op::Pointwise)?;
    st.backward_input(dy, cfg)
}

pub fn pointwise_bw_wg(st: &LayerState, dy: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    expect_op(st, Op::Pointwise)?;
    st.backward_weight(dy, cfg)
}

pub fn fc_fw(st: &mut LayerState, x: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    expect_op(st, Op::Fc)?;
    st.forward(x, cfg)
}

pub fn fc_bw_ig(st: &LayerState, dy: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    expect_op(st, Op::Fc)?;
    st.backward_input(dy, cfg)
}

pub fn fc_bw_wg(st: &LayerState, dy: &Tensor, cfg: &ExecConfig) -> Result<Tensor> {
    expect_op(st, Op::Fc)?;
    st.backward_weight(dy, cfg)
}

pub fn sgd_update(st: &mut LayerState, dw: &Tensor, lr: f32) -> Result<()> {
    st.sgd_update(dw, lr)
}

enum Operand<'a, T> {
    View(MatRef<'a, T>),
    /// A matrix built by `phase`, which is also charged for freeing it.
    Owned(Mat<T>, Phase),
}

impl<T> Operand<'_, T> {
    fn view(&self) -> MatRef<'_, T> {
        match self {
            Operand::View(m) => *m,
            Operand::Owned(m, _) => m.view(),
        }
    }

    fn release(self, cfg: &ExecConfig) {
        if let Operand::Owned(m, phase) = self {
            cfg.phase(phase, || drop(m));
        }
    }
}

fn tr<T: Elem>(m: MatRef<'_, T>, cfg: &ExecConfig) -> Mat<T> {
    let out = cfg.phase(Phase::Transpose, || transpose(m, cfg));
    cfg.record_bytes(Phase::Transpose, out.as_slice().len() * T::BYTES);
    out
}

fn mm_into<T: Elem>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    variant: KernelVariant,
    cfg: &ExecConfig,
    out: &mut [T],
    accumulate: bool,
) -> Result<()> {
    cfg.phase(Phase::Mm, || matmul_into(a, b, variant, cfg, out, accumulate))
}

fn mm_new<T: Elem>(a: MatRef<'_, T>, b: MatRef<'_, T>, variant: KernelVariant, cfg: &ExecConfig) -> Result<Vec<T>> {
    let n = a.rows();
    let m = if variant.form == Form::Mm { b.cols() } else { b.rows() };
    cfg.phase(Phase::Mm, || {
        let mut out = vec![T::zero(); n * m];
        matmul_into(a, b, variant, cfg, &mut out, false)?;
        Ok(out)
    })
}

/// An activation seen through a convolution window.
struct Windowed<'a, T> {
    src: &'a [T],
    layout: Layout,
    g: WindowGeom,
    reshape: bool,
}

impl<'a, T: Stored> Windowed<'a, T> {
    fn new(t: &'a Tensor, g: &WindowGeom, reshape: bool) -> Result<Self> {
        let src = t.data::<T>()?;
        if src.len() != g.in_len() {
            return Err(Error::Shape(format!("activation of {} elements for a window over {}", src.len(), g.in_len())));
        }
        if reshape && !(g.k_h == 1 && g.k_w == 1 && g.is_unpadded()) {
            return Err(Error::Geometry("reshape lowering needs a 1x1 window without padding".into()));
        }
        Ok(Self { src, layout: t.layout(), g: *g, reshape })
    }

    fn source(&self) -> MatRef<'a, T> {
        let px = self.g.in_h * self.g.in_w;
        match self.layout {
            Layout::Chw => MatRef::new(self.g.channels, px, self.src),
            Layout::Hwc => MatRef::new(px, self.g.channels, self.src),
        }
        .expect("length checked")
    }

    /// `windows x window_len`.
    fn rows(&self, cfg: &ExecConfig) -> Operand<'a, T> {
        if self.reshape {
            return match self.layout {
                Layout::Hwc => Operand::View(self.source()),
                Layout::Chw => Operand::Owned(tr(self.source(), cfg), Phase::Transpose),
            };
        }
        let g = self.g;
        let m = cfg.phase(Phase::Im2Col, || {
            let mut m = Mat::zeros(g.windows(), g.window_len());
            im2row_into(self.src, self.layout, &g, m.as_mut_slice(), cfg);
            m
        });
        cfg.record_bytes(Phase::Im2Col, m.as_slice().len() * T::BYTES);
        Operand::Owned(m, Phase::Im2Col)
    }

    /// `window_len x windows`.
    fn cols(&self, cfg: &ExecConfig) -> Operand<'a, T> {
        if self.reshape {
            return match self.layout {
                Layout::Chw => Operand::View(self.source()),
                Layout::Hwc => Operand::Owned(tr(self.source(), cfg), Phase::Transpose),
            };
        }
        let g = self.g;
        let m = cfg.phase(Phase::Im2Col, || {
            let mut m = Mat::zeros(g.window_len(), g.windows());
            im2col_into(self.src, self.layout, &g, m.as_mut_slice(), cfg);
            m
        });
        cfg.record_bytes(Phase::Im2Col, m.as_slice().len() * T::BYTES);
        Operand::Owned(m, Phase::Im2Col)
    }
}

/// Weights as the second (HWC) or first (CHW) operand of `form`.
fn weight_operand<'a, T: Stored>(w: &'a Tensor, form: Form, cfg: &ExecConfig) -> Result<Operand<'a, T>> {
    let m = w.matrix::<T>()?;
    let want_k_by_co = w.layout() == Layout::Hwc && form == Form::Mm;
    let is_k_by_co = w.layout() == Layout::Hwc && !w.is_transposed();
    Ok(if want_k_by_co == is_k_by_co { Operand::View(m) } else { Operand::Owned(tr(m, cfg), Phase::Transpose) })
}

/// FW over window `g`; also BW-IG when given `dY`, `BT(W)` and the backward window.
pub(crate) fn forward_with<T: Stored>(
    x: &Tensor,
    w: &Tensor,
    g: &WindowGeom,
    reshape: bool,
    variant: KernelVariant,
    cfg: &ExecConfig,
) -> Result<Tensor> {
    let Dims::Weight { c_out, c_in, k_h, k_w } = w.dims() else {
        return Err(Error::TensorKind { expected: "weight", got: w.dims().kind() });
    };
    if (c_in, k_h, k_w) != (g.channels, g.k_h, g.k_w) {
        return Err(Error::Shape(format!("weights {:?} do not fit the window", w.dims())));
    }
    if w.layout() != x.layout() {
        return Err(Error::LayoutMismatch { expected: x.layout(), got: w.layout() });
    }
    let xin = Windowed::<T>::new(x, g, reshape)?;
    let wop = weight_operand::<T>(w, variant.form, cfg)?;
    let xop = match (x.layout(), variant.form) {
        (Layout::Chw, Form::Mm) => xin.cols(cfg),
        _ => xin.rows(cfg),
    };
    let y = match x.layout() {
        Layout::Hwc => mm_new(xop.view(), wop.view(), variant, cfg)?,
        Layout::Chw => mm_new(wop.view(), xop.view(), variant, cfg)?,
    };
    xop.release(cfg);
    wop.release(cfg);
    Tensor::from_vec(Dims::activation(c_out, g.out_h, g.out_w), x.layout(), false, y)
}

/// Whether the BW-WG product of `(layout, form)` comes out as `K x C_O`.
pub(crate) fn weight_grad_k_by_co(layout: Layout, form: Form) -> bool {
    layout == Layout::Hwc && form == Form::Mm
}

/// BW-WG product into `out`, in the arrangement given by [`weight_grad_k_by_co`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_grad_into<T: Stored>(
    x: &Tensor,
    dy: &Tensor,
    g: &WindowGeom,
    reshape: bool,
    variant: KernelVariant,
    cfg: &ExecConfig,
    out: &mut [T],
    accumulate: bool,
) -> Result<()> {
    if x.layout() != dy.layout() {
        return Err(Error::LayoutMismatch { expected: x.layout(), got: dy.layout() });
    }
    let xin = Windowed::<T>::new(x, g, reshape)?;
    let d = dy.matrix::<T>()?;
    let xop = match (x.layout(), variant.form) {
        (Layout::Chw, Form::Mm) => xin.rows(cfg),
        _ => xin.cols(cfg),
    };
    let r = match (x.layout(), variant.form) {
        (Layout::Hwc, Form::Mm) => mm_into(xop.view(), d, variant, cfg, out, accumulate),
        (Layout::Hwc, Form::MmT) => {
            let dt = Operand::Owned(tr(d, cfg), Phase::Transpose);
            let r = mm_into(dt.view(), xop.view(), variant, cfg, out, accumulate);
            dt.release(cfg);
            r
        }
        (Layout::Chw, _) => mm_into(d, xop.view(), variant, cfg, out, accumulate),
    };
    xop.release(cfg);
    r
}

/// Wraps a BW-WG product as a gradient with dims `dims` in the weight storage
/// `(layout, transposed)`.
pub(crate) fn finish_weight_grad<T: Stored>(
    data: Vec<T>,
    dims: Dims,
    layout: Layout,
    transposed: bool,
    form: Form,
    cfg: &ExecConfig,
) -> Result<Tensor> {
    let Dims::Weight { c_out, .. } = dims else {
        return Err(Error::TensorKind { expected: "weight", got: dims.kind() });
    };
    let k = data.len() / c_out;
    let produced = weight_grad_k_by_co(layout, form);
    let wanted = layout == Layout::Hwc && !transposed;
    let data = if produced == wanted {
        data
    } else {
        let (r, c) = if produced { (k, c_out) } else { (c_out, k) };
        tr(MatRef::new(r, c, &data)?, cfg).into_vec()
    };
    Tensor::from_vec(dims, layout, transposed, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(c: usize, h: usize, w: usize, layout: Layout, elem: ElemType, v: &[f32]) -> Tensor {
        Tensor::from_logical(Dims::activation(c, h, w), layout, elem, v).unwrap()
    }

    fn weights(co: usize, ci: usize, k: usize, v: &[f32]) -> Tensor {
        Tensor::weights_from_logical(Dims::weight(co, ci, k, k), Layout::Chw, false, ElemType::F32, v).unwrap()
    }

    fn combos() -> Vec<(Layout, ElemType)> {
        vec![
            (Layout::Chw, ElemType::F32),
            (Layout::Hwc, ElemType::F32),
            (Layout::Chw, ElemType::F16),
            (Layout::Hwc, ElemType::F16),
        ]
    }

    #[test]
    fn ones_filter_over_ones() {
        let spec = ConvSpec::new(1, 3, 3, 1, 2, 2, 0).unwrap();
        for (layout, elem) in combos() {
            let mut st = LayerState::new(Op::Conv2d, spec, layout, elem, &weights(1, 1, 2, &[1.0; 4])).unwrap();
            let y = conv2d_fw(&mut st, &act(1, 3, 3, layout, elem, &[1.0; 9]), &ExecConfig::default()).unwrap();
            assert_eq!(y.to_logical(), vec![4.0; 4]);
        }
    }

    #[test]
    fn unit_pointwise_filter_is_identity() {
        let spec = ConvSpec::pointwise(1, 2, 3, 1).unwrap();
        let v = [1., -2., 3., 0.5, 4., 6.];
        for (layout, elem) in combos() {
            let mut st = LayerState::new(Op::Pointwise, spec, layout, elem, &weights(1, 1, 1, &[1.0])).unwrap();
            let cfg = ExecConfig::default();
            let x = act(1, 2, 3, layout, elem, &v);
            assert_eq!(pointwise_fw(&mut st, &x, &cfg).unwrap(), x);
            let dx = pointwise_bw_ig(&st, &x, &cfg).unwrap();
            assert_eq!(dx, x);
        }
    }

    #[test]
    fn scalar_pointwise_gradients() {
        let spec = ConvSpec::pointwise(1, 1, 2, 1).unwrap();
        let cfg = ExecConfig::default();
        for (layout, elem) in combos() {
            let mut st = LayerState::new(Op::Pointwise, spec, layout, elem, &weights(1, 1, 1, &[3.0])).unwrap();
            st.forward(&act(1, 1, 2, layout, elem, &[2.0, 5.0]), &cfg).unwrap();
            let dy = act(1, 1, 2, layout, elem, &[1.0, -1.0]);
            let g = st.backward(&dy, &cfg).unwrap();
            assert_eq!(g.dx.to_logical(), vec![3.0, -3.0]);
            assert_eq!(g.dw.to_logical(), vec![2.0 - 5.0]);
            assert_eq!(g.dw.is_transposed(), st.weights().is_transposed());
        }
    }

    #[test]
    fn fully_connected_by_hand() {
        let spec = ConvSpec::pointwise(2, 1, 1, 3).unwrap();
        let w = weights(3, 2, 1, &[1., 0., 0., 1., 1., 1.]);
        let cfg = ExecConfig::default();
        for (layout, elem) in combos() {
            let mut st = LayerState::new(Op::Fc, spec, layout, elem, &w).unwrap();
            let y = fc_fw(&mut st, &act(2, 1, 1, layout, elem, &[1., 2.]), &cfg).unwrap();
            assert_eq!(y.to_logical(), vec![1., 2., 3.]);
            let dy = act(3, 1, 1, layout, elem, &[1., 2., -1.]);
            assert_eq!(fc_bw_wg(&st, &dy, &cfg).unwrap().to_logical(), vec![1., 2., 2., 4., -1., -2.]);
            assert_eq!(fc_bw_ig(&st, &dy, &cfg).unwrap().to_logical(), vec![0., 1.]);
            assert!(st.clone().with_variant(KernelVariant::lanes2(Unroll::U1x2)).is_err());
        }
    }

    #[test]
    fn zero_input_gives_zero_weight_gradient() {
        let spec = ConvSpec::new(2, 4, 4, 3, 3, 3, 1).unwrap();
        let w = weights(3, 2, 3, &[0.5; 54]);
        let cfg = ExecConfig::default();
        for (layout, elem) in combos() {
            let mut st = LayerState::new(Op::Conv2d, spec, layout, elem, &w).unwrap();
            st.forward(&act(2, 4, 4, layout, elem, &[0.0; 32]), &cfg).unwrap();
            let dw = st.backward_weight(&act(3, 4, 4, layout, elem, &[1.0; 48]), &cfg).unwrap();
            assert!(dw.to_logical().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let spec = ConvSpec::pointwise(1, 1, 1, 1).unwrap();
        let mut st = LayerState::new(Op::Fc, spec, Layout::Chw, ElemType::F32, &weights(1, 1, 1, &[1.0])).unwrap();
        let dw = weights(1, 1, 1, &[2.0]);
        sgd_update(&mut st, &dw, 0.0).unwrap();
        assert_eq!(st.weights().to_logical(), vec![1.0]);
        sgd_update(&mut st, &dw, 0.5).unwrap();
        assert_eq!(st.weights().to_logical(), vec![0.0]);
    }

    #[test]
    fn sgd_rejects_flag_mismatch() {
        let spec = ConvSpec::pointwise(2, 1, 1, 2).unwrap();
        let w = weights(2, 2, 1, &[1., 2., 3., 4.]);
        let mut st = LayerState::new(Op::Fc, spec, Layout::Hwc, ElemType::F16, &w).unwrap();
        assert!(st.weights().is_transposed());
        let plain = w.convert(ElemType::F16).with_weight_storage(Layout::Hwc, false).unwrap();
        assert!(matches!(st.sgd_update(&plain, 0.1), Err(Error::TransposeFlag { .. })));
    }

    #[test]
    fn misuse_is_reported() {
        let spec = ConvSpec::new(1, 3, 3, 1, 2, 2, 0).unwrap();
        let w = weights(1, 1, 2, &[1.0; 4]);
        let mut st = LayerState::new(Op::Conv2d, spec, Layout::Chw, ElemType::F32, &w).unwrap();
        let cfg = ExecConfig::default();
        let dy = act(1, 2, 2, Layout::Chw, ElemType::F32, &[1.0; 4]);
        assert!(matches!(st.backward_weight(&dy, &cfg), Err(Error::NoForward)));
        assert!(matches!(st.backward_input(&dy, &cfg), Err(Error::NoForward)));
        let x_hwc = act(1, 3, 3, Layout::Hwc, ElemType::F32, &[1.0; 9]);
        assert!(matches!(st.forward(&x_hwc, &cfg), Err(Error::LayoutMismatch { .. })));
        let x16 = act(1, 3, 3, Layout::Chw, ElemType::F16, &[1.0; 9]);
        assert!(matches!(st.forward(&x16, &cfg), Err(Error::ElemMismatch { .. })));
        assert!(pointwise_fw(&mut st, &act(1, 3, 3, Layout::Chw, ElemType::F32, &[1.0; 9]), &cfg).is_err());
        assert!(LayerState::new(Op::Pointwise, spec, Layout::Chw, ElemType::F32, &w).is_err());
    }

    #[test]
    fn op_and_step_parse() {
        for op in [Op::Conv2d, Op::Pointwise, Op::Fc] {
            assert_eq!(op.to_string().parse::<Op>().unwrap(), op);
        }
        for s in Step::ALL {
            assert_eq!(s.to_string().parse::<Step>().unwrap(), s);
        }
    }
}
