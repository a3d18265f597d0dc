//! Activation and weight tensors with CHW/HWC layouts and FP32/FP16 storage.
//!
//! Logical indices are layout independent: activations are addressed as
//! `(c, h, w)` and weights as `(c_out, c_in, kh, kw)`. The physical order is:
//!
//! | tensor                 | physical order          | matrix form            |
//! |------------------------|-------------------------|------------------------|
//! | activation, CHW        | `(c, h, w)`             | `C x (H*W)`            |
//! | activation, HWC        | `(h, w, c)`             | `(H*W) x C`            |
//! | weight, CHW            | `(c_out, c_in, kh, kw)` | `C_O x (C_I*kh*kw)`    |
//! | weight, HWC            | `(kh, kw, c_in, c_out)` | `(kh*kw*C_I) x C_O`    |
//! | weight, HWC transposed | `(c_out, kh, kw, c_in)` | `C_O x (kh*kw*C_I)`    |
//!
//! The transposed HWC storage is what the MM_T based 16-bit primitives
//! consume directly as their second operand.

use std::fmt;
use std::ops::Range;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::elem::{half_flavor, Elem, ElemType, HalfFlavor};
use crate::error::{Error, Result};
use crate::mat::MatRef;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "chw")]
    Chw,
    #[serde(rename = "hwc")]
    Hwc,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Chw => "chw",
            Layout::Hwc => "hwc",
        })
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chw" => Ok(Layout::Chw),
            "hwc" => Ok(Layout::Hwc),
            other => Err(Error::Parse(format!("unknown layout `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dims {
    Activation { c: usize, h: usize, w: usize },
    Weight { c_out: usize, c_in: usize, k_h: usize, k_w: usize },
}

impl Dims {
    pub fn activation(c: usize, h: usize, w: usize) -> Self {
        Dims::Activation { c, h, w }
    }

    pub fn weight(c_out: usize, c_in: usize, k_h: usize, k_w: usize) -> Self {
        Dims::Weight { c_out, c_in, k_h, k_w }
    }

    pub fn len(&self) -> usize {
        self.as_array().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The four dims; activations report `[c, h, w, 1]`.
    pub fn as_array(&self) -> [usize; 4] {
        match *self {
            Dims::Activation { c, h, w } => [c, h, w, 1],
            Dims::Weight { c_out, c_in, k_h, k_w } => [c_out, c_in, k_h, k_w],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Dims::Activation { .. } => "activation",
            Dims::Weight { .. } => "weight",
        }
    }
}

/// Typed element storage.
#[derive(Clone, Debug, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    F16(Vec<f16>),
    Bf16(Vec<bf16>),
}

impl Buffer {
    pub fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F16(v) => v.len(),
            Buffer::Bf16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn elem(&self) -> ElemType {
        match self {
            Buffer::F32(_) => ElemType::F32,
            Buffer::F16(_) | Buffer::Bf16(_) => ElemType::F16,
        }
    }

    fn from_f32_iter(elem: ElemType, it: impl Iterator<Item = f32>) -> Self {
        match (elem, half_flavor()) {
            (ElemType::F32, _) => Buffer::F32(it.collect()),
            (ElemType::F16, HalfFlavor::Ieee) => Buffer::F16(it.map(f16::from_f32).collect()),
            (ElemType::F16, HalfFlavor::Bf16) => Buffer::Bf16(it.map(bf16::from_f32).collect()),
        }
    }

    /// Element `i` in physical order, widened to f32.
    pub fn get_f32(&self, i: usize) -> f32 {
        match self {
            Buffer::F32(v) => v[i],
            Buffer::F16(v) => v[i].to_f32(),
            Buffer::Bf16(v) => v[i].to_f32(),
        }
    }
}

/// Element types that can live in a [`Buffer`].
pub trait Stored: Elem {
    fn slice(buf: &Buffer) -> Option<&[Self]>;
    fn slice_mut(buf: &mut Buffer) -> Option<&mut [Self]>;
    fn into_buffer(v: Vec<Self>) -> Buffer;
}

impl Stored for f32 {
    fn slice(buf: &Buffer) -> Option<&[Self]> {
        match buf {
            Buffer::F32(v) => Some(v),
            _ => None,
        }
    }

    fn slice_mut(buf: &mut Buffer) -> Option<&mut [Self]> {
        match buf {
            Buffer::F32(v) => Some(v),
            _ => None,
        }
    }

    fn into_buffer(v: Vec<Self>) -> Buffer {
        Buffer::F32(v)
    }
}

impl Stored for f16 {
    fn slice(buf: &Buffer) -> Option<&[Self]> {
        match buf {
            Buffer::F16(v) => Some(v),
            _ => None,
        }
    }

    fn slice_mut(buf: &mut Buffer) -> Option<&mut [Self]> {
        match buf {
            Buffer::F16(v) => Some(v),
            _ => None,
        }
    }

    fn into_buffer(v: Vec<Self>) -> Buffer {
        Buffer::F16(v)
    }
}

impl Stored for bf16 {
    fn slice(buf: &Buffer) -> Option<&[Self]> {
        match buf {
            Buffer::Bf16(v) => Some(v),
            _ => None,
        }
    }

    fn slice_mut(buf: &mut Buffer) -> Option<&mut [Self]> {
        match buf {
            Buffer::Bf16(v) => Some(v),
            _ => None,
        }
    }

    fn into_buffer(v: Vec<Self>) -> Buffer {
        Buffer::Bf16(v)
    }
}

/// Runs `$body` with `$T` bound to the element type stored in `$buf`.
#[macro_export]
#[doc(hidden)]
macro_rules! with_elem {
    ($buf:expr, $T:ident => $body:expr) => {
        match $buf {
            $crate::tensor::Buffer::F32(_) => {
                type $T = f32;
                $body
            }
            $crate::tensor::Buffer::F16(_) => {
                type $T = ::half::f16;
                $body
            }
            $crate::tensor::Buffer::Bf16(_) => {
                type $T = ::half::bf16;
                $body
            }
        }
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Dims,
    layout: Layout,
    transposed: bool,
    data: Buffer,
}

impl Tensor {
    fn check(dims: Dims, layout: Layout, transposed: bool, len: usize) -> Result<()> {
        if dims.is_empty() {
            return Err(Error::Shape(format!("empty tensor {dims:?}")));
        }
        if len != dims.len() {
            return Err(Error::Shape(format!("{dims:?} needs {} elements, buffer has {len}", dims.len())));
        }
        if transposed && (layout != Layout::Hwc || !matches!(dims, Dims::Weight { .. })) {
            return Err(Error::Shape("only HWC weights have a transposed storage".into()));
        }
        Ok(())
    }

    /// Wraps a buffer already in physical order.
    pub fn from_buffer(dims: Dims, layout: Layout, transposed: bool, data: Buffer) -> Result<Self> {
        Self::check(dims, layout, transposed, data.len())?;
        Ok(Self { dims, layout, transposed, data })
    }

    pub fn from_vec<T: Stored>(dims: Dims, layout: Layout, transposed: bool, data: Vec<T>) -> Result<Self> {
        Self::from_buffer(dims, layout, transposed, T::into_buffer(data))
    }

    pub fn zeros(dims: Dims, layout: Layout, elem: ElemType) -> Self {
        Self::zeros_with(dims, layout, false, elem)
    }

    /// Zeros with the same dims, storage and element type.
    pub fn zeros_like(&self) -> Self {
        Self::zeros_with(self.dims, self.layout, self.transposed, self.elem())
    }

    fn zeros_with(dims: Dims, layout: Layout, transposed: bool, elem: ElemType) -> Self {
        let data = Buffer::from_f32_iter(elem, std::iter::repeat_n(0.0, dims.len()));
        Self { dims, layout, transposed, data }
    }

    /// Builds a tensor from values in logical order (`(c,h,w)` or
    /// `(c_out,c_in,kh,kw)` row-major), rounding to `elem`.
    pub fn from_logical(dims: Dims, layout: Layout, elem: ElemType, values: &[f32]) -> Result<Self> {
        Self::from_logical_with(dims, layout, false, elem, values)
    }

    /// Weight tensor from logical values with the given storage.
    pub fn weights_from_logical(
        dims: Dims,
        layout: Layout,
        transposed: bool,
        elem: ElemType,
        values: &[f32],
    ) -> Result<Self> {
        if !matches!(dims, Dims::Weight { .. }) {
            return Err(Error::TensorKind { expected: "weight", got: dims.kind() });
        }
        Self::from_logical_with(dims, layout, transposed, elem, values)
    }

    fn from_logical_with(dims: Dims, layout: Layout, transposed: bool, elem: ElemType, values: &[f32]) -> Result<Self> {
        Self::check(dims, layout, transposed, values.len())?;
        let perm = physical_to_logical(dims, layout, transposed);
        let data = Buffer::from_f32_iter(elem, perm.iter().map(|&l| values[l]));
        Ok(Self { dims, layout, transposed, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn elem(&self) -> ElemType {
        self.data.elem()
    }

    /// True for HWC weights kept in the transposed `(c_out, kh, kw, c_in)` storage.
    pub fn is_transposed(&self) -> bool {
        self.transposed
    }

    pub fn is_weight(&self) -> bool {
        matches!(self.dims, Dims::Weight { .. })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.len() * self.elem().bytes()
    }

    pub fn buffer(&self) -> &Buffer {
        &self.data
    }

    /// Typed physical data; errors if `T` is not the stored type.
    pub fn data<T: Stored>(&self) -> Result<&[T]> {
        T::slice(&self.data).ok_or(Error::ElemMismatch { expected: T::TYPE, got: self.elem() })
    }

    pub(crate) fn data_mut<T: Stored>(&mut self) -> Result<&mut [T]> {
        let got = self.elem();
        T::slice_mut(&mut self.data).ok_or(Error::ElemMismatch { expected: T::TYPE, got })
    }

    /// Physical offset of a logical index.
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        physical_offset(self.dims, self.layout, self.transposed, idx)
    }

    /// Element at a logical index (`[c, h, w, 0]` for activations).
    pub fn get(&self, idx: [usize; 4]) -> f32 {
        self.data.get_f32(self.offset(idx))
    }

    /// All elements as f32 in logical order.
    pub fn to_logical(&self) -> Vec<f32> {
        let perm = physical_to_logical(self.dims, self.layout, self.transposed);
        let mut out = vec![0.0; self.len()];
        for (p, &l) in perm.iter().enumerate() {
            out[l] = self.data.get_f32(p);
        }
        out
    }

    /// Rounds every element to `to` (round-to-nearest-even for 16-bit).
    pub fn convert(&self, to: ElemType) -> Tensor {
        if to == self.elem() {
            return self.clone();
        }
        let data = Buffer::from_f32_iter(to, (0..self.len()).map(|i| self.data.get_f32(i)));
        Tensor { data, ..*self }
    }

    /// Same logical activation in another layout.
    pub fn relayout(&self, to: Layout) -> Result<Tensor> {
        if !matches!(self.dims, Dims::Activation { .. }) {
            return Err(Error::TensorKind { expected: "activation", got: self.dims.kind() });
        }
        Ok(self.restore(to, false))
    }

    /// Same logical weights in another storage (layout and transposed flag).
    pub fn with_weight_storage(&self, layout: Layout, transposed: bool) -> Result<Tensor> {
        if !self.is_weight() {
            return Err(Error::TensorKind { expected: "weight", got: self.dims.kind() });
        }
        if transposed && layout != Layout::Hwc {
            return Err(Error::Shape("only HWC weights have a transposed storage".into()));
        }
        Ok(self.restore(layout, transposed))
    }

    fn restore(&self, layout: Layout, transposed: bool) -> Tensor {
        if layout == self.layout && transposed == self.transposed {
            return self.clone();
        }
        let (ss, ds) = (self.strides(), physical_strides(self.dims, layout, transposed));
        let extent = self.dims.as_array();
        let data = with_elem!(&self.data, T => {
            let s = T::slice(&self.data).expect("matching buffer");
            let mut d = vec![T::zero(); s.len()];
            copy_box(s, 0, ss.map(|v| v as isize), &mut d, 0, ds, extent);
            T::into_buffer(d)
        });
        Tensor { dims: self.dims, layout, transposed, data }
    }

    /// Matrix form of the tensor (see the module table).
    pub fn matrix<T: Stored>(&self) -> Result<MatRef<'_, T>> {
        let (rows, cols) = self.matrix_shape();
        MatRef::new(rows, cols, self.data::<T>()?)
    }

    /// Copies channels `c` and rows `h` of an activation into a new tensor.
    pub fn slice_activation(&self, c: Range<usize>, h: Range<usize>) -> Result<Tensor> {
        let Dims::Activation { c: cn, h: hn, w } = self.dims else {
            return Err(Error::TensorKind { expected: "activation", got: self.dims.kind() });
        };
        if c.is_empty() || h.is_empty() || c.end > cn || h.end > hn {
            return Err(Error::Shape(format!("region {c:?} x {h:?} outside {cn}x{hn}x{w}")));
        }
        let dims = Dims::activation(c.len(), h.len(), w);
        let mut out = Tensor::zeros(dims, self.layout, self.elem());
        out.write_activation(self, 0, 0, (c, h))?;
        Ok(out)
    }

    /// Copies the `region` (channels, rows) of `src` into this activation
    /// starting at channel `c0` and row `h0`.
    pub fn write_activation(
        &mut self,
        src: &Tensor,
        c0: usize,
        h0: usize,
        region: (Range<usize>, Range<usize>),
    ) -> Result<()> {
        let (Dims::Activation { c: sc, h: sh, w: sw }, Dims::Activation { c: dc, h: dh, w: dw }) =
            (src.dims, self.dims)
        else {
            return Err(Error::TensorKind { expected: "activation", got: "weight" });
        };
        let (cr, hr) = region;
        if sw != dw || cr.end > sc || hr.end > sh || c0 + cr.len() > dc || h0 + hr.len() > dh {
            return Err(Error::Shape("activation region out of bounds".into()));
        }
        if src.layout != self.layout {
            return Err(Error::LayoutMismatch { expected: self.layout, got: src.layout });
        }
        let layout = self.layout;
        with_elem!(&src.data, T => {
            let s = src.data::<T>()?;
            let d = self.data_mut::<T>()?;
            match layout {
                Layout::Chw => {
                    for (i, c) in cr.clone().enumerate() {
                        for (j, h) in hr.clone().enumerate() {
                            let so = (c * sh + h) * sw;
                            let dof = ((c0 + i) * dh + h0 + j) * dw;
                            d[dof..dof + dw].copy_from_slice(&s[so..so + sw]);
                        }
                    }
                }
                Layout::Hwc => {
                    let n = cr.len();
                    for (j, h) in hr.clone().enumerate() {
                        for w in 0..sw {
                            let so = (h * sw + w) * sc + cr.start;
                            let dof = ((h0 + j) * dw + w) * dc + c0;
                            d[dof..dof + n].copy_from_slice(&s[so..so + n]);
                        }
                    }
                }
            }
        });
        Ok(())
    }

    /// Copies output channels `co` and input channels `ci` of a weight
    /// tensor, keeping its storage.
    pub fn slice_weights(&self, co: Range<usize>, ci: Range<usize>) -> Result<Tensor> {
        let Dims::Weight { c_out, c_in, k_h, k_w } = self.dims else {
            return Err(Error::TensorKind { expected: "weight", got: self.dims.kind() });
        };
        if co.is_empty() || ci.is_empty() || co.end > c_out || ci.end > c_in {
            return Err(Error::Shape(format!("region {co:?} x {ci:?} outside {c_out}x{c_in}")));
        }
        let dims = Dims::weight(co.len(), ci.len(), k_h, k_w);
        let mut out = Tensor::zeros_with(dims, self.layout, self.transposed, self.elem());
        out.write_weights(self, 0, 0, (co, ci))?;
        Ok(out)
    }

    /// Copies the `region` (output channels, input channels) of `src` into
    /// these weights starting at `(co0, ci0)`.
    pub fn write_weights(
        &mut self,
        src: &Tensor,
        co0: usize,
        ci0: usize,
        region: (Range<usize>, Range<usize>),
    ) -> Result<()> {
        let (Dims::Weight { k_h, k_w, .. }, Dims::Weight { c_out, c_in, k_h: dkh, k_w: dkw }) = (src.dims, self.dims)
        else {
            return Err(Error::TensorKind { expected: "weight", got: "activation" });
        };
        let Dims::Weight { c_out: sco, c_in: sci, .. } = src.dims else { unreachable!() };
        let (cor, cir) = region;
        if (k_h, k_w) != (dkh, dkw)
            || cor.end > sco
            || cir.end > sci
            || co0 + cor.len() > c_out
            || ci0 + cir.len() > c_in
        {
            return Err(Error::Shape("weight region out of bounds".into()));
        }
        if (src.layout, src.transposed) != (self.layout, self.transposed) {
            return Err(Error::LayoutMismatch { expected: self.layout, got: src.layout });
        }
        let (ss, ds) = (src.strides(), self.strides());
        let s0 = cor.start * ss[0] + cir.start * ss[1];
        let d0 = co0 * ds[0] + ci0 * ds[1];
        let extent = [cor.len(), cir.len(), k_h, k_w];
        with_elem!(&src.data, T => {
            let s = src.data::<T>()?;
            let d = self.data_mut::<T>()?;
            copy_box(s, s0, ss.map(|v| v as isize), d, d0, ds, extent);
        });
        Ok(())
    }

    /// Physical stride of each logical axis (`[c, h, w, -]` or `[c_out, c_in, k_h, k_w]`).
    pub(crate) fn strides(&self) -> [usize; 4] {
        physical_strides(self.dims, self.layout, self.transposed)
    }

    pub fn matrix_shape(&self) -> (usize, usize) {
        match (self.dims, self.layout, self.transposed) {
            (Dims::Activation { c, h, w }, Layout::Chw, _) => (c, h * w),
            (Dims::Activation { c, h, w }, Layout::Hwc, _) => (h * w, c),
            (Dims::Weight { c_out, c_in, k_h, k_w }, Layout::Hwc, false) => (k_h * k_w * c_in, c_out),
            (Dims::Weight { c_out, c_in, k_h, k_w }, _, _) => (c_out, c_in * k_h * k_w),
        }
    }
}

pub(crate) fn physical_strides(dims: Dims, layout: Layout, transposed: bool) -> [usize; 4] {
    match dims {
        Dims::Activation { c, h, w } => match layout {
            Layout::Chw => [h * w, w, 1, 0],
            Layout::Hwc => [1, w * c, c, 0],
        },
        Dims::Weight { c_out: on, c_in: inn, k_h: khn, k_w: kwn } => match (layout, transposed) {
            (Layout::Chw, _) => [inn * khn * kwn, khn * kwn, kwn, 1],
            (Layout::Hwc, false) => [1, on, kwn * inn * on, inn * on],
            (Layout::Hwc, true) => [khn * kwn * inn, 1, kwn * inn, inn],
        },
    }
}

/// Copies the box `extent` of logical indices:
/// `dst[d0 + sum(i[a] * ds[a])] = src[s0 + sum(i[a] * ss[a])]`.
/// Loops follow the destination's physical order; runs contiguous on both
/// sides are copied as slices.
pub(crate) fn copy_box<T: Copy>(
    src: &[T],
    s0: usize,
    ss: [isize; 4],
    dst: &mut [T],
    d0: usize,
    ds: [usize; 4],
    extent: [usize; 4],
) {
    if extent.contains(&0) {
        return;
    }
    let mut order = [0usize, 1, 2, 3];
    // trivial axes outermost, then by decreasing destination stride
    order.sort_by_key(|&a| (extent[a] > 1, std::cmp::Reverse(ds[a])));
    let [a0, a1, a2, a3] = order;
    let n = extent[a3];
    let contiguous = ds[a3] == 1 && ss[a3] == 1;
    if ds[a3] == 1 && ss[a2] == 1 && ss[a3] != 1 {
        transpose_box(src, s0, ss, dst, d0, ds, extent, order);
        return;
    }
    for i0 in 0..extent[a0] {
        for i1 in 0..extent[a1] {
            for i2 in 0..extent[a2] {
                let so = s0 as isize + i0 as isize * ss[a0] + i1 as isize * ss[a1] + i2 as isize * ss[a2];
                let dof = d0 + i0 * ds[a0] + i1 * ds[a1] + i2 * ds[a2];
                if contiguous {
                    let so = so as usize;
                    dst[dof..dof + n].copy_from_slice(&src[so..so + n]);
                } else {
                    for i3 in 0..n {
                        dst[dof + i3 * ds[a3]] = src[(so + i3 as isize * ss[a3]) as usize];
                    }
                }
            }
        }
    }
}

/// `copy_box` where the destination's innermost axis is strided in the
/// source but the next axis is contiguous there: copies 8x8 blocks through a
/// small buffer so both sides stream.
#[allow(clippy::too_many_arguments)]
fn transpose_box<T: Copy>(
    src: &[T],
    s0: usize,
    ss: [isize; 4],
    dst: &mut [T],
    d0: usize,
    ds: [usize; 4],
    extent: [usize; 4],
    [a0, a1, a2, a3]: [usize; 4],
) {
    const B: usize = 8;
    let (rows, cols) = (extent[a2], extent[a3]);
    for i0 in 0..extent[a0] {
        for i1 in 0..extent[a1] {
            let so = s0 as isize + i0 as isize * ss[a0] + i1 as isize * ss[a1];
            let dof = d0 + i0 * ds[a0] + i1 * ds[a1];
            for r in (0..rows).step_by(B) {
                let nr = B.min(rows - r);
                for c in (0..cols).step_by(B) {
                    let nc = B.min(cols - c);
                    let mut tile = [[src[0]; B]; B];
                    for (j, t) in tile.iter_mut().enumerate().take(nc) {
                        let s = (so + r as isize + (c + j) as isize * ss[a3]) as usize;
                        t[..nr].copy_from_slice(&src[s..s + nr]);
                    }
                    for i in 0..nr {
                        let d = dof + (r + i) * ds[a2] + c;
                        for (e, t) in dst[d..d + nc].iter_mut().zip(&tile) {
                            *e = t[i];
                        }
                    }
                }
            }
        }
    }
}

fn physical_offset(dims: Dims, layout: Layout, transposed: bool, idx: [usize; 4]) -> usize {
    match dims {
        Dims::Activation { c: cn, h: hn, w: wn } => {
            let [c, h, w, _] = idx;
            match layout {
                Layout::Chw => (c * hn + h) * wn + w,
                Layout::Hwc => (h * wn + w) * cn + c,
            }
        }
        Dims::Weight { c_out: on, c_in: inn, k_h: khn, k_w: kwn } => {
            let [o, i, kh, kw] = idx;
            match (layout, transposed) {
                (Layout::Chw, _) => ((o * inn + i) * khn + kh) * kwn + kw,
                (Layout::Hwc, false) => ((kh * kwn + kw) * inn + i) * on + o,
                (Layout::Hwc, true) => ((o * khn + kh) * kwn + kw) * inn + i,
            }
        }
    }
}

/// `perm[physical] = logical` position.
fn physical_to_logical(dims: Dims, layout: Layout, transposed: bool) -> Vec<usize> {
    let [a, b, c, d] = dims.as_array();
    let mut perm = vec![0usize; dims.len()];
    let mut l = 0;
    for i0 in 0..a {
        for i1 in 0..b {
            for i2 in 0..c {
                for i3 in 0..d {
                    perm[physical_offset(dims, layout, transposed, [i0, i1, i2, i3])] = l;
                    l += 1;
                }
            }
        }
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iota(n: usize) -> Vec<f32> {
        (0..n).map(|i| i as f32).collect()
    }

    #[test]
    fn chw_to_hwc_example() {
        let t = Tensor::from_logical(Dims::activation(2, 2, 2), Layout::Chw, ElemType::F32, &iota(8)).unwrap();
        assert_eq!(t.data::<f32>().unwrap(), &iota(8)[..]);
        let h = t.relayout(Layout::Hwc).unwrap();
        assert_eq!(h.data::<f32>().unwrap(), &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
        assert_eq!(h.relayout(Layout::Chw).unwrap(), t);
    }

    #[test]
    fn single_element_is_layout_free() {
        let t = Tensor::from_logical(Dims::activation(1, 1, 1), Layout::Chw, ElemType::F32, &[3.5]).unwrap();
        let h = t.relayout(Layout::Hwc).unwrap();
        assert_eq!(h.data::<f32>().unwrap(), &[3.5]);
    }

    #[test]
    fn convert_exact_values() {
        let t = Tensor::zeros(Dims::activation(2, 3, 3), Layout::Hwc, ElemType::F32);
        let h = t.convert(ElemType::F16);
        assert_eq!(h.elem(), ElemType::F16);
        assert!(h.to_logical().iter().all(|&v| v == 0.0));

        let one = Tensor::from_logical(Dims::activation(1, 1, 1), Layout::Chw, ElemType::F32, &[1.0]).unwrap();
        assert_eq!(one.convert(ElemType::F16).convert(ElemType::F32).to_logical(), vec![1.0]);
    }

    #[test]
    fn convert_point_one() {
        let t = Tensor::from_logical(Dims::activation(1, 1, 1), Layout::Chw, ElemType::F32, &[0.1]).unwrap();
        let back = t.convert(ElemType::F16).convert(ElemType::F32).to_logical()[0] as f64;
        let bound = half_flavor().epsilon() / 2.0 * 0.1;
        assert!((back - 0.1).abs() <= bound + 1e-9, "{back}");
    }

    #[test]
    fn weight_storages_agree_logically() {
        let dims = Dims::weight(3, 2, 2, 2);
        let vals = iota(24);
        let chw = Tensor::weights_from_logical(dims, Layout::Chw, false, ElemType::F32, &vals).unwrap();
        assert_eq!(chw.data::<f32>().unwrap(), &vals[..]);
        assert_eq!(chw.matrix_shape(), (3, 8));

        let hwc = chw.with_weight_storage(Layout::Hwc, false).unwrap();
        assert_eq!(hwc.matrix_shape(), (8, 3));
        let hwct = chw.with_weight_storage(Layout::Hwc, true).unwrap();
        assert_eq!(hwct.matrix_shape(), (3, 8));
        for t in [&hwc, &hwct] {
            assert_eq!(t.to_logical(), vals);
        }
        // HWC transposed is the matrix transpose of plain HWC.
        let a = hwc.matrix::<f32>().unwrap();
        let b = hwct.matrix::<f32>().unwrap();
        for r in 0..8 {
            for c in 0..3 {
                assert_eq!(a.get(r, c), b.get(c, r));
            }
        }
        // (c_out=1, c_in=0, kh=1, kw=0) sits at row (kh, kw, ci) = (1,0,0) -> 4 of the plain HWC matrix.
        assert_eq!(a.get(4, 1), chw.get([1, 0, 1, 0]));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::from_logical(Dims::activation(2, 2, 2), Layout::Chw, ElemType::F32, &iota(7)).is_err());
        let act = Tensor::zeros(Dims::activation(1, 2, 2), Layout::Chw, ElemType::F32);
        assert!(act.with_weight_storage(Layout::Hwc, true).is_err());
        let w = Tensor::zeros(Dims::weight(1, 1, 1, 1), Layout::Chw, ElemType::F32);
        assert!(w.relayout(Layout::Hwc).is_err());
        assert!(w.with_weight_storage(Layout::Chw, true).is_err());
        assert!(act.data::<f16>().is_err());
    }

    proptest! {
        #[test]
        fn relayout_is_a_bijection(c in 1usize..6, h in 1usize..6, w in 1usize..6, seed in 0u32..1000) {
            let vals: Vec<f32> = (0..c * h * w).map(|i| (i as u32 ^ seed) as f32).collect();
            let t = Tensor::from_logical(Dims::activation(c, h, w), Layout::Chw, ElemType::F32, &vals).unwrap();
            let hwc = t.relayout(Layout::Hwc).unwrap();
            prop_assert_eq!(hwc.relayout(Layout::Chw).unwrap(), t.clone());
            for ci in 0..c { for hi in 0..h { for wi in 0..w {
                prop_assert_eq!(hwc.get([ci, hi, wi, 0]), t.get([ci, hi, wi, 0]));
            }}}
            let mut a = t.data::<f32>().unwrap().to_vec();
            let mut b = hwc.data::<f32>().unwrap().to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn half_round_trip_is_idempotent(x in -100.0f32..100.0) {
            let t = Tensor::from_logical(Dims::activation(1, 1, 1), Layout::Chw, ElemType::F32, &[x]).unwrap();
            let once = t.convert(ElemType::F16).convert(ElemType::F32);
            let twice = once.convert(ElemType::F16).convert(ElemType::F32);
            prop_assert_eq!(once, twice);
        }
    }
}
