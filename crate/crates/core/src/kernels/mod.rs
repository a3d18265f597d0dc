//! Matrix-multiplication microkernels.
//!
//! * `MM`: `C = A B` with `A: N x K`, `B: K x M` (row-column dot products,
//!   strided accesses along the columns of `B`).
//! * `MM_T`: `C = A Tr(B)^T`, i.e. the second operand is passed already
//!   transposed (`M x K`) and every output is a row-row dot product, so
//!   `mm_t(A, Tr(B)) == mm(A, B)`.
//!
//! Each form is available with `U x V` register blocking (the kernel computes
//! `U x V` outputs per innermost loop, leftover rows and columns fall back to
//! the 1x1 kernel) and, for 16-bit `MM_T`, a two-lane mode that consumes two
//! adjacent inner elements per step with one paired load per operand row.
//! Outputs are always overwritten.

mod micro;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::elem::{Elem, ElemType};
use crate::error::{Error, Result};
use crate::exec::{AccMode, ExecConfig};
use crate::mat::{Mat, MatRef};
use crate::profile::{OpCounts, Phase};

use micro::{Accum, Count, Counter, Native, NoCount, Operands, Wide};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MMDims {
    pub n: usize,
    pub k: usize,
    pub m: usize,
}

impl MMDims {
    /// Checks operand shapes for `form` and returns the problem size.
    pub fn of<T>(a: &MatRef<'_, T>, b: &MatRef<'_, T>, form: Form) -> Result<Self> {
        let (n, k) = (a.rows(), a.cols());
        let (kb, m) = match form {
            Form::Mm => (b.rows(), b.cols()),
            Form::MmT => (b.cols(), b.rows()),
        };
        if k != kb {
            return Err(Error::Shape(format!("{form}: A is {n}x{k} but B is {}x{} (inner {kb})", b.rows(), b.cols())));
        }
        if n == 0 || k == 0 || m == 0 {
            return Err(Error::Shape(format!("{form}: empty problem {n}x{k}x{m}")));
        }
        Ok(Self { n, k, m })
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.k * self.m) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Form {
    #[serde(rename = "mm")]
    Mm,
    #[serde(rename = "mm_t")]
    MmT,
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Form::Mm => "mm",
            Form::MmT => "mm_t",
        })
    }
}

/// Register blocking `U x V`: outputs computed per innermost loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unroll {
    #[serde(rename = "1x1")]
    U1x1,
    #[serde(rename = "1x2")]
    U1x2,
    #[serde(rename = "2x2")]
    U2x2,
    #[serde(rename = "2x4")]
    U2x4,
    #[serde(rename = "4x2")]
    U4x2,
}

impl Unroll {
    pub const ALL: [Unroll; 5] = [Unroll::U1x1, Unroll::U1x2, Unroll::U2x2, Unroll::U2x4, Unroll::U4x2];

    pub fn factors(self) -> (usize, usize) {
        match self {
            Unroll::U1x1 => (1, 1),
            Unroll::U1x2 => (1, 2),
            Unroll::U2x2 => (2, 2),
            Unroll::U2x4 => (2, 4),
            Unroll::U4x2 => (4, 2),
        }
    }
}

impl fmt::Display for Unroll {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (u, v) = self.factors();
        write!(f, "{u}x{v}")
    }
}

impl FromStr for Unroll {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Unroll::ALL
            .into_iter()
            .find(|u| u.to_string() == s)
            .ok_or_else(|| Error::Parse(format!("unroll `{s}` not in {{1x1, 1x2, 2x2, 2x4, 4x2}}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorMode {
    Scalar,
    /// Two 16-bit lanes per load and MAC.
    Lanes2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelVariant {
    pub form: Form,
    pub unroll: Unroll,
    pub vector: VectorMode,
}

impl KernelVariant {
    pub const NAIVE: KernelVariant = KernelVariant { form: Form::Mm, unroll: Unroll::U1x1, vector: VectorMode::Scalar };

    pub fn new(form: Form, unroll: Unroll, vector: VectorMode) -> Self {
        Self { form, unroll, vector }
    }

    pub fn mm(unroll: Unroll) -> Self {
        Self::new(Form::Mm, unroll, VectorMode::Scalar)
    }

    pub fn mm_t(unroll: Unroll) -> Self {
        Self::new(Form::MmT, unroll, VectorMode::Scalar)
    }

    pub fn lanes2(unroll: Unroll) -> Self {
        Self::new(Form::MmT, unroll, VectorMode::Lanes2)
    }

    /// Two-lane kernels exist only for 16-bit `MM_T`.
    pub fn validate(&self, elem: ElemType) -> Result<()> {
        if self.vector == VectorMode::Lanes2 {
            if elem != ElemType::F16 {
                return Err(Error::Variant(format!("{self} requires f16 operands, got {elem}")));
            }
            if self.form != Form::MmT {
                return Err(Error::Variant(format!("{self}: two-lane kernels need the mm_t form")));
            }
        }
        Ok(())
    }

    /// Every valid variant for `elem`.
    pub fn all(elem: ElemType) -> Vec<KernelVariant> {
        let mut v = Vec::new();
        for form in [Form::Mm, Form::MmT] {
            for unroll in Unroll::ALL {
                for vector in [VectorMode::Scalar, VectorMode::Lanes2] {
                    let k = KernelVariant { form, unroll, vector };
                    if k.validate(elem).is_ok() {
                        v.push(k);
                    }
                }
            }
        }
        v
    }
}

impl fmt::Display for KernelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.form, self.unroll)?;
        if self.vector == VectorMode::Lanes2 {
            f.write_str("-lanes2")?;
        }
        Ok(())
    }
}

impl Serialize for KernelVariant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KernelVariant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for KernelVariant {
    type Err = Error;

    /// `mm-2x4`, `mm_t-1x2-lanes2`, ...
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('-');
        let form = match parts.next() {
            Some("mm") => Form::Mm,
            Some("mm_t") | Some("mmt") => Form::MmT,
            _ => return Err(Error::Parse(format!("variant `{s}`: expected mm or mm_t prefix"))),
        };
        let unroll = parts.next().ok_or_else(|| Error::Parse(format!("variant `{s}`: missing unroll")))?.parse()?;
        let vector = match parts.next() {
            None | Some("scalar") => VectorMode::Scalar,
            Some("lanes2") => VectorMode::Lanes2,
            Some(other) => return Err(Error::Parse(format!("variant `{s}`: unknown mode `{other}`"))),
        };
        if parts.next().is_some() {
            return Err(Error::Parse(format!("variant `{s}`: trailing fields")));
        }
        Ok(Self { form, unroll, vector })
    }
}

/// Exact operation counts of a kernel run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    /// Whole run, including leftover loops, odd-element epilogues and stores.
    pub total: OpCounts,
    /// Innermost loop of the unrolled main body only.
    pub inner: OpCounts,
    pub inner_iters: u64,
}

impl OpCounters {
    /// `(macs, loads)` issued by one main-body innermost iteration.
    pub fn per_inner_iter(&self) -> Option<(u64, u64)> {
        (self.inner_iters > 0).then(|| (self.inner.mac / self.inner_iters, self.inner.load / self.inner_iters))
    }

    /// MAC share `mac / (mac + load + store)` of the main innermost loop.
    pub fn inner_utilization(&self) -> f64 {
        self.inner.utilization()
    }

    fn from_count(c: Count) -> Self {
        Self { total: c.total, inner: c.main, inner_iters: c.main_iters }
    }
}

/// `C = A B` (`variant.form` must be `Mm`).
pub fn mm<T: Elem>(a: MatRef<'_, T>, b: MatRef<'_, T>, variant: KernelVariant, cfg: &ExecConfig) -> Result<Mat<T>> {
    if variant.form != Form::Mm {
        return Err(Error::Variant(format!("mm called with {variant}")));
    }
    matmul(a, b, variant, cfg)
}

/// `C = A Bt^T` where `bt` is `M x K` (`variant.form` must be `MmT`).
pub fn mm_t<T: Elem>(a: MatRef<'_, T>, bt: MatRef<'_, T>, variant: KernelVariant, cfg: &ExecConfig) -> Result<Mat<T>> {
    if variant.form != Form::MmT {
        return Err(Error::Variant(format!("mm_t called with {variant}")));
    }
    matmul(a, bt, variant, cfg)
}

/// Runs `variant`, interpreting `b` according to `variant.form`.
pub fn matmul<T: Elem>(a: MatRef<'_, T>, b: MatRef<'_, T>, variant: KernelVariant, cfg: &ExecConfig) -> Result<Mat<T>> {
    let dims = MMDims::of(&a, &b, variant.form)?;
    let mut out = Mat::zeros(dims.n, dims.m);
    matmul_into(a, b, variant, cfg, out.as_mut_slice(), false)?;
    Ok(out)
}

/// Like [`matmul`], also returning the exact operation counters.
pub fn matmul_counted<T: Elem>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    variant: KernelVariant,
    cfg: &ExecConfig,
) -> Result<(Mat<T>, OpCounters)> {
    let dims = MMDims::of(&a, &b, variant.form)?;
    let mut out = Mat::zeros(dims.n, dims.m);
    let c = matmul_into_counted(a, b, variant, cfg, out.as_mut_slice(), false)?;
    Ok((out, c))
}

/// Writes the product into `out` (`N x M`). With `accumulate`, each output's
/// accumulator starts from the current value of `out` instead of zero, which
/// continues a reduction split along the inner dimension bit for bit. When
/// the config counts operations they are charged to the MM phase of its trace.
pub fn matmul_into<T: Elem>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    variant: KernelVariant,
    cfg: &ExecConfig,
    out: &mut [T],
    accumulate: bool,
) -> Result<()> {
    if cfg.counts_ops() {
        let c = matmul_into_counted(a, b, variant, cfg, out, accumulate)?;
        cfg.record_ops(Phase::Mm, c.total);
        Ok(())
    } else {
        run::<T, NoCount>(a, b, variant, cfg, out, accumulate).map(|_| ())
    }
}

fn matmul_into_counted<T: Elem>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    variant: KernelVariant,
    cfg: &ExecConfig,
    out: &mut [T],
    accumulate: bool,
) -> Result<OpCounters> {
    run::<T, Count>(a, b, variant, cfg, out, accumulate).map(OpCounters::from_count)
}

fn run<T: Elem, C: Counter>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    variant: KernelVariant,
    cfg: &ExecConfig,
    out: &mut [T],
    seed: bool,
) -> Result<C> {
    variant.validate(T::TYPE)?;
    let dims = MMDims::of(&a, &b, variant.form)?;
    if out.len() != dims.n * dims.m {
        return Err(Error::Shape(format!("output holds {} elements, product is {}x{}", out.len(), dims.n, dims.m)));
    }
    let ops = Operands { a: a.as_slice(), b: b.as_slice(), k: dims.k, m: dims.m, seed };
    let wide = T::TYPE == ElemType::F32 || cfg.acc() == AccMode::F32;
    let parts = if wide {
        cfg.split_rows(out, dims.m, dims.n, |rows, chunk| dispatch::<T, Wide, C>(variant, ops, rows, chunk))
    } else {
        cfg.split_rows(out, dims.m, dims.n, |rows, chunk| dispatch::<T, Native<T>, C>(variant, ops, rows, chunk))
    };
    let mut total = C::default();
    for p in parts {
        total.merge(p);
    }
    Ok(total)
}

fn dispatch<T: Elem, A: Accum, C: Counter>(
    variant: KernelVariant,
    ops: Operands<'_, T>,
    rows: std::ops::Range<usize>,
    out: &mut [T],
) -> C {
    macro_rules! go {
        ($u:literal, $v:literal) => {
            match (variant.form, variant.vector) {
                (Form::Mm, _) => micro::run_rows::<T, A, C, $u, $v, false, false>(ops, rows, out),
                (Form::MmT, VectorMode::Scalar) => micro::run_rows::<T, A, C, $u, $v, true, false>(ops, rows, out),
                (Form::MmT, VectorMode::Lanes2) => micro::run_rows::<T, A, C, $u, $v, true, true>(ops, rows, out),
            }
        };
    }
    match variant.unroll {
        Unroll::U1x1 => go!(1, 1),
        Unroll::U1x2 => go!(1, 2),
        Unroll::U2x2 => go!(2, 2),
        Unroll::U2x4 => go!(2, 4),
        Unroll::U4x2 => go!(4, 2),
    }
}
