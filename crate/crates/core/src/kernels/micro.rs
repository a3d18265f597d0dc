//! Register-blocked inner kernels.
//!
//! Every output element owns its accumulator and consumes the inner dimension
//! in ascending order, so the unroll factor and the row chunking never change
//! the arithmetic of an output: only the vector mode does.

use std::array;
use std::marker::PhantomData;
use std::ops::Range;

use crate::elem::Elem;
use crate::profile::OpCounts;

/// Rounding rule applied after every accumulation.
pub(crate) trait Accum {
    fn mac(acc: f32, prod: f32) -> f32;
}

/// Rounds each partial sum to `T` (16-bit MAC semantics).
pub(crate) struct Native<T>(PhantomData<T>);

/// Keeps partial sums in f32.
pub(crate) struct Wide;

impl<T: Elem> Accum for Native<T> {
    #[inline(always)]
    fn mac(acc: f32, prod: f32) -> f32 {
        T::round(acc + prod)
    }
}

impl Accum for Wide {
    #[inline(always)]
    fn mac(acc: f32, prod: f32) -> f32 {
        acc + prod
    }
}

/// Kernel operation counter; the no-op version compiles away.
pub(crate) trait Counter: Default + Send {
    /// `iters` innermost-loop iterations issuing `loads` loads and `macs` MACs in total.
    fn inner(&mut self, main: bool, iters: usize, loads: usize, macs: usize);
    fn extra(&mut self, loads: usize, macs: usize, stores: usize);
    fn merge(&mut self, other: Self);
}

#[derive(Default)]
pub(crate) struct NoCount;

impl Counter for NoCount {
    #[inline(always)]
    fn inner(&mut self, _: bool, _: usize, _: usize, _: usize) {}
    #[inline(always)]
    fn extra(&mut self, _: usize, _: usize, _: usize) {}
    #[inline(always)]
    fn merge(&mut self, _: Self) {}
}

#[derive(Default, Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Count {
    pub total: OpCounts,
    pub main: OpCounts,
    pub main_iters: u64,
}

impl Counter for Count {
    fn inner(&mut self, main: bool, iters: usize, loads: usize, macs: usize) {
        self.total.load += loads as u64;
        self.total.mac += macs as u64;
        if main {
            self.main.load += loads as u64;
            self.main.mac += macs as u64;
            self.main_iters += iters as u64;
        }
    }

    fn extra(&mut self, loads: usize, macs: usize, stores: usize) {
        self.total.load += loads as u64;
        self.total.mac += macs as u64;
        self.total.store += stores as u64;
    }

    fn merge(&mut self, other: Self) {
        self.total += other.total;
        self.main += other.main;
        self.main_iters += other.main_iters;
    }
}

/// Operands of one kernel call. `a` is `N x K`; `b` is `K x M`, or `M x K`
/// when the kernel runs in transposed-operand form.
#[derive(Clone, Copy)]
pub(crate) struct Operands<'a, T> {
    pub a: &'a [T],
    pub b: &'a [T],
    pub k: usize,
    pub m: usize,
    /// Seed each accumulator with the current output value.
    pub seed: bool,
}

/// Computes output rows `rows` into `out` (`rows.len() x m`).
///
/// `TR` selects the row-row form (second operand transposed) and `L2` the
/// two-lane dot product, which needs `TR`.
pub(crate) fn run_rows<T, A, C, const U: usize, const V: usize, const TR: bool, const L2: bool>(
    ops: Operands<'_, T>,
    rows: Range<usize>,
    out: &mut [T],
) -> C
where
    T: Elem,
    A: Accum,
    C: Counter,
{
    let m = ops.m;
    let mut counter = C::default();
    let n = rows.len();
    let full_u = n / U * U;
    let full_v = m / V * V;

    for lr in (0..full_u).step_by(U) {
        let i = rows.start + lr;
        for j in (0..full_v).step_by(V) {
            block::<T, A, C, U, V, TR, L2>(ops, i, j, out, lr, &mut counter, true);
        }
        // Leftover columns of this row block.
        for u in 0..U {
            for j in full_v..m {
                block::<T, A, C, 1, 1, TR, L2>(ops, i + u, j, out, lr + u, &mut counter, false);
            }
        }
    }
    // Leftover rows.
    for lr in full_u..n {
        for j in 0..m {
            block::<T, A, C, 1, 1, TR, L2>(ops, rows.start + lr, j, out, lr, &mut counter, false);
        }
    }
    counter
}

/// `U x V` outputs starting at global row `i`, column `j`; `lr` is the
/// row index inside `out`.
#[inline(always)]
fn block<T, A, C, const U: usize, const V: usize, const TR: bool, const L2: bool>(
    ops: Operands<'_, T>,
    i: usize,
    j: usize,
    out: &mut [T],
    lr: usize,
    counter: &mut C,
    main: bool,
) where
    T: Elem,
    A: Accum,
    C: Counter,
{
    let Operands { a, b, k, m, seed } = ops;
    let mut acc = [[0f32; V]; U];
    if seed {
        for (u, row) in acc.iter_mut().enumerate() {
            for (v, x) in row.iter_mut().enumerate() {
                *x = out[(lr + u) * m + j + v].to_f32();
            }
        }
        counter.extra(U * V, 0, 0);
    }
    let arows: [&[T]; U] = array::from_fn(|u| &a[(i + u) * k..(i + u + 1) * k]);

    if L2 {
        debug_assert!(TR);
        let brows: [&[T]; V] = array::from_fn(|v| &b[(j + v) * k..(j + v + 1) * k]);
        let mut acc1 = [[0f32; V]; U];
        let pairs = k / 2;
        for p in 0..pairs {
            let kk = 2 * p;
            let a0: [f32; U] = array::from_fn(|u| arows[u][kk].to_f32());
            let a1: [f32; U] = array::from_fn(|u| arows[u][kk + 1].to_f32());
            let b0: [f32; V] = array::from_fn(|v| brows[v][kk].to_f32());
            let b1: [f32; V] = array::from_fn(|v| brows[v][kk + 1].to_f32());
            for u in 0..U {
                for v in 0..V {
                    acc[u][v] = A::mac(acc[u][v], a0[u] * b0[v]);
                    acc1[u][v] = A::mac(acc1[u][v], a1[u] * b1[v]);
                }
            }
        }
        // One paired load per operand row, two lane MACs per output.
        counter.inner(main, pairs, (U + V) * pairs, 2 * U * V * pairs);
        for u in 0..U {
            for v in 0..V {
                acc[u][v] = A::mac(acc[u][v], acc1[u][v]);
            }
        }
        if k % 2 == 1 {
            let kk = k - 1;
            for u in 0..U {
                for v in 0..V {
                    acc[u][v] = A::mac(acc[u][v], arows[u][kk].to_f32() * brows[v][kk].to_f32());
                }
            }
            counter.extra(U + V, U * V, 0);
        }
    } else if TR {
        let brows: [&[T]; V] = array::from_fn(|v| &b[(j + v) * k..(j + v + 1) * k]);
        for kk in 0..k {
            let av: [f32; U] = array::from_fn(|u| arows[u][kk].to_f32());
            let bv: [f32; V] = array::from_fn(|v| brows[v][kk].to_f32());
            for u in 0..U {
                for v in 0..V {
                    acc[u][v] = A::mac(acc[u][v], av[u] * bv[v]);
                }
            }
        }
        counter.inner(main, k, (U + V) * k, U * V * k);
    } else {
        for (kk, brow) in b.chunks_exact(m).take(k).enumerate() {
            let av: [f32; U] = array::from_fn(|u| arows[u][kk].to_f32());
            let bs = &brow[j..j + V];
            let bv: [f32; V] = array::from_fn(|v| bs[v].to_f32());
            for u in 0..U {
                for v in 0..V {
                    acc[u][v] = A::mac(acc[u][v], av[u] * bv[v]);
                }
            }
        }
        counter.inner(main, k, (U + V) * k, U * V * k);
    }

    for (u, row) in acc.iter().enumerate() {
        let o = &mut out[(lr + u) * m + j..(lr + u) * m + j + V];
        for (dst, &x) in o.iter_mut().zip(row) {
            *dst = T::from_f32(x);
        }
    }
    counter.extra(0, 0, U * V);
}
