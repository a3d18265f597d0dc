//! Scratchpad-budgeted tiling of layer steps.
//!
//! A step is split into tiles of output channels and output rows. Each tile
//! stages its operands (input rows plus halo, the weight slice) into a
//! bounded scratchpad, runs the same primitive as the untiled step on them
//! and writes its output back. Tiles run channel-major, so weights are
//! staged once per channel tile.
//!
//! FW and BW-IG tiles reproduce the untiled result bit for bit. BW-WG tiles
//! split the spatial reduction: the partial weight gradient of a channel
//! tile is carried across its row tiles, either by seeding the kernel's
//! accumulators or, for 16-bit data by default, in an f32 buffer rounded
//! once at the end. Seeding is an exact continuation for scalar kernels;
//! two-lane kernels fold their lanes per call, so split reductions regroup
//! their sums.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::conv::{finish_weight_grad, forward_with, weight_grad_into, weight_grad_k_by_co, LayerState, Op, Step};
use crate::elem::ElemType;
use crate::error::{Error, Result};
use crate::exec::ExecConfig;
use crate::geometry::{ConvSpec, WindowGeom};
use crate::kernels::{Form, KernelVariant};
use crate::profile::Phase;
use crate::tensor::{Dims, Layout, Stored, Tensor};
use crate::transforms::block_transpose;
use crate::with_elem;

/// Default scratchpad size in bytes.
pub const DEFAULT_L1_BYTES: usize = 64 * 1024;

/// Bump allocator that only accounts bytes.
#[derive(Clone, Debug)]
pub struct Scratchpad {
    capacity: usize,
    in_use: usize,
    peak: usize,
}

impl Scratchpad {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, in_use: 0, peak: 0 }
    }

    /// Reserves `bytes`, returning the region's offset.
    pub fn alloc(&mut self, bytes: usize) -> Result<usize> {
        if self.in_use + bytes > self.capacity {
            return Err(Error::ScratchpadFull { requested: bytes, in_use: self.in_use, capacity: self.capacity });
        }
        let offset = self.in_use;
        self.in_use += bytes;
        self.peak = self.peak.max(self.in_use);
        Ok(offset)
    }

    /// Current top of the allocator, for [`Scratchpad::release_to`].
    pub fn mark(&self) -> usize {
        self.in_use
    }

    /// Frees every region allocated after `mark`.
    pub fn release_to(&mut self, mark: usize) {
        debug_assert!(mark <= self.in_use);
        self.in_use = mark;
    }

    pub fn reset(&mut self) {
        self.in_use = 0;
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn in_use(&self) -> usize {
        self.in_use
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Bytes moved between the backing store and the scratchpad.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferLog {
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub n_transfers: u64,
    pub n_tiles: u64,
}

impl TransferLog {
    fn stage_in(&mut self, bytes: usize) {
        self.bytes_in += bytes as u64;
        self.n_transfers += 1;
    }

    fn write_out(&mut self, bytes: usize) {
        self.bytes_out += bytes as u64;
        self.n_transfers += 1;
    }

    /// Share of transfers a double-buffered pipeline hides behind compute:
    /// everything but the first tile's loads and the last tile's stores.
    pub fn overlap_factor(&self) -> f64 {
        if self.n_tiles <= 1 {
            0.0
        } else {
            (self.n_tiles - 1) as f64 / self.n_tiles as f64
        }
    }
}

/// How BW-WG carries partial weight gradients across row tiles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileAcc {
    /// f32 buffer for 16-bit data, rounded once; exact continuation for f32.
    #[default]
    F32,
    /// Continue in the element type by seeding the kernel accumulators.
    Native,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    /// Output channels of the step (`C_O` for FW and BW-WG, `C_I` for BW-IG).
    pub channels: Span,
    /// Output rows (FW, BW-IG) or reduction rows of `dY` (BW-WG).
    pub rows: Span,
    /// Planned scratchpad bytes.
    pub footprint: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub op: Op,
    pub spec: ConvSpec,
    pub layout: Layout,
    pub elem: ElemType,
    pub variant: KernelVariant,
    pub step: Step,
    pub capacity: usize,
    #[serde(default)]
    pub tile_acc: TileAcc,
    pub tile_channels: usize,
    pub tile_rows: usize,
    pub tiles: Vec<Tile>,
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Largest planned tile footprint.
    pub fn max_footprint(&self) -> usize {
        self.tiles.iter().map(|t| t.footprint).max().unwrap_or(0)
    }

    fn check(&self, st: &LayerState) -> Result<()> {
        let ok = self.op == st.op()
            && self.spec == *st.spec()
            && self.layout == st.layout()
            && self.elem == st.elem()
            && self.variant == st.variant();
        if ok {
            Ok(())
        } else {
            Err(Error::PlanMismatch(format!(
                "plan for {} {:?} {} {} {}, layer is {} {:?} {} {} {}",
                self.op,
                self.spec,
                self.layout,
                self.elem,
                self.variant,
                st.op(),
                st.spec(),
                st.layout(),
                st.elem(),
                st.variant()
            )))
        }
    }
}

/// Shape of one step: what is staged and what is produced.
#[derive(Clone, Copy, Debug)]
struct StepShape {
    /// Channels, rows and width of the staged activation (X or dY).
    src: (usize, usize, usize),
    /// Output channels and rows to tile over, and output width.
    out: (usize, usize, usize),
    /// Window over the staged activation.
    g: WindowGeom,
}

fn step_shape(spec: &ConvSpec, step: Step) -> StepShape {
    match step {
        Step::Fw => StepShape {
            src: (spec.c_in, spec.h_in, spec.w_in),
            out: (spec.c_out, spec.h_out(), spec.w_out()),
            g: spec.forward_window(),
        },
        Step::BwIg => StepShape {
            src: (spec.c_out, spec.h_out(), spec.w_out()),
            out: (spec.c_in, spec.h_in, spec.w_in),
            g: spec.backward_input_window(),
        },
        Step::BwWg => StepShape {
            src: (spec.c_in, spec.h_in, spec.w_in),
            out: (spec.c_out, spec.h_out(), spec.w_out()),
            g: spec.forward_window(),
        },
    }
}

/// Staged source rows for output rows `rows`, and the window offset inside them.
fn source_rows(g: &WindowGeom, rows: Range<usize>) -> (Range<usize>, isize) {
    let lo = (rows.start as isize - g.off_h).max(0);
    let hi = ((rows.end + g.k_h - 1) as isize - g.off_h).min(g.in_h as isize).max(lo);
    (lo as usize..hi as usize, g.off_h + lo - rows.start as isize)
}

/// Everything that decides buffer sizes.
#[derive(Clone, Copy, Debug)]
struct Budget {
    op: Op,
    spec: ConvSpec,
    layout: Layout,
    elem: ElemType,
    form: Form,
    weights_transposed: bool,
    step: Step,
    tile_acc: TileAcc,
}

impl Budget {
    fn of(st: &LayerState, step: Step, tile_acc: TileAcc) -> Self {
        Self {
            op: st.op(),
            spec: *st.spec(),
            layout: st.layout(),
            elem: st.elem(),
            form: st.variant().form,
            weights_transposed: st.weights().is_transposed(),
            step,
            tile_acc,
        }
    }

    fn f32_partials(&self) -> bool {
        self.elem == ElemType::F16 && self.tile_acc == TileAcc::F32
    }

    /// Elements of each buffer of a tile with `ch` channels, `rows` output
    /// rows and `src_rows` staged source rows, as `(persistent, per_row_tile)`
    /// byte counts. Persistent buffers live for a whole channel tile.
    fn bytes(&self, ch: usize, rows: usize, src_rows: usize) -> (usize, usize) {
        let s = &self.spec;
        let e = self.elem.bytes();
        let sh = step_shape(s, self.step);
        let (src_c, _, src_w) = sh.src;
        let out_w = sh.out.2;
        let taps = s.k_h * s.k_w;
        let px = rows * out_w;
        let reshape = self.op != Op::Conv2d;
        let staged = src_c * src_rows * src_w;
        // Lowered operand: Im2Row/Im2Col, or a transposed copy for reshapes.
        let lowered = |uses_rows: bool| -> usize {
            if !reshape {
                px * src_c * taps
            } else if uses_rows == (self.layout == Layout::Chw) {
                px * src_c
            } else {
                0
            }
        };
        let weights_copy = |k: usize| -> usize {
            let want_k_by_co = self.layout == Layout::Hwc && self.form == Form::Mm;
            let is_k_by_co = self.layout == Layout::Hwc && !self.weights_transposed;
            if want_k_by_co == is_k_by_co {
                0
            } else {
                ch * k
            }
        };
        let uses_rows_fw = !(self.layout == Layout::Chw && self.form == Form::Mm);
        match self.step {
            Step::Fw => {
                let k = s.c_in * taps;
                let persistent = ch * k + weights_copy(k);
                let per_tile = staged + lowered(uses_rows_fw) + ch * px;
                (persistent * e, per_tile * e)
            }
            Step::BwIg => {
                let k = s.c_out * taps;
                // Staged weight slice plus its block transpose.
                let persistent = 2 * ch * k + weights_copy(k);
                let per_tile = staged + lowered(uses_rows_fw) + ch * px;
                (persistent * e, per_tile * e)
            }
            Step::BwWg => {
                let k = s.c_in * taps;
                let uses_rows = self.layout == Layout::Chw && self.form == Form::Mm;
                let dy_t = if self.layout == Layout::Hwc && self.form == Form::MmT { ch * px } else { 0 };
                let out_copy = if weight_grad_k_by_co(self.layout, self.form)
                    == (self.layout == Layout::Hwc && !self.weights_transposed)
                {
                    0
                } else {
                    ch * k
                };
                let mut persistent = (ch * k + out_copy) * e;
                if self.f32_partials() {
                    persistent += ch * k * 4;
                }
                let per_tile = (staged + ch * px + dy_t + lowered(uses_rows)) * e;
                (persistent, per_tile)
            }
        }
    }

    fn footprint(&self, ch: usize, rows: usize) -> usize {
        let sh = step_shape(&self.spec, self.step);
        let src_rows = (rows + self.spec.k_h - 1).min(sh.src.1);
        let (p, t) = self.bytes(ch, rows, src_rows);
        p + t
    }
}

/// Greedy plan: the most output channels that fit with one row, then the
/// largest row count dividing the output height that still fits.
pub fn plan_tiles(st: &LayerState, step: Step, capacity: usize) -> Result<TilePlan> {
    plan_tiles_with(st, step, capacity, TileAcc::default())
}

pub fn plan_tiles_with(st: &LayerState, step: Step, capacity: usize, tile_acc: TileAcc) -> Result<TilePlan> {
    let b = Budget::of(st, step, tile_acc);
    let (n_ch, n_rows, _) = step_shape(st.spec(), step).out;
    let ch = (1..=n_ch)
        .rev()
        .find(|&c| b.footprint(c, 1) <= capacity)
        .ok_or(Error::InfeasibleTiling { capacity, required: b.footprint(1, 1) })?;
    let rows = (1..=n_rows).rev().find(|&r| n_rows % r == 0 && b.footprint(ch, r) <= capacity).expect("one row fits");
    let mut tiles = Vec::new();
    for c0 in (0..n_ch).step_by(ch) {
        let c1 = (c0 + ch).min(n_ch);
        for r0 in (0..n_rows).step_by(rows) {
            let r1 = (r0 + rows).min(n_rows);
            tiles.push(Tile {
                channels: Span { start: c0, end: c1 },
                rows: Span { start: r0, end: r1 },
                footprint: b.footprint(c1 - c0, r1 - r0),
            });
        }
    }
    Ok(TilePlan {
        op: st.op(),
        spec: *st.spec(),
        layout: st.layout(),
        elem: st.elem(),
        variant: st.variant(),
        step,
        capacity,
        tile_acc,
        tile_channels: ch,
        tile_rows: rows,
        tiles,
    })
}

/// Result of a tiled step.
#[derive(Clone, Debug)]
pub struct TiledRun {
    pub output: Tensor,
    pub log: TransferLog,
    /// Peak scratchpad bytes actually reserved.
    pub peak: usize,
}

/// Runs `plan.step` tile by tile. `input` is `X` for FW (which is saved in
/// the layer like an untiled forward) and `dY` for the backward steps.
pub fn run_tiled(st: &mut LayerState, input: &Tensor, plan: &TilePlan, cfg: &ExecConfig) -> Result<TiledRun> {
    plan.check(st)?;
    let run = match plan.step {
        Step::Fw => {
            st.check_input(input)?;
            with_elem!(input.buffer(), T => run_forward::<T>(st, input, plan, cfg))?
        }
        Step::BwIg => {
            if st.saved_input().is_none() {
                return Err(Error::NoForward);
            }
            st.check_output_grad(input)?;
            with_elem!(input.buffer(), T => run_forward::<T>(st, input, plan, cfg))?
        }
        Step::BwWg => {
            st.check_output_grad(input)?;
            with_elem!(input.buffer(), T => run_weight_grad::<T>(st, input, plan, cfg))?
        }
    };
    if plan.step == Step::Fw {
        st.save_input(input, cfg);
    }
    Ok(run)
}

/// Local window of a tile: `rows` outputs over staged rows `src_rows`.
fn tile_window(g: &WindowGeom, rows: Range<usize>) -> (Range<usize>, WindowGeom) {
    let (src_rows, off_h) = source_rows(g, rows.clone());
    let local = WindowGeom { in_h: src_rows.len(), out_h: rows.len(), off_h, ..*g };
    (src_rows, local)
}

/// FW, and BW-IG with block-transposed weight slices.
fn run_forward<T: Stored>(st: &LayerState, src: &Tensor, plan: &TilePlan, cfg: &ExecConfig) -> Result<TiledRun> {
    let spec = *st.spec();
    let sh = step_shape(&spec, plan.step);
    let budget = Budget::of(st, plan.step, plan.tile_acc);
    let (out_c, out_h, out_w) = sh.out;
    let mut out =
        cfg.phase(Phase::Copy, || Tensor::zeros(Dims::activation(out_c, out_h, out_w), st.layout(), st.elem()));
    let mut pad = Scratchpad::new(plan.capacity);
    let mut log = TransferLog::default();
    let mut weights: Option<(Span, Tensor)> = None;
    let mut base = 0;

    for tile in &plan.tiles {
        let ch = tile.channels;
        if weights.as_ref().map(|(s, _)| *s) != Some(ch) {
            pad.reset();
            let w = match plan.step {
                Step::Fw => cfg.phase(Phase::Copy, || st.weights().slice_weights(ch.range(), 0..spec.c_in))?,
                _ => {
                    let slice = cfg.phase(Phase::Copy, || st.weights().slice_weights(0..spec.c_out, ch.range()))?;
                    log.stage_in(slice.bytes());
                    cfg.phase(Phase::Transpose, || block_transpose(&slice))?
                }
            };
            if plan.step == Step::Fw {
                log.stage_in(w.bytes());
            }
            let (tile_rows, src_rows) = (tile.rows.len(), (tile.rows.len() + spec.k_h - 1).min(sh.src.1));
            pad.alloc(budget.bytes(ch.len(), tile_rows, src_rows).0)?;
            base = pad.mark();
            weights = Some((ch, w));
        }
        let w = &weights.as_ref().expect("staged").1;
        pad.release_to(base);
        log.n_tiles += 1;

        let (src_rows, g) = tile_window(&sh.g, tile.rows.range());
        pad.alloc(budget.bytes(ch.len(), tile.rows.len(), src_rows.len()).1)?;
        if src_rows.is_empty() {
            // Every window of this tile lies in the zero border: the output is
            // already zero and only its write-back remains.
            log.write_out(ch.len() * tile.rows.len() * out_w * st.elem().bytes());
            continue;
        }
        let staged = cfg.phase(Phase::Copy, || src.slice_activation(0..sh.src.0, src_rows.clone()))?;
        log.stage_in(staged.bytes());
        let y = forward_with::<T>(&staged, w, &g, st.op() != Op::Conv2d, st.variant(), cfg)?;
        log.write_out(y.bytes());
        cfg.phase(Phase::Copy, || {
            let r = out.write_activation(&y, ch.start, tile.rows.start, (0..ch.len(), 0..tile.rows.len()));
            drop((staged, y));
            r
        })?;
    }
    Ok(TiledRun { output: out, log, peak: pad.peak() })
}

fn run_weight_grad<T: Stored>(st: &LayerState, dy: &Tensor, plan: &TilePlan, cfg: &ExecConfig) -> Result<TiledRun> {
    let x = st.saved_input().ok_or(Error::NoForward)?;
    let spec = *st.spec();
    let sh = step_shape(&spec, Step::BwWg);
    let budget = Budget::of(st, Step::BwWg, plan.tile_acc);
    let w = st.weights();
    let k = spec.c_in * spec.k_h * spec.k_w;
    let variant = st.variant();
    let reshape = st.op() != Op::Conv2d;
    let mut dw = cfg.phase(Phase::Copy, || w.zeros_like());
    let mut pad = Scratchpad::new(plan.capacity);
    let mut log = TransferLog::default();

    let mut i = 0;
    while i < plan.tiles.len() {
        let ch = plan.tiles[i].channels;
        let group: Vec<&Tile> = plan.tiles[i..].iter().take_while(|t| t.channels == ch).collect();
        i += group.len();

        pad.reset();
        let first = group[0].rows.len();
        pad.alloc(budget.bytes(ch.len(), first, (first + spec.k_h - 1).min(sh.src.1)).0)?;
        let base = pad.mark();
        let (mut partial, mut wide) = cfg.phase(Phase::Copy, || {
            (vec![T::zero(); ch.len() * k], budget.f32_partials().then(|| vec![0f32; ch.len() * k]))
        });
        let mut started = false;

        for tile in group {
            pad.release_to(base);
            log.n_tiles += 1;
            let (src_rows, g) = tile_window(&sh.g, tile.rows.range());
            pad.alloc(budget.bytes(ch.len(), tile.rows.len(), src_rows.len()).1)?;
            if src_rows.is_empty() {
                continue;
            }
            let xs = cfg.phase(Phase::Copy, || x.slice_activation(0..spec.c_in, src_rows.clone()))?;
            let ds = cfg.phase(Phase::Copy, || dy.slice_activation(ch.range(), tile.rows.range()))?;
            log.stage_in(xs.bytes());
            log.stage_in(ds.bytes());
            match wide.as_mut() {
                Some(acc) => {
                    weight_grad_into::<T>(&xs, &ds, &g, reshape, variant, cfg, &mut partial, false)?;
                    cfg.phase(Phase::Elementwise, || {
                        for (a, p) in acc.iter_mut().zip(&partial) {
                            *a += p.to_f32();
                        }
                    });
                }
                None => {
                    weight_grad_into::<T>(&xs, &ds, &g, reshape, variant, cfg, &mut partial, started)?;
                }
            }
            cfg.phase(Phase::Copy, || drop((xs, ds)));
            started = true;
        }

        if let Some(acc) = wide {
            cfg.phase(Phase::Elementwise, || {
                for (p, a) in partial.iter_mut().zip(acc) {
                    *p = T::from_f32(a);
                }
            });
        }
        let dims = Dims::weight(ch.len(), spec.c_in, spec.k_h, spec.k_w);
        let tile_dw = finish_weight_grad(partial, dims, w.layout(), w.is_transposed(), variant.form, cfg)?;
        log.write_out(tile_dw.bytes());
        cfg.phase(Phase::Copy, || {
            let r = dw.write_weights(&tile_dw, ch.start, 0, (0..ch.len(), 0..spec.c_in));
            drop(tile_dw);
            r
        })?;
    }
    Ok(TiledRun { output: dw, log, peak: pad.peak() })
}
