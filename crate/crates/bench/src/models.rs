//! End-to-end single-sample training of ResNet8 and DS-CNN analogues.
//!
//! Only stride-1 convolutions exist, so every strided layer of the original
//! models is an average pool followed by a stride-1 convolution; spatial and
//! channel sizes match the originals. Convolution, pointwise and FC layers
//! run tile by tile under the scratchpad budget when one is given.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use odl_kernels::layers::{
    add, avg_pool, avg_pool_backward, global_avg_pool, global_avg_pool_backward, relu, relu_backward, DepthwiseState,
};
use odl_kernels::{
    plan_tiles, run_tiled, ConvSpec, Dims, ElemType, ExecConfig, KernelVariant, LayerState, Layout, Op, Phase, Step,
    Tensor, TilePlan,
};
use quanta::Instant;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{gate_failure, BenchError, Result};
use crate::gate;
use crate::harness::{count_ops, measure, Timing};
use crate::report::{PhaseReport, Record, RecordKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    ResNet8,
    DsCnn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::ResNet8 => "resnet8",
            ModelKind::DsCnn => "dscnn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "resnet8" | "resnet" => Ok(ModelKind::ResNet8),
            "dscnn" => Ok(ModelKind::DsCnn),
            other => Err(BenchError::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// Layer category used by the per-layer breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Pointwise,
    DepthWise,
    Fc,
    /// Activations, pooling, residual adds and the loss.
    Other,
}

impl From<Op> for LayerKind {
    fn from(op: Op) -> Self {
        match op {
            Op::Conv2d => LayerKind::Conv2d,
            Op::Pointwise => LayerKind::Pointwise,
            Op::Fc => LayerKind::Fc,
        }
    }
}

/// Time spent in one layer over a training step, forward and backward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTime {
    pub name: String,
    pub kind: LayerKind,
    #[serde(with = "nanos")]
    pub wall: Duration,
    #[serde(with = "nanos")]
    pub mm: Duration,
}

#[derive(Clone, Debug)]
pub struct ModelOptions {
    pub kind: ModelKind,
    pub layout: Layout,
    pub elem: ElemType,
    /// Kernel of the convolution and pointwise layers; per-op default if unset.
    pub variant: Option<KernelVariant>,
    /// Scratchpad budget; `None` runs every layer untiled.
    pub l1_bytes: Option<usize>,
    pub seed: u64,
    pub lr: f32,
}

impl ModelOptions {
    pub fn new(kind: ModelKind, layout: Layout, elem: ElemType) -> Self {
        Self {
            kind,
            layout,
            elem,
            variant: None,
            l1_bytes: Some(odl_kernels::tiling::DEFAULT_L1_BYTES),
            seed: 0,
            lr: 0.01,
        }
    }
}

/// Bookkeeping of one training step.
struct Ctx<'a> {
    cfg: &'a ExecConfig,
    peak: usize,
    layers: Vec<LayerTime>,
    grads: Option<Vec<(String, Vec<f32>)>>,
}

struct Mark {
    t0: Instant,
    mm: Duration,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a ExecConfig, keep_grads: bool) -> Self {
        Self { cfg, peak: 0, layers: Vec::new(), grads: keep_grads.then(Vec::new) }
    }

    fn start(&self) -> Mark {
        Mark { t0: Instant::now(), mm: self.cfg.trace().get(Phase::Mm).time }
    }

    fn stop(&mut self, m: Mark, name: &str, kind: LayerKind) {
        let wall = m.t0.elapsed();
        let mm = self.cfg.trace().get(Phase::Mm).time.saturating_sub(m.mm);
        match self.layers.iter_mut().find(|l| l.name == name) {
            Some(l) => {
                l.wall += wall;
                l.mm += mm;
            }
            None => self.layers.push(LayerTime { name: name.into(), kind, wall, mm }),
        }
    }

    /// Runs an activation, pooling or loss computation.
    fn other<R>(&mut self, f: impl FnOnce(&ExecConfig) -> Result<R>) -> Result<R> {
        let m = self.start();
        let r = f(self.cfg)?;
        self.stop(m, "other", LayerKind::Other);
        Ok(r)
    }
}

fn expect_shape(name: &str, t: &Tensor, c: usize, h: usize, w: usize) -> Result<()> {
    if t.dims() == Dims::activation(c, h, w) {
        Ok(())
    } else {
        Err(BenchError::Config(format!("{name}: expected {c}x{h}x{w}, got {:?}", t.dims())))
    }
}

/// Uniform weights scaled by `sqrt(3 / fan_in)` (unit-variance outputs).
fn init_weights(rng: &mut StdRng, dims: Dims, fan_in: usize) -> Result<Tensor> {
    let s = (3.0 / fan_in as f32).sqrt();
    let v: Vec<f32> = (0..dims.len()).map(|_| rng.gen_range(-s..=s)).collect();
    Ok(Tensor::weights_from_logical(dims, Layout::Chw, false, ElemType::F32, &v)?)
}

/// A convolution, pointwise or FC layer.
struct Conv {
    name: String,
    st: LayerState,
    plans: Option<Vec<TilePlan>>,
    /// The first layer needs no input gradient.
    input_grad: bool,
}

impl Conv {
    fn new(
        name: &str,
        op: Op,
        spec: ConvSpec,
        opts: &ModelOptions,
        rng: &mut StdRng,
        input_grad: bool,
    ) -> Result<Self> {
        let w = init_weights(rng, Dims::weight(spec.c_out, spec.c_in, spec.k_h, spec.k_w), spec.window_len())?;
        let mut st = LayerState::new(op, spec, opts.layout, opts.elem, &w)?;
        if let (Some(v), true) = (opts.variant, op != Op::Fc) {
            st.set_variant(v)?;
        }
        let plans = match opts.l1_bytes {
            Some(l1) => Some(Step::ALL.iter().map(|&s| plan_tiles(&st, s, l1)).collect::<odl_kernels::Result<_>>()?),
            None => None,
        };
        Ok(Self { name: name.into(), st, plans, input_grad })
    }

    fn run(&mut self, step: Step, input: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let cfg = ctx.cfg;
        Ok(match &self.plans {
            Some(plans) => {
                let plan = &plans[Step::ALL.iter().position(|&s| s == step).expect("known step")];
                let r = run_tiled(&mut self.st, input, plan, cfg)?;
                ctx.peak = ctx.peak.max(r.peak);
                r.output
            }
            None => match step {
                Step::Fw => self.st.forward(input, cfg)?,
                Step::BwIg => self.st.backward_input(input, cfg)?,
                Step::BwWg => self.st.backward_weight(input, cfg)?,
            },
        })
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let m = ctx.start();
        let y = self.run(Step::Fw, x, ctx)?;
        ctx.stop(m, &self.name, self.st.op().into());
        Ok(y)
    }

    /// Input gradient (if needed) with the current weights, then the update.
    fn backward(&mut self, dy: &Tensor, lr: f32, ctx: &mut Ctx) -> Result<Option<Tensor>> {
        let m = ctx.start();
        let dx = if self.input_grad { Some(self.run(Step::BwIg, dy, ctx)?) } else { None };
        let dw = self.run(Step::BwWg, dy, ctx)?;
        if let Some(g) = &mut ctx.grads {
            g.push((self.name.clone(), dw.to_logical()));
        }
        ctx.cfg.phase(Phase::Elementwise, || self.st.sgd_update(&dw, lr))?;
        ctx.stop(m, &self.name, self.st.op().into());
        Ok(dx)
    }
}

/// A depthwise layer, untiled, computed directly in the model's layout.
struct Depthwise {
    name: String,
    st: DepthwiseState,
}

impl Depthwise {
    fn new(name: &str, spec: ConvSpec, opts: &ModelOptions, rng: &mut StdRng) -> Result<Self> {
        let w = init_weights(rng, Dims::weight(spec.c_out, 1, spec.k_h, spec.k_w), spec.k_h * spec.k_w)?;
        Ok(Self { name: name.into(), st: DepthwiseState::new(spec, opts.elem, &w)? })
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let m = ctx.start();
        let y = self.st.forward(x, ctx.cfg)?;
        ctx.stop(m, &self.name, LayerKind::DepthWise);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor, lr: f32, ctx: &mut Ctx) -> Result<Tensor> {
        let m = ctx.start();
        let dx = self.st.backward_input(dy, ctx.cfg)?;
        let dw = self.st.backward_weight(dy, ctx.cfg)?;
        if let Some(g) = &mut ctx.grads {
            g.push((self.name.clone(), dw.to_logical()));
        }
        ctx.cfg.phase(Phase::Elementwise, || self.st.sgd_update(&dw, lr))?;
        ctx.stop(m, &self.name, LayerKind::DepthWise);
        Ok(dx)
    }
}

/// Softmax cross-entropy of `logits` (`classes x 1 x 1`); returns the loss
/// and its gradient.
fn softmax_loss(logits: &Tensor, label: usize, cfg: &ExecConfig) -> Result<(f32, Tensor)> {
    cfg.phase(Phase::Elementwise, || {
        let z = logits.to_logical();
        let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f32 = e.iter().sum();
        let loss = sum.ln() - (z[label] - max);
        let g: Vec<f32> = e.iter().enumerate().map(|(i, v)| v / sum - f32::from(u8::from(i == label))).collect();
        Ok((loss, Tensor::from_logical(logits.dims(), logits.layout(), logits.elem(), &g)?))
    })
}

/// Two 3x3 convolutions with a residual connection. Downsampling blocks
/// pool first and take a pointwise shortcut.
struct ResBlock {
    pool: bool,
    a: Conv,
    b: Conv,
    shortcut: Option<Conv>,
    saved: Vec<Tensor>,
}

impl ResBlock {
    fn forward(&mut self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let p = if self.pool { ctx.other(|cfg| Ok(avg_pool(x, 2, cfg)?))? } else { x.clone() };
        let za = self.a.forward(&p, ctx)?;
        let aa = ctx.other(|cfg| Ok(relu(&za, cfg)?))?;
        let zb = self.b.forward(&aa, ctx)?;
        let sc = match &mut self.shortcut {
            Some(s) => s.forward(&p, ctx)?,
            None => p.clone(),
        };
        let s = ctx.other(|cfg| Ok(add(&zb, &sc, cfg)?))?;
        let out = ctx.other(|cfg| Ok(relu(&s, cfg)?))?;
        self.saved = vec![za, s];
        Ok(out)
    }

    fn backward(&mut self, dout: &Tensor, lr: f32, ctx: &mut Ctx) -> Result<Tensor> {
        let [za, s] =
            <[Tensor; 2]>::try_from(std::mem::take(&mut self.saved)).map_err(|_| odl_kernels::Error::NoForward)?;
        let ds = ctx.other(|cfg| Ok(relu_backward(&s, dout, cfg)?))?;
        let daa = self.b.backward(&ds, lr, ctx)?.expect("inner layers propagate");
        let dza = ctx.other(|cfg| Ok(relu_backward(&za, &daa, cfg)?))?;
        let dp_main = self.a.backward(&dza, lr, ctx)?.expect("inner layers propagate");
        let dp_short = match &mut self.shortcut {
            Some(sc) => sc.backward(&ds, lr, ctx)?.expect("inner layers propagate"),
            None => ds,
        };
        let dp = ctx.other(|cfg| Ok(add(&dp_main, &dp_short, cfg)?))?;
        if self.pool {
            ctx.other(|cfg| Ok(avg_pool_backward(&dp, 2, cfg)?))
        } else {
            Ok(dp)
        }
    }
}

/// Input 3x32x32; stem conv to 16 channels, three residual stages of 16,
/// 32 and 64 channels at 32x32, 16x16 and 8x8, global pooling, FC to 10.
/// Layers are numbered as in the original: 1 stem, 2-3 stage one, 4-6
/// stage two (6 the shortcut), 7-9 stage three (9 the 32->64 shortcut).
struct ResNet8 {
    stem: Conv,
    blocks: Vec<ResBlock>,
    fc: Conv,
    saved_stem: Option<Tensor>,
}

impl ResNet8 {
    const CLASSES: usize = 10;

    fn new(opts: &ModelOptions, rng: &mut StdRng) -> Result<Self> {
        let conv = |name: &str, c_in, hw, c_out, rng: &mut StdRng, ig| {
            Conv::new(name, Op::Conv2d, ConvSpec::new(c_in, hw, hw, c_out, 3, 3, 1)?, opts, rng, ig)
        };
        let pw = |name: &str, c_in, hw, c_out, rng: &mut StdRng| {
            Conv::new(name, Op::Pointwise, ConvSpec::pointwise(c_in, hw, hw, c_out)?, opts, rng, true)
        };
        let stem = conv("L1 conv", 3, 32, 16, rng, false)?;
        let blocks = vec![
            ResBlock {
                pool: false,
                a: conv("L2 conv", 16, 32, 16, rng, true)?,
                b: conv("L3 conv", 16, 32, 16, rng, true)?,
                shortcut: None,
                saved: Vec::new(),
            },
            // strided conv of the original: pool 32x32 -> 16x16, then conv
            ResBlock {
                pool: true,
                a: conv("L4 conv", 16, 16, 32, rng, true)?,
                b: conv("L5 conv", 32, 16, 32, rng, true)?,
                shortcut: Some(pw("L6 pw", 16, 16, 32, rng)?),
                saved: Vec::new(),
            },
            // pool 16x16 -> 8x8
            ResBlock {
                pool: true,
                a: conv("L7 conv", 32, 8, 64, rng, true)?,
                b: conv("L8 conv", 64, 8, 64, rng, true)?,
                shortcut: Some(pw("L9 pw", 32, 8, 64, rng)?),
                saved: Vec::new(),
            },
        ];
        let fc = Conv::new("L10 fc", Op::Fc, ConvSpec::new(64, 1, 1, Self::CLASSES, 1, 1, 0)?, opts, rng, true)?;
        Ok(Self { stem, blocks, fc, saved_stem: None })
    }

    fn step(&mut self, x: &Tensor, label: usize, lr: f32, ctx: &mut Ctx) -> Result<f32> {
        expect_shape("input", x, 3, 32, 32)?;
        let z0 = self.stem.forward(x, ctx)?;
        let mut h = ctx.other(|cfg| Ok(relu(&z0, cfg)?))?;
        for (b, (c, hw)) in self.blocks.iter_mut().zip([(16, 32), (32, 16), (64, 8)]) {
            h = b.forward(&h, ctx)?;
            expect_shape("residual stage", &h, c, hw, hw)?;
        }
        let g = ctx.other(|cfg| Ok(global_avg_pool(&h, cfg)?))?;
        let logits = self.fc.forward(&g, ctx)?;
        expect_shape("logits", &logits, Self::CLASSES, 1, 1)?;
        let (loss, dlogits) = ctx.other(|cfg| softmax_loss(&logits, label, cfg))?;
        self.saved_stem = Some(z0);

        let dg = self.fc.backward(&dlogits, lr, ctx)?.expect("fc propagates");
        let mut dh = ctx.other(|cfg| Ok(global_avg_pool_backward(&dg, 8, 8, cfg)?))?;
        for b in self.blocks.iter_mut().rev() {
            dh = b.backward(&dh, lr, ctx)?;
        }
        let z0 = self.saved_stem.take().expect("saved above");
        let dz0 = ctx.other(|cfg| Ok(relu_backward(&z0, &dh, cfg)?))?;
        self.stem.backward(&dz0, lr, ctx)?;
        Ok(loss)
    }
}

/// Input 49x10 (padded to 50x10); pool and a 3x3 conv to 64x25x5 in place
/// of the original strided 10x4 conv; five depthwise-separable blocks
/// (3x3 depthwise, pointwise 64->64, each followed by ReLU); global
/// pooling and FC to 12 keywords.
struct DsCnn {
    conv: Conv,
    blocks: Vec<(Depthwise, Conv)>,
    fc: Conv,
}

impl DsCnn {
    const CLASSES: usize = 12;
    const BLOCKS: usize = 5;

    fn new(opts: &ModelOptions, rng: &mut StdRng) -> Result<Self> {
        let conv = Conv::new("L1 conv", Op::Conv2d, ConvSpec::new(1, 25, 5, 64, 3, 3, 1)?, opts, rng, false)?;
        let mut blocks = Vec::with_capacity(Self::BLOCKS);
        for i in 0..Self::BLOCKS {
            let dw = Depthwise::new(&format!("L{} dw", 2 + 2 * i), ConvSpec::new(64, 25, 5, 64, 3, 3, 1)?, opts, rng)?;
            let pw = Conv::new(
                &format!("L{} pw", 3 + 2 * i),
                Op::Pointwise,
                ConvSpec::pointwise(64, 25, 5, 64)?,
                opts,
                rng,
                true,
            )?;
            blocks.push((dw, pw));
        }
        let fc = Conv::new("L12 fc", Op::Fc, ConvSpec::new(64, 1, 1, Self::CLASSES, 1, 1, 0)?, opts, rng, true)?;
        Ok(Self { conv, blocks, fc })
    }

    fn step(&mut self, x: &Tensor, label: usize, lr: f32, ctx: &mut Ctx) -> Result<f32> {
        expect_shape("input", x, 1, 50, 10)?;
        let p = ctx.other(|cfg| Ok(avg_pool(x, 2, cfg)?))?;
        let z = self.conv.forward(&p, ctx)?;
        let mut saved = vec![z.clone()];
        let mut h = ctx.other(|cfg| Ok(relu(&z, cfg)?))?;
        for (dw, pw) in &mut self.blocks {
            let zd = dw.forward(&h, ctx)?;
            let ad = ctx.other(|cfg| Ok(relu(&zd, cfg)?))?;
            let zp = pw.forward(&ad, ctx)?;
            h = ctx.other(|cfg| Ok(relu(&zp, cfg)?))?;
            expect_shape("separable block", &h, 64, 25, 5)?;
            saved.push(zd);
            saved.push(zp);
        }
        let g = ctx.other(|cfg| Ok(global_avg_pool(&h, cfg)?))?;
        let logits = self.fc.forward(&g, ctx)?;
        expect_shape("logits", &logits, Self::CLASSES, 1, 1)?;
        let (loss, dlogits) = ctx.other(|cfg| softmax_loss(&logits, label, cfg))?;

        let dg = self.fc.backward(&dlogits, lr, ctx)?.expect("fc propagates");
        let mut dh = ctx.other(|cfg| Ok(global_avg_pool_backward(&dg, 25, 5, cfg)?))?;
        for (dw, pw) in self.blocks.iter_mut().rev() {
            let zp = saved.pop().expect("saved in forward");
            let zd = saved.pop().expect("saved in forward");
            let dzp = ctx.other(|cfg| Ok(relu_backward(&zp, &dh, cfg)?))?;
            let dad = pw.backward(&dzp, lr, ctx)?.expect("pointwise propagates");
            let dzd = ctx.other(|cfg| Ok(relu_backward(&zd, &dad, cfg)?))?;
            dh = dw.backward(&dzd, lr, ctx)?;
        }
        let z = saved.pop().expect("saved in forward");
        let dz = ctx.other(|cfg| Ok(relu_backward(&z, &dh, cfg)?))?;
        self.conv.backward(&dz, lr, ctx)?;
        Ok(loss)
    }
}

enum Net {
    ResNet8(Box<ResNet8>),
    DsCnn(Box<DsCnn>),
}

/// A model with its synthetic training sample.
pub struct Model {
    opts: ModelOptions,
    net: Net,
    x: Tensor,
    label: usize,
}

/// Outcome of one training step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f32,
    /// Peak scratchpad bytes of any tiled layer run.
    pub peak: usize,
    pub layers: Vec<LayerTime>,
    /// Logical weight gradients in backward order, when requested.
    pub grads: Vec<(String, Vec<f32>)>,
}

impl Model {
    /// Weights and the sample depend only on the seed and the model kind.
    pub fn new(opts: ModelOptions) -> Result<Self> {
        let mut rng = StdRng::seed_from_u64(opts.seed);
        let (net, dims, classes) = match opts.kind {
            ModelKind::ResNet8 => {
                (Net::ResNet8(Box::new(ResNet8::new(&opts, &mut rng)?)), Dims::activation(3, 32, 32), ResNet8::CLASSES)
            }
            ModelKind::DsCnn => {
                (Net::DsCnn(Box::new(DsCnn::new(&opts, &mut rng)?)), Dims::activation(1, 50, 10), DsCnn::CLASSES)
            }
        };
        let mut v: Vec<f32> = (0..dims.len()).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        if opts.kind == ModelKind::DsCnn {
            // 49 feature frames; the 50th row is zero padding for the pool
            v[49 * 10..].fill(0.0);
        }
        let x = Tensor::from_logical(dims, opts.layout, opts.elem, &v)?;
        let label = rng.gen_range(0..classes);
        Ok(Self { opts, net, x, label })
    }

    pub fn options(&self) -> &ModelOptions {
        &self.opts
    }

    /// Forward, backward and SGD update on the sample.
    pub fn train_step(&mut self, cfg: &ExecConfig, keep_grads: bool) -> Result<StepOutcome> {
        let mut ctx = Ctx::new(cfg, keep_grads);
        let lr = self.opts.lr;
        let loss = match &mut self.net {
            Net::ResNet8(n) => n.step(&self.x, self.label, lr, &mut ctx)?,
            Net::DsCnn(n) => n.step(&self.x, self.label, lr, &mut ctx)?,
        };
        Ok(StepOutcome { loss, peak: ctx.peak, layers: ctx.layers, grads: ctx.grads.unwrap_or_default() })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelBench {
    pub kind: ModelKind,
    pub layout: Layout,
    pub elem: ElemType,
    pub workers: usize,
    pub l1_bytes: Option<usize>,
    /// One training step, median of the repetitions.
    pub report: PhaseReport,
    pub layers: Vec<LayerTime>,
    /// Loss before each of the SGD steps.
    pub losses: Vec<f32>,
    pub peak: usize,
    /// Largest normwise difference between tiled and untiled gradients.
    pub gate_error: f64,
}

impl ModelBench {
    /// Fraction of the step's wall time spent in layers of `kind`.
    pub fn kind_share(&self, kind: LayerKind) -> f64 {
        let t: Duration = self.layers.iter().filter(|l| l.kind == kind).map(|l| l.wall).sum();
        t.as_secs_f64() / self.report.wall.as_secs_f64().max(1e-12)
    }

    pub fn loss_decreases(&self) -> bool {
        self.losses.windows(2).all(|w| w[1] < w[0])
    }

    pub fn record(&self, variant: &str, reps: usize) -> Record {
        let case = self.kind.to_string();
        let elem = self.elem.to_string();
        let layout = self.layout.to_string();
        Record::new(
            RecordKey {
                case: &case,
                step: "train",
                elem: &elem,
                layout: &layout,
                variant,
                workers: self.workers,
                reps,
            },
            &self.report,
        )
    }
}

/// Gates the tiled model against the untiled one, records an SGD loss
/// curve of `steps` steps, then times single training steps.
pub fn bench_model(opts: &ModelOptions, base: &ExecConfig, timing: Timing, steps: usize) -> Result<ModelBench> {
    let untiled_opts = ModelOptions { l1_bytes: None, ..opts.clone() };
    let tiled = Model::new(opts.clone())?.train_step(base, true)?;
    let reference = Model::new(untiled_opts)?.train_step(base, true)?;
    let tol = gate::tolerance(opts.elem);
    let mut gate_error = f64::from((tiled.loss - reference.loss).abs() / reference.loss.abs().max(1e-12));
    for ((name, g), (_, r)) in tiled.grads.iter().zip(&reference.grads) {
        let e = gate::rel_error(g, &gate::widen(r));
        gate_error = gate_error.max(e);
        if e.is_nan() || e > tol {
            return Err(gate_failure(
                format!("{} {} {}", opts.kind, opts.layout, opts.elem),
                format!("{name}: tiled and untiled gradients differ by {e:.3e}"),
            ));
        }
    }
    if let Some(l1) = opts.l1_bytes {
        if tiled.peak > l1 {
            return Err(gate_failure(opts.kind.to_string(), format!("peak {} B over the {l1} B budget", tiled.peak)));
        }
    }

    let mut model = Model::new(opts.clone())?;
    let mut losses = Vec::with_capacity(steps);
    let mut peak = tiled.peak;
    for _ in 0..steps {
        let o = model.train_step(base, false)?;
        if !o.loss.is_finite() {
            return Err(gate_failure(opts.kind.to_string(), format!("loss became {}", o.loss)));
        }
        losses.push(o.loss);
        peak = peak.max(o.peak);
    }

    let (_, counted) = count_ops(base, |cfg| model.train_step(cfg, false))?;
    let m = measure(base, timing, |cfg| model.train_step(cfg, false))?;
    let ops = counted.total_ops();
    let report = PhaseReport { wall: m.wall, trace: m.trace, ops, macs: ops.mac, bytes_in: 0, bytes_out: 0 };
    Ok(ModelBench {
        kind: opts.kind,
        layout: opts.layout,
        elem: opts.elem,
        workers: base.workers(),
        l1_bytes: opts.l1_bytes,
        report,
        layers: m.value.layers,
        losses,
        peak: peak.max(m.value.peak),
        gate_error,
    })
}

mod nanos {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_nanos() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_nanos)
    }
}
