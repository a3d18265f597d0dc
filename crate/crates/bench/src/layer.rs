//! Per-step breakdowns of single layers and the HWC/CHW comparison.

use odl_kernels::{
    plan_tiles, run_tiled, ConvSpec, Dims, ElemType, ExecConfig, KernelVariant, LayerState, Layout, Op, Phase, Step,
    Tensor,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{gate_failure, BenchError, Result};
use crate::gate;
use crate::harness::{count_ops, measure, Timing};
use crate::report::{PhaseReport, Record, RecordKey};

/// A layer benchmark case, as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    #[serde(default)]
    pub name: String,
    pub op: Op,
    pub layout: Layout,
    pub elem: ElemType,
    #[serde(rename = "C_I")]
    pub c_in: usize,
    #[serde(rename = "H_I")]
    pub h_in: usize,
    #[serde(rename = "W_I")]
    pub w_in: usize,
    #[serde(rename = "C_O")]
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub pad: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<KernelVariant>,
}

impl LayerConfig {
    pub fn spec(&self) -> Result<ConvSpec> {
        let spec = ConvSpec::new(self.c_in, self.h_in, self.w_in, self.c_out, self.k_h, self.k_w, self.pad)?;
        self.op.check_spec(&spec)?;
        Ok(spec)
    }

    pub fn variant(&self) -> KernelVariant {
        self.variant.unwrap_or_else(|| LayerState::default_variant(self.op, self.elem))
    }

    pub fn with(&self, layout: Layout, elem: ElemType) -> Self {
        Self { layout, elem, ..self.clone() }
    }

    fn label(&self) -> String {
        if self.name.is_empty() {
            format!("{}-{}x{}x{}-{}-k{}", self.op, self.c_in, self.h_in, self.w_in, self.c_out, self.k_h)
        } else {
            self.name.clone()
        }
    }
}

/// The ResNet8 tile shapes: CONV1-3 are tiles of the 16- and 32-channel
/// layers, CONV4 a tile of the single-channel input layer, PW CONV the
/// 1x1 shortcut.
pub fn table3(layout: Layout, elem: ElemType) -> Vec<LayerConfig> {
    let conv = |name: &str, c_in, hw, c_out| LayerConfig {
        name: name.into(),
        op: Op::Conv2d,
        layout,
        elem,
        c_in,
        h_in: hw,
        w_in: hw,
        c_out,
        k_h: 3,
        k_w: 3,
        pad: 1,
        variant: None,
    };
    vec![
        conv("CONV1", 16, 8, 16),
        conv("CONV2", 16, 4, 32),
        conv("CONV3", 8, 16, 8),
        conv("CONV4", 1, 8, 16),
        LayerConfig { op: Op::Pointwise, k_h: 1, k_w: 1, pad: 0, ..conv("PW CONV", 32, 8, 64) },
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct StepBench {
    pub step: Step,
    pub tiles: usize,
    /// Peak scratchpad bytes reserved by the tiled run.
    pub peak: usize,
    /// Normwise error of the gated output against the reference.
    pub gate_error: f64,
    pub report: PhaseReport,
}

/// Logical outputs of the gated runs.
#[derive(Clone, Debug, Default, Serialize)]
pub struct StepOutputs {
    pub y: Vec<f32>,
    pub dx: Vec<f32>,
    pub dw: Vec<f32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerBench {
    pub config: LayerConfig,
    pub variant: KernelVariant,
    pub workers: usize,
    pub l1_bytes: usize,
    pub steps: Vec<StepBench>,
    /// The three steps together.
    pub train: PhaseReport,
    #[serde(skip)]
    pub outputs: StepOutputs,
}

impl LayerBench {
    pub fn step(&self, step: Step) -> &StepBench {
        self.steps.iter().find(|s| s.step == step).expect("every step is benchmarked")
    }

    pub fn records(&self, reps: usize) -> Vec<Record> {
        let case = self.config.label();
        let elem = self.config.elem.to_string();
        let layout = self.config.layout.to_string();
        let variant = self.variant.to_string();
        let key = |step: &'static str| RecordKey {
            case: &case,
            step,
            elem: &elem,
            layout: &layout,
            variant: &variant,
            workers: self.workers,
            reps,
        };
        let mut out: Vec<Record> = self
            .steps
            .iter()
            .map(|s| {
                let name = match s.step {
                    Step::Fw => "fw",
                    Step::BwIg => "bw-ig",
                    Step::BwWg => "bw-wg",
                };
                Record::new(key(name), &s.report)
            })
            .collect();
        out.push(Record::new(key("train"), &self.train));
        out
    }
}

/// Seeded uniform `[-1, 1]` values.
pub fn uniform(rng: &mut StdRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()
}

struct Inputs {
    x: Tensor,
    w: Tensor,
    dy: Tensor,
}

/// Data depends on the seed and the logical shape only, so every layout and
/// variant of a case sees the same values.
fn inputs(config: &LayerConfig, spec: &ConvSpec, seed: u64) -> Result<Inputs> {
    let mut rng = StdRng::seed_from_u64(seed);
    let (layout, elem) = (config.layout, config.elem);
    let x = uniform(&mut rng, spec.c_in * spec.h_in * spec.w_in);
    let w = uniform(&mut rng, spec.weight_len());
    let dy = uniform(&mut rng, spec.c_out * spec.h_out() * spec.w_out());
    Ok(Inputs {
        x: Tensor::from_logical(Dims::activation(spec.c_in, spec.h_in, spec.w_in), layout, elem, &x)?,
        w: Tensor::weights_from_logical(
            Dims::weight(spec.c_out, spec.c_in, spec.k_h, spec.k_w),
            layout,
            LayerState::canonical_transposed(layout, elem),
            elem,
            &w,
        )?,
        dy: Tensor::from_logical(Dims::activation(spec.c_out, spec.h_out(), spec.w_out()), layout, elem, &dy)?,
    })
}

/// Gates every step of the tiled layer against the reference, then times
/// each step as the median of `timing.reps` runs.
pub fn bench_layer(
    config: &LayerConfig,
    base: &ExecConfig,
    l1_bytes: usize,
    timing: Timing,
    seed: u64,
) -> Result<LayerBench> {
    let spec = config.spec()?;
    let variant = config.variant();
    let data = inputs(config, &spec, seed)?;
    let mut st = LayerState::new(config.op, spec, config.layout, config.elem, &data.w)?.with_variant(variant)?;

    let (x, w, dy) = (
        gate::widen(&data.x.to_logical()),
        gate::widen(&st.weights().to_logical()),
        gate::widen(&data.dy.to_logical()),
    );
    let want = [
        gate::conv_forward(&spec, &x, &w),
        gate::conv_input_grad(&spec, &w, &dy),
        gate::conv_weight_grad(&spec, &x, &dy),
    ];
    let tol = gate::tolerance(config.elem);
    let mut outputs = StepOutputs::default();
    let mut steps = Vec::with_capacity(3);
    let mut train = PhaseReport::default();

    for (i, step) in Step::ALL.into_iter().enumerate() {
        let plan = plan_tiles(&st, step, l1_bytes)?;
        let input = if step == Step::Fw { &data.x } else { &data.dy };
        let (run, counted) = count_ops(base, |cfg| Ok(run_tiled(&mut st, input, &plan, cfg)?))?;
        let got = run.output.to_logical();
        let gate_error = gate::rel_error(&got, &want[i]);
        if gate_error.is_nan() || gate_error > tol {
            return Err(gate_failure(
                format!("{} {} {} {step}", config.label(), config.layout, config.elem),
                format!("relative error {gate_error:.3e} exceeds {tol:.0e}"),
            ));
        }
        if run.peak > l1_bytes {
            return Err(gate_failure(config.label(), format!("peak {} B over the {l1_bytes} B budget", run.peak)));
        }
        match step {
            Step::Fw => outputs.y = got,
            Step::BwIg => outputs.dx = got,
            Step::BwWg => outputs.dw = got,
        }

        // Outputs are dropped inside each repetition so later ones reuse the
        // same memory instead of faulting in fresh pages.
        let m = measure(base, timing, |cfg| run_tiled(&mut st, input, &plan, cfg).map(drop).map_err(Into::into))?;
        let report = PhaseReport {
            wall: m.wall,
            trace: m.trace,
            ops: counted.total_ops(),
            macs: spec.macs(),
            bytes_in: run.log.bytes_in,
            bytes_out: run.log.bytes_out,
        };
        train.merge(&report);
        steps.push(StepBench { step, tiles: plan.len(), peak: run.peak, gate_error, report });
    }
    Ok(LayerBench { config: config.clone(), variant, workers: base.workers(), l1_bytes, steps, train, outputs })
}

/// HWC over CHW time ratios of one step (or the whole train step).
#[derive(Clone, Debug, Serialize)]
pub struct LayoutRatio {
    pub step: String,
    pub total: f64,
    pub mm: f64,
    pub im2col: f64,
    pub transpose: f64,
    pub copy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayoutComparison {
    pub hwc: LayerBench,
    pub chw: LayerBench,
    /// Normwise difference of the logical outputs `[y, dx, dw]`.
    pub agreement: [f64; 3],
    pub ratios: Vec<LayoutRatio>,
}

impl LayoutComparison {
    pub fn ratio(&self, step: &str) -> Option<&LayoutRatio> {
        self.ratios.iter().find(|r| r.step == step)
    }
}

fn ratio(a: &PhaseReport, b: &PhaseReport, phase: Option<Phase>) -> f64 {
    let (x, y) = match phase {
        Some(p) => (a.time(p), b.time(p)),
        None => (a.wall, b.wall),
    };
    if y.is_zero() {
        if x.is_zero() {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        x.as_secs_f64() / y.as_secs_f64()
    }
}

fn layout_ratio(step: &str, h: &PhaseReport, c: &PhaseReport) -> LayoutRatio {
    LayoutRatio {
        step: step.into(),
        total: ratio(h, c, None),
        mm: ratio(h, c, Some(Phase::Mm)),
        im2col: ratio(h, c, Some(Phase::Im2Col)),
        transpose: ratio(h, c, Some(Phase::Transpose)),
        copy: ratio(h, c, Some(Phase::Copy)),
    }
}

/// Runs `config` in both layouts on the same logical data, checks that the
/// outputs agree, and reports per-phase HWC/CHW ratios.
pub fn bench_layout(
    config: &LayerConfig,
    base: &ExecConfig,
    l1_bytes: usize,
    timing: Timing,
    seed: u64,
) -> Result<LayoutComparison> {
    let hwc = bench_layer(&config.with(Layout::Hwc, config.elem), base, l1_bytes, timing, seed)?;
    let chw = bench_layer(&config.with(Layout::Chw, config.elem), base, l1_bytes, timing, seed)?;
    let tol = gate::tolerance(config.elem);
    let pairs =
        [(&hwc.outputs.y, &chw.outputs.y), (&hwc.outputs.dx, &chw.outputs.dx), (&hwc.outputs.dw, &chw.outputs.dw)];
    let mut agreement = [0.0; 3];
    for (slot, (h, c)) in agreement.iter_mut().zip(pairs) {
        *slot = gate::rel_error(h, &gate::widen(c));
        if slot.is_nan() || *slot > tol {
            return Err(gate_failure(
                format!("{} {}", config.label(), config.elem),
                format!("HWC and CHW outputs differ by {slot:.3e}"),
            ));
        }
    }
    let mut ratios: Vec<LayoutRatio> = hwc
        .steps
        .iter()
        .zip(&chw.steps)
        .map(|(h, c)| layout_ratio(&h.step.to_string(), &h.report, &c.report))
        .collect();
    ratios.push(layout_ratio("train", &hwc.train, &chw.train));
    Ok(LayoutComparison { hwc, chw, agreement, ratios })
}

/// Reads one config or an array of configs.
pub fn read_configs(json: &str) -> Result<Vec<LayerConfig>> {
    let v: serde_json::Value = serde_json::from_str(json)?;
    let configs: Vec<LayerConfig> =
        if v.is_array() { serde_json::from_value(v)? } else { vec![serde_json::from_value(v)?] };
    if configs.is_empty() {
        return Err(BenchError::Config("no layer configs".into()));
    }
    Ok(configs)
}
