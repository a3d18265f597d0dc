//! Microkernel sweeps over matrix sizes, variants and worker counts.

use std::collections::HashMap;
use std::time::Duration;

use half::f16;
use odl_kernels::kernels::matmul_counted;
use odl_kernels::{matmul, Elem, Form, KernelVariant, Unroll};
use odl_kernels::{transpose, ElemType, ExecConfig, Mat, OpCounters};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{gate_failure, Result};
use crate::harness::{measure, Timing};
use crate::report::{PhaseReport, Record, RecordKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MmCase {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub elem: ElemType,
    pub variant: KernelVariant,
    pub workers: usize,
}

impl MmCase {
    pub fn name(&self) -> String {
        format!("mm-{}x{}x{}", self.n, self.k, self.m)
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.k * self.m) as u64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MmResult {
    pub case: MmCase,
    pub report: PhaseReport,
    pub counters: OpCounters,
    /// Largest `|c - ref| / bound` seen by the gate.
    pub gate_ratio: f64,
    /// Against the naive `mm-1x1` kernel with the same sizes, elem and workers.
    pub speedup_vs_naive: Option<f64>,
    /// Against the same variant on one worker.
    pub speedup_vs_one_worker: Option<f64>,
    /// F16 only: against f32 `mm-2x4` with the same sizes and workers.
    pub speedup_vs_f32_2x4: Option<f64>,
}

impl MmResult {
    pub fn record(&self, reps: usize) -> Record {
        let c = &self.case;
        let variant = c.variant.to_string();
        let elem = c.elem.to_string();
        let name = c.name();
        Record::new(
            RecordKey {
                case: &name,
                step: "mm",
                elem: &elem,
                layout: "-",
                variant: &variant,
                workers: c.workers,
                reps,
            },
            &self.report,
        )
    }
}

/// The default sweep: every valid variant of both elem types on square sizes
/// (32 cubed is 32768 MACs) and on a deep `K = 256` product.
pub fn default_cases(workers: &[usize]) -> Vec<MmCase> {
    let dims = [(32, 32, 32), (64, 64, 64), (128, 128, 128), (64, 256, 64)];
    let mut cases = Vec::new();
    for &(n, k, m) in &dims {
        for elem in [ElemType::F32, ElemType::F16] {
            for variant in KernelVariant::all(elem) {
                for &workers in workers {
                    cases.push(MmCase { n, k, m, elem, variant, workers });
                }
            }
        }
    }
    cases
}

struct Operands<T> {
    a: Mat<T>,
    b: Mat<T>,
    bt: Mat<T>,
}

fn operands<T: Elem>(case: &MmCase, seed: u64) -> Result<Operands<T>> {
    let mut rng = StdRng::seed_from_u64(seed ^ ((case.n as u64) << 40 | (case.k as u64) << 20 | case.m as u64));
    let mut fill = |len: usize| (0..len).map(|_| T::from_f32(rng.gen_range(-1.0..=1.0))).collect::<Vec<T>>();
    let a = Mat::from_vec(case.n, case.k, fill(case.n * case.k))?;
    let b = Mat::from_vec(case.k, case.m, fill(case.k * case.m))?;
    let bt = transpose(b.view(), &ExecConfig::new(1));
    Ok(Operands { a, b, bt })
}

/// `max |c - ref| / (8 K eps sum |a b|)` over all outputs.
fn gate<T: Elem>(ops: &Operands<T>, c: &Mat<T>, eps: f64) -> f64 {
    let (n, k, m) = (ops.a.rows(), ops.a.cols(), ops.b.cols());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..m {
            let (mut exact, mut mag) = (0.0f64, 0.0f64);
            for p in 0..k {
                let t = ops.a.get(i, p).to_f32() as f64 * ops.b.get(p, j).to_f32() as f64;
                exact += t;
                mag += t.abs();
            }
            let err = (c.get(i, j).to_f32() as f64 - exact).abs();
            let bound = 8.0 * k as f64 * eps * mag + f64::from(f32::MIN_POSITIVE);
            worst = worst.max(err / bound);
        }
    }
    worst
}

fn run_case<T: Elem>(case: &MmCase, cfg: &ExecConfig, timing: Timing, seed: u64) -> Result<MmResult> {
    case.variant.validate(case.elem)?;
    let ops = operands::<T>(case, seed)?;
    let rhs = match case.variant.form {
        Form::Mm => &ops.b,
        Form::MmT => &ops.bt,
    };
    let (c, counters) = matmul_counted(ops.a.view(), rhs.view(), case.variant, cfg)?;
    let gate_ratio = gate(&ops, &c, case.elem.epsilon());
    if gate_ratio > 1.0 || counters.total.mac != case.macs() {
        return Err(gate_failure(
            format!("{} {} {}", case.name(), case.elem, case.variant),
            format!("error {gate_ratio:.3} of the bound, {} MACs counted for {}", counters.total.mac, case.macs()),
        ));
    }
    let m =
        measure(cfg, timing, |cfg| matmul(ops.a.view(), rhs.view(), case.variant, cfg).map(drop).map_err(Into::into))?;
    if matmul(ops.a.view(), rhs.view(), case.variant, cfg)? != c {
        return Err(gate_failure(case.name(), "timed run differs from the gated run"));
    }
    let report = PhaseReport {
        wall: m.wall,
        trace: m.trace,
        ops: counters.total,
        macs: case.macs(),
        bytes_in: ((ops.a.as_slice().len() + rhs.as_slice().len()) * T::BYTES) as u64,
        bytes_out: (c.as_slice().len() * T::BYTES) as u64,
    };
    Ok(MmResult {
        case: *case,
        report,
        counters,
        gate_ratio,
        speedup_vs_naive: None,
        speedup_vs_one_worker: None,
        speedup_vs_f32_2x4: None,
    })
}

/// Gates and times every case, then fills in the speedups whose baselines
/// are part of the sweep.
pub fn bench_mm(cases: &[MmCase], timing: Timing, seed: u64) -> Result<Vec<MmResult>> {
    let mut pools: HashMap<usize, ExecConfig> = HashMap::new();
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let cfg = pools.entry(case.workers).or_insert_with(|| ExecConfig::new(case.workers)).clone();
        out.push(match case.elem {
            ElemType::F32 => run_case::<f32>(case, &cfg, timing, seed)?,
            ElemType::F16 => run_case::<f16>(case, &cfg, timing, seed)?,
        });
    }
    let wall: HashMap<MmCase, Duration> = out.iter().map(|r| (r.case, r.report.wall)).collect();
    let ratio = |base: &MmCase, w: Duration| wall.get(base).map(|b| b.as_secs_f64() / w.as_secs_f64().max(1e-12));
    for r in &mut out {
        let c = r.case;
        r.speedup_vs_naive = ratio(&MmCase { variant: KernelVariant::NAIVE, ..c }, r.report.wall);
        r.speedup_vs_one_worker = ratio(&MmCase { workers: 1, ..c }, r.report.wall);
        if c.elem == ElemType::F16 {
            let base = MmCase { elem: ElemType::F32, variant: KernelVariant::mm(Unroll::U2x4), ..c };
            r.speedup_vs_f32_2x4 = ratio(&base, r.report.wall);
        }
    }
    Ok(out)
}
