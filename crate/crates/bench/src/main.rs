use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use odl_bench::layer::read_configs;
use odl_bench::mm::default_cases;
use odl_bench::models::{LayerKind, ModelOptions};
use odl_bench::report::write_csv;
use odl_bench::{
    bench_layer, bench_layout, bench_mm, bench_model, table3, BenchError, LayerConfig, MmCase, ModelKind, Record,
    Timing,
};
use odl_kernels::{ElemType, ExecConfig, KernelVariant, Layout, Phase};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bench", about = "Kernel, layer and model benchmarks with correctness gates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Element type; both when omitted.
    #[arg(long, global = true)]
    elem: Option<ElemType>,
    /// Activation layout (ignored by `mm` and `layout`).
    #[arg(long, global = true, default_value = "hwc")]
    layout: Layout,
    /// Kernel variant, e.g. mm-2x4 or mm_t-1x2-lanes2; defaults per layer.
    #[arg(long, global = true)]
    variant: Option<KernelVariant>,
    /// Worker counts, comma separated.
    #[arg(long, global = true, value_delimiter = ',', default_value = "1")]
    workers: Vec<usize>,
    /// Scratchpad budget in bytes.
    #[arg(long, global = true, default_value_t = 65536)]
    l1_bytes: usize,
    #[arg(long, global = true, default_value_t = 5)]
    reps: usize,
    #[arg(long, global = true, default_value_t = 1)]
    warmup: usize,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write CSV records here instead of stdout.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    /// Write full reports as JSON.
    #[arg(long, global = true)]
    json: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Microkernel sweep.
    Mm {
        /// Sizes as NxKxM, comma separated.
        #[arg(long, value_delimiter = ',')]
        dims: Vec<String>,
    },
    /// Per-step breakdown of layer cases.
    Layer(Cases),
    /// HWC against CHW on the same cases.
    Layout(Cases),
    /// Training steps of a whole model.
    Model {
        /// resnet8 or dscnn; both when omitted.
        #[arg(long)]
        model: Option<ModelKind>,
        /// SGD steps of the loss curve.
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f32,
        /// Run every layer untiled.
        #[arg(long)]
        untiled: bool,
    },
}

#[derive(Args)]
struct Cases {
    /// Built-in case names (CONV1..CONV4, PW CONV); all when omitted.
    #[arg(long = "case")]
    cases: Vec<String>,
    /// JSON file with one layer config or an array of them.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn elems(&self) -> Vec<ElemType> {
        self.elem.map_or_else(|| vec![ElemType::F32, ElemType::F16], |e| vec![e])
    }

    fn timing(&self) -> anyhow::Result<Timing> {
        Ok(Timing::new(self.warmup, self.reps)?)
    }

    fn configs(&self) -> Vec<ExecConfig> {
        self.workers.iter().map(|&w| ExecConfig::new(w.max(1))).collect()
    }
}

fn parse_dims(s: &str) -> anyhow::Result<(usize, usize, usize)> {
    let v: Vec<usize> =
        s.split('x').map(str::parse).collect::<Result<_, _>>().with_context(|| format!("dims `{s}`"))?;
    match v[..] {
        [n, k, m] if n > 0 && k > 0 && m > 0 => Ok((n, k, m)),
        _ => bail!("dims `{s}`: expected NxKxM"),
    }
}

fn select_cases(common: &Common, cases: &Cases) -> anyhow::Result<Vec<LayerConfig>> {
    let mut out = Vec::new();
    if let Some(path) = &cases.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut configs = read_configs(&text)?;
        if let Some(e) = common.elem {
            configs.iter_mut().for_each(|c| c.elem = e);
        }
        out.extend(configs);
    }
    if cases.config.is_none() || !cases.cases.is_empty() {
        for elem in common.elems() {
            for c in table3(common.layout, elem) {
                if cases.cases.is_empty() || cases.cases.iter().any(|n| n.eq_ignore_ascii_case(&c.name)) {
                    out.push(c);
                }
            }
        }
        if out.is_empty() {
            bail!("no case matches {:?}", cases.cases);
        }
    }
    if let Some(v) = common.variant {
        out.iter_mut().for_each(|c| c.variant = Some(v));
    }
    Ok(out)
}

fn emit(common: &Common, records: &[Record], json: &impl Serialize) -> anyhow::Result<()> {
    match &common.csv {
        Some(path) => write_csv(File::create(path).with_context(|| format!("creating {}", path.display()))?, records)?,
        None => write_csv(io::stdout().lock(), records)?,
    }
    if let Some(path) = &common.json {
        serde_json::to_writer_pretty(File::create(path)?, json)?;
    }
    Ok(())
}

fn pct(x: f64) -> String {
    format!("{:5.1}%", 100.0 * x)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = &cli.common;
    let timing = common.timing()?;
    let mut err = io::stderr().lock();
    match &cli.command {
        Command::Mm { dims } => {
            let mut cases = default_cases(&common.workers);
            if !dims.is_empty() {
                let want: Vec<_> = dims.iter().map(|d| parse_dims(d)).collect::<anyhow::Result<_>>()?;
                cases = want
                    .iter()
                    .flat_map(|&(n, k, m)| {
                        [ElemType::F32, ElemType::F16].into_iter().flat_map(move |elem| {
                            KernelVariant::all(elem).into_iter().flat_map(move |variant| {
                                common.workers.iter().map(move |&workers| MmCase { n, k, m, elem, variant, workers })
                            })
                        })
                    })
                    .collect();
            }
            cases.retain(|c| common.elem.is_none_or(|e| e == c.elem));
            if let Some(v) = common.variant {
                cases.retain(|c| c.variant == v || c.variant == KernelVariant::NAIVE);
            }
            let results = bench_mm(&cases, timing, common.seed)?;
            for r in &results {
                let c = &r.case;
                writeln!(
                    err,
                    "{:<18} {} {:<16} w={} {:>10.3} us {:>8.1} MMAC/s util {:.2}{}{}{}",
                    c.name(),
                    c.elem,
                    c.variant.to_string(),
                    c.workers,
                    r.report.wall.as_secs_f64() * 1e6,
                    r.report.mac_per_s() / 1e6,
                    r.counters.inner_utilization(),
                    r.speedup_vs_naive.map(|s| format!(" x{s:.2} naive")).unwrap_or_default(),
                    r.speedup_vs_one_worker
                        .filter(|_| c.workers > 1)
                        .map(|s| format!(" x{s:.2} 1-worker"))
                        .unwrap_or_default(),
                    r.speedup_vs_f32_2x4.map(|s| format!(" x{s:.2} f32-2x4")).unwrap_or_default(),
                )?;
            }
            let records: Vec<Record> = results.iter().map(|r| r.record(common.reps)).collect();
            emit(common, &records, &results)?;
        }
        Command::Layer(cases) => {
            let mut benches = Vec::new();
            for cfg in common.configs() {
                for c in select_cases(common, cases)? {
                    let b = bench_layer(&c, &cfg, common.l1_bytes, timing, common.seed)?;
                    for s in &b.steps {
                        let r = &s.report;
                        writeln!(
                            err,
                            "{:<8} {} {} {:<6} {:>9.1} us  mm {} im2col {} transpose {} copy {}  cover {}  tiles {:>3} peak {:>6} B",
                            c.name,
                            c.elem,
                            c.layout,
                            s.step.to_string(),
                            r.wall.as_secs_f64() * 1e6,
                            pct(r.mm_share()),
                            pct(r.transform_share()),
                            pct(r.share(Phase::Transpose)),
                            pct(r.share(Phase::Copy)),
                            pct(r.coverage()),
                            s.tiles,
                            s.peak,
                        )?;
                    }
                    benches.push(b);
                }
            }
            let records: Vec<Record> = benches.iter().flat_map(|b| b.records(common.reps)).collect();
            emit(common, &records, &benches)?;
        }
        Command::Layout(cases) => {
            let mut comps = Vec::new();
            for cfg in common.configs() {
                for c in select_cases(common, cases)? {
                    let cmp = bench_layout(&c, &cfg, common.l1_bytes, timing, common.seed)?;
                    for r in &cmp.ratios {
                        writeln!(
                            err,
                            "{:<8} {} {:<6} HWC/CHW total {:.2} mm {:.2} im2col {:.2} transpose {:.2} copy {:.2}",
                            c.name, c.elem, r.step, r.total, r.mm, r.im2col, r.transpose, r.copy
                        )?;
                    }
                    comps.push(cmp);
                }
            }
            let records: Vec<Record> =
                comps.iter().flat_map(|c| [c.hwc.records(common.reps), c.chw.records(common.reps)].concat()).collect();
            emit(common, &records, &comps)?;
        }
        Command::Model { model, steps, lr, untiled } => {
            let kinds = model.map_or_else(|| vec![ModelKind::ResNet8, ModelKind::DsCnn], |k| vec![k]);
            let mut benches = Vec::new();
            let mut records = Vec::new();
            for cfg in common.configs() {
                for &kind in &kinds {
                    for elem in common.elems() {
                        let mut opts = ModelOptions::new(kind, common.layout, elem);
                        opts.variant = common.variant;
                        opts.l1_bytes = (!untiled).then_some(common.l1_bytes);
                        opts.seed = common.seed;
                        opts.lr = *lr;
                        let b = bench_model(&opts, &cfg, timing, *steps)?;
                        writeln!(
                            err,
                            "{kind} {elem} {} w={}: {:.3} ms  mm {}  conv {}  pw {}  dw {}  peak {} B  loss {:?}",
                            common.layout,
                            cfg.workers(),
                            b.report.wall.as_secs_f64() * 1e3,
                            pct(b.report.mm_share()),
                            pct(b.kind_share(LayerKind::Conv2d)),
                            pct(b.kind_share(LayerKind::Pointwise)),
                            pct(b.kind_share(LayerKind::DepthWise)),
                            b.peak,
                            b.losses,
                        )?;
                        let variant = common.variant.map_or_else(|| "default".to_string(), |v| v.to_string());
                        records.push(b.record(&variant, common.reps));
                        benches.push(b);
                    }
                }
            }
            emit(common, &records, &benches)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<BenchError>() {
                Some(BenchError::Gate { .. }) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
