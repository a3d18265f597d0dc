//! Execution configuration: worker pool, deterministic row chunking,
//! F16 accumulation mode and optional phase tracing.

use std::fmt;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use quanta::Instant;
use rayon::{ThreadPool, ThreadPoolBuilder};
use serde::{Deserialize, Serialize};

use crate::profile::{OpCounts, Phase, PhaseStat, PhaseTrace};

/// Accumulator precision of 16-bit kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccMode {
    /// Every multiply-accumulate rounds to the element type.
    #[default]
    Native,
    /// Accumulate in f32 and round once when storing.
    F32,
}

/// How kernels and transforms run: `workers` contiguous chunks of the
/// outermost loop, worker `w` owning rows `[w*ceil(N/P), min((w+1)*ceil(N/P), N))`.
#[derive(Clone)]
pub struct ExecConfig {
    workers: usize,
    acc: AccMode,
    count_ops: bool,
    pool: Option<Arc<ThreadPool>>,
    trace: Option<Arc<Counters>>,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self::new(1)
    }
}

impl fmt::Debug for ExecConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExecConfig")
            .field("workers", &self.workers)
            .field("acc", &self.acc)
            .field("count_ops", &self.count_ops)
            .field("tracing", &self.trace.is_some())
            .finish()
    }
}

impl ExecConfig {
    /// Panics if `workers` is zero or the thread pool cannot be created.
    pub fn new(workers: usize) -> Self {
        assert!(workers >= 1, "at least one worker is required");
        let pool = (workers > 1).then(|| {
            Arc::new(
                ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .thread_name(|i| format!("odl-worker-{i}"))
                    .build()
                    .expect("failed to build worker pool"),
            )
        });
        Self { workers, acc: AccMode::Native, count_ops: false, pool, trace: None }
    }

    pub fn with_acc(mut self, acc: AccMode) -> Self {
        self.acc = acc;
        self
    }

    /// Makes kernels count MACs, loads and stores into the trace.
    pub fn with_op_counting(mut self, on: bool) -> Self {
        self.count_ops = on;
        self
    }

    /// Starts a fresh phase trace shared by clones of this config.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Arc::default());
        self
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn acc(&self) -> AccMode {
        self.acc
    }

    pub fn counts_ops(&self) -> bool {
        self.count_ops
    }

    /// Contiguous row ranges, one per worker that has work.
    pub fn chunks(&self, n: usize) -> Vec<Range<usize>> {
        chunk_ranges(n, self.workers)
    }

    /// Splits `out` (`n_rows` rows of `row_len`) into the worker chunks and
    /// runs `f(rows, chunk)` on each; results come back in chunk order.
    pub fn split_rows<T, R, F>(&self, out: &mut [T], row_len: usize, n_rows: usize, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(Range<usize>, &mut [T]) -> R + Sync,
    {
        debug_assert_eq!(out.len(), row_len * n_rows);
        let ranges = self.chunks(n_rows);
        match &self.pool {
            Some(pool) if ranges.len() > 1 && row_len > 0 => {
                let mut results: Vec<Option<R>> = (0..ranges.len()).map(|_| None).collect();
                let per = ranges[0].len() * row_len;
                pool.scope(|s| {
                    for ((range, chunk), slot) in
                        ranges.iter().cloned().zip(out.chunks_mut(per)).zip(results.iter_mut())
                    {
                        let f = &f;
                        s.spawn(move |_| *slot = Some(f(range, chunk)));
                    }
                });
                results.into_iter().map(|r| r.expect("worker finished")).collect()
            }
            _ => {
                let mut rest = out;
                let mut results = Vec::with_capacity(ranges.len());
                for range in ranges {
                    let (chunk, tail) = rest.split_at_mut(range.len() * row_len);
                    results.push(f(range, chunk));
                    rest = tail;
                }
                results
            }
        }
    }

    /// Runs `f`, charging its wall time to `phase` when tracing.
    pub fn phase<R>(&self, phase: Phase, f: impl FnOnce() -> R) -> R {
        match &self.trace {
            None => f(),
            Some(trace) => {
                let t0 = Instant::now();
                let r = f();
                let dt = Instant::now().duration_since(t0);
                let c = &trace.0[phase as usize];
                c.nanos.fetch_add(dt.as_nanos() as u64, Ordering::Relaxed);
                c.calls.fetch_add(1, Ordering::Relaxed);
                r
            }
        }
    }

    pub fn record_ops(&self, phase: Phase, ops: OpCounts) {
        if let Some(trace) = &self.trace {
            let c = &trace.0[phase as usize];
            c.mac.fetch_add(ops.mac, Ordering::Relaxed);
            c.load.fetch_add(ops.load, Ordering::Relaxed);
            c.store.fetch_add(ops.store, Ordering::Relaxed);
        }
    }

    pub fn record_bytes(&self, phase: Phase, bytes: usize) {
        if let Some(trace) = &self.trace {
            trace.0[phase as usize].bytes.fetch_add(bytes as u64, Ordering::Relaxed);
        }
    }

    /// Snapshot of the trace (empty when tracing is off).
    pub fn trace(&self) -> PhaseTrace {
        self.trace.as_ref().map(|t| t.collect(|a| a.load(Ordering::Relaxed))).unwrap_or_default()
    }

    /// Returns the trace and resets it.
    pub fn take_trace(&self) -> PhaseTrace {
        self.trace.as_ref().map(|t| t.collect(|a| a.swap(0, Ordering::Relaxed))).unwrap_or_default()
    }
}

/// Lock-free per-phase accumulators behind a traced config.
#[derive(Default)]
struct Counters([PhaseCounters; 6]);

#[derive(Default)]
struct PhaseCounters {
    nanos: AtomicU64,
    calls: AtomicU64,
    mac: AtomicU64,
    load: AtomicU64,
    store: AtomicU64,
    bytes: AtomicU64,
}

impl Counters {
    fn collect(&self, read: impl Fn(&AtomicU64) -> u64) -> PhaseTrace {
        let mut trace = PhaseTrace::default();
        for (phase, c) in Phase::ALL.iter().zip(&self.0) {
            *trace.get_mut(*phase) = PhaseStat {
                time: Duration::from_nanos(read(&c.nanos)),
                calls: read(&c.calls),
                ops: OpCounts { mac: read(&c.mac), load: read(&c.load), store: read(&c.store) },
                bytes: read(&c.bytes),
            };
        }
        trace
    }
}

/// `[w*c, min((w+1)*c, n))` with `c = ceil(n / workers)`, empty chunks dropped.
pub fn chunk_ranges(n: usize, workers: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let per = n.div_ceil(workers.max(1));
    (0..workers).map(|w| (w * per).min(n)..((w + 1) * per).min(n)).filter(|r| !r.is_empty()).collect()
}
