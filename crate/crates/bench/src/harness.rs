//! Repetition, warmup and median selection.

use std::time::Duration;

use odl_kernels::{ExecConfig, PhaseTrace};
use quanta::Instant;

use crate::error::{BenchError, Result};

/// Warmup runs are discarded; the reported repetition is the median one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timing {
    pub warmup: usize,
    pub reps: usize,
}

impl Timing {
    pub fn new(warmup: usize, reps: usize) -> Result<Self> {
        if reps < 3 {
            return Err(BenchError::TooFewReps(reps));
        }
        Ok(Self { warmup, reps })
    }
}

impl Default for Timing {
    fn default() -> Self {
        Self { warmup: 1, reps: 5 }
    }
}

/// The median repetition of a measurement.
#[derive(Clone, Debug)]
pub struct Measured<T> {
    pub wall: Duration,
    pub trace: PhaseTrace,
    pub value: T,
    /// Wall time of every repetition, in run order.
    pub samples: Vec<Duration>,
}

/// Runs `f` `warmup + reps` times, each with a fresh trace, and keeps the
/// repetition with the median wall time.
pub fn measure<T>(
    base: &ExecConfig,
    timing: Timing,
    mut f: impl FnMut(&ExecConfig) -> Result<T>,
) -> Result<Measured<T>> {
    Timing::new(timing.warmup, timing.reps)?;
    for _ in 0..timing.warmup {
        f(base)?;
    }
    let mut runs = Vec::with_capacity(timing.reps);
    for _ in 0..timing.reps {
        let cfg = base.clone().with_trace();
        let t0 = Instant::now();
        let value = f(&cfg)?;
        let wall = t0.elapsed();
        runs.push((wall, cfg.take_trace(), value));
    }
    let samples: Vec<Duration> = runs.iter().map(|r| r.0).collect();
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by_key(|&i| runs[i].0);
    let mid = order[order.len() / 2];
    let (wall, trace, value) = runs.swap_remove(mid);
    Ok(Measured { wall, trace, value, samples })
}

/// One untimed run with operation counting on; returns its trace.
pub fn count_ops<T>(base: &ExecConfig, f: impl FnOnce(&ExecConfig) -> Result<T>) -> Result<(T, PhaseTrace)> {
    let cfg = base.clone().with_op_counting(true).with_trace();
    let v = f(&cfg)?;
    Ok((v, cfg.take_trace()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use odl_kernels::Phase;

    #[test]
    fn rejects_fewer_than_three_reps() {
        assert!(matches!(Timing::new(0, 2), Err(BenchError::TooFewReps(2))));
        let cfg = ExecConfig::new(1);
        assert!(measure(&cfg, Timing { warmup: 0, reps: 1 }, |_| Ok(())).is_err());
    }

    #[test]
    fn picks_the_median_and_skips_warmup() {
        let cfg = ExecConfig::new(1);
        let mut n = 0u64;
        let delays = [0u64, 30, 1, 20, 10];
        let m = measure(&cfg, Timing { warmup: 2, reps: 3 }, |c| {
            let d = delays[n as usize];
            n += 1;
            c.phase(Phase::Mm, || std::thread::sleep(Duration::from_millis(d)));
            Ok(n)
        })
        .unwrap();
        assert_eq!(n, 5);
        assert_eq!(m.samples.len(), 3);
        // reps slept 1, 20 and 10 ms; the median is the fifth call
        assert_eq!(m.value, 5);
        assert_eq!(m.trace.get(Phase::Mm).calls, 1);
    }
}
