//! Per-phase wall-time and operation accounting for training steps.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Instruction-level operation counts of a kernel run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub mac: u64,
    pub load: u64,
    pub store: u64,
}

impl OpCounts {
    /// `mac / (mac + load + store)`, the share of issued operations that are MACs.
    pub fn utilization(&self) -> f64 {
        let total = self.mac + self.load + self.store;
        if total == 0 {
            0.0
        } else {
            self.mac as f64 / total as f64
        }
    }
}

impl std::ops::AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.mac += rhs.mac;
        self.load += rhs.load;
        self.store += rhs.store;
    }
}

/// Work categories of a training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// MM / MM_T kernels.
    Mm,
    /// Im2Row / Im2Col.
    Im2Col,
    /// Matrix transposes and Block-Transpose.
    Transpose,
    /// Tile staging, padding and layout copies.
    Copy,
    /// Direct depthwise convolution (not lowered to MM).
    DepthWise,
    /// Activations, pooling, residual adds, loss and weight updates.
    Elementwise,
}

impl Phase {
    pub const ALL: [Phase; 6] =
        [Phase::Mm, Phase::Im2Col, Phase::Transpose, Phase::Copy, Phase::DepthWise, Phase::Elementwise];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Mm => "mm",
            Phase::Im2Col => "im2col",
            Phase::Transpose => "transpose",
            Phase::Copy => "copy",
            Phase::DepthWise => "depthwise",
            Phase::Elementwise => "elementwise",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseStat {
    #[serde(with = "duration_ns")]
    pub time: Duration,
    pub calls: u64,
    pub ops: OpCounts,
    /// Bytes written by the phase (transform outputs, staged tiles).
    pub bytes: u64,
}

/// Accumulated statistics of every phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrace {
    stats: [PhaseStat; 6],
}

impl PhaseTrace {
    pub fn get(&self, phase: Phase) -> &PhaseStat {
        &self.stats[phase.index()]
    }

    pub(crate) fn get_mut(&mut self, phase: Phase) -> &mut PhaseStat {
        &mut self.stats[phase.index()]
    }

    pub fn total_time(&self) -> Duration {
        self.stats.iter().map(|s| s.time).sum()
    }

    pub fn total_ops(&self) -> OpCounts {
        let mut ops = OpCounts::default();
        for s in &self.stats {
            ops += s.ops;
        }
        ops
    }

    /// Fraction of the traced time spent in `phase`.
    pub fn share(&self, phase: Phase) -> f64 {
        let total = self.total_time().as_secs_f64();
        if total == 0.0 {
            0.0
        } else {
            self.get(phase).time.as_secs_f64() / total
        }
    }

    pub fn merge(&mut self, other: &PhaseTrace) {
        for (a, b) in self.stats.iter_mut().zip(&other.stats) {
            a.time += b.time;
            a.calls += b.calls;
            a.ops += b.ops;
            a.bytes += b.bytes;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Phase, &PhaseStat)> {
        Phase::ALL.iter().map(move |&p| (p, self.get(p)))
    }
}

mod duration_ns {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_nanos() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_nanos(u64::deserialize(d)?))
    }
}
