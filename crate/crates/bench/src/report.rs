//! Phase breakdowns and the CSV schema.

use std::io::Write;
use std::time::Duration;

use odl_kernels::{OpCounts, Phase, PhaseTrace};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Where the wall time of one measured run went.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    #[serde(with = "nanos")]
    pub wall: Duration,
    pub trace: PhaseTrace,
    /// Operation counts from a separate counting run.
    pub ops: OpCounts,
    pub macs: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

impl PhaseReport {
    fn fraction(&self, t: Duration) -> f64 {
        let wall = self.wall.as_secs_f64();
        if wall == 0.0 {
            0.0
        } else {
            t.as_secs_f64() / wall
        }
    }

    pub fn time(&self, phase: Phase) -> Duration {
        self.trace.get(phase).time
    }

    /// Fraction of the wall time spent in `phase`.
    pub fn share(&self, phase: Phase) -> f64 {
        self.fraction(self.time(phase))
    }

    pub fn mm_share(&self) -> f64 {
        self.share(Phase::Mm)
    }

    /// Im2Row / Im2Col share of the wall time.
    pub fn transform_share(&self) -> f64 {
        self.share(Phase::Im2Col)
    }

    /// Fraction of the wall time attributed to some phase.
    pub fn coverage(&self) -> f64 {
        self.fraction(self.trace.total_time())
    }

    pub fn mac_per_s(&self) -> f64 {
        let s = self.wall.as_secs_f64();
        if s == 0.0 {
            0.0
        } else {
            self.macs as f64 / s
        }
    }

    pub fn utilization(&self) -> f64 {
        self.ops.utilization()
    }

    /// Sums two reports of consecutive runs.
    pub fn merge(&mut self, other: &PhaseReport) {
        self.wall += other.wall;
        self.trace.merge(&other.trace);
        self.ops += other.ops;
        self.macs += other.macs;
        self.bytes_in += other.bytes_in;
        self.bytes_out += other.bytes_out;
    }
}

/// One CSV row. The column order is the header order and is stable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub case: String,
    pub step: String,
    pub elem: String,
    pub layout: String,
    pub variant: String,
    pub workers: usize,
    pub reps: usize,
    pub total_ns: u128,
    pub mm_ns: u128,
    pub im2col_ns: u128,
    pub transpose_ns: u128,
    pub copy_ns: u128,
    /// Depthwise and elementwise work.
    pub other_ns: u128,
    pub macs: u64,
    pub mac_ops: u64,
    pub loads: u64,
    pub stores: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub mac_per_s: f64,
    pub utilization: f64,
    pub mm_share: f64,
}

pub const CSV_HEADER: [&str; 22] = [
    "case",
    "step",
    "elem",
    "layout",
    "variant",
    "workers",
    "reps",
    "total_ns",
    "mm_ns",
    "im2col_ns",
    "transpose_ns",
    "copy_ns",
    "other_ns",
    "macs",
    "mac_ops",
    "loads",
    "stores",
    "bytes_in",
    "bytes_out",
    "mac_per_s",
    "utilization",
    "mm_share",
];

/// Identifies a record apart from its measurements.
#[derive(Clone, Debug)]
pub struct RecordKey<'a> {
    pub case: &'a str,
    pub step: &'a str,
    pub elem: &'a str,
    pub layout: &'a str,
    pub variant: &'a str,
    pub workers: usize,
    pub reps: usize,
}

impl Record {
    pub fn new(key: RecordKey<'_>, r: &PhaseReport) -> Self {
        let ns = |p| r.time(p).as_nanos();
        Self {
            case: key.case.to_owned(),
            step: key.step.to_owned(),
            elem: key.elem.to_owned(),
            layout: key.layout.to_owned(),
            variant: key.variant.to_owned(),
            workers: key.workers,
            reps: key.reps,
            total_ns: r.wall.as_nanos(),
            mm_ns: ns(Phase::Mm),
            im2col_ns: ns(Phase::Im2Col),
            transpose_ns: ns(Phase::Transpose),
            copy_ns: ns(Phase::Copy),
            other_ns: ns(Phase::DepthWise) + ns(Phase::Elementwise),
            macs: r.macs,
            mac_ops: r.ops.mac,
            loads: r.ops.load,
            stores: r.ops.store,
            bytes_in: r.bytes_in,
            bytes_out: r.bytes_out,
            mac_per_s: r.mac_per_s(),
            utilization: r.utilization(),
            mm_share: r.mm_share(),
        }
    }
}

/// Writes the header and `records`. The header is written even when empty.
pub fn write_csv<W: Write>(out: W, records: &[Record]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
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
