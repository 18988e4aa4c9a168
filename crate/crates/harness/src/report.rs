//! Per-op records, their CSV form, and the aggregate summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::HarnessError;

/// One row per replayed op.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricsRecord {
    pub index: u64,
    pub op: char,
    pub reads: u64,
    pub writes: u64,
    /// Blocks a query would read from an empty cache; equals
    /// `reads + writes` for updates.
    pub cold: u64,
    /// Keys reported by a range query.
    pub k: u64,
    /// Running sum of `reads + writes`.
    pub cumulative: u64,
    /// Largest `reads + writes` of any op so far.
    pub max_per_op: u64,
    pub height: u64,
    pub leaves: u64,
    pub overfull: u64,
}

impl MetricsRecord {
    pub fn io(&self) -> u64 {
        self.reads + self.writes
    }
}

pub const CSV_HEADER: [&str; 11] = [
    "op", "kind", "reads", "writes", "cold", "k", "cumulative", "max_per_op", "height", "leaves", "overfull",
];

/// Streams records to CSV. The header is written up front, so an empty
/// run still yields a header-only file.
pub struct CsvSink<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(w: W) -> Result<Self, HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        Ok(CsvSink { out })
    }

    pub fn push(&mut self, r: &MetricsRecord) -> Result<(), HarnessError> {
        let fields = [
            r.index, 0, r.reads, r.writes, r.cold, r.k, r.cumulative, r.max_per_op, r.height, r.leaves, r.overfull,
        ];
        let mut row: Vec<String> = fields.iter().map(u64::to_string).collect();
        row[1] = r.op.to_string();
        self.out.write_record(&row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, HarnessError> {
        self.out.flush()?;
        self.out.into_inner().map_err(|e| HarnessError::Io(e.into_error()))
    }
}

/// Distribution of per-op I/O for one class of ops.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Agg {
    pub count: u64,
    pub total: u64,
    pub max: u64,
    /// Largest cold-cache cost, for queries.
    pub max_cold: u64,
    hist: BTreeMap<u64, u64>,
}

impl Agg {
    fn add(&mut self, io: u64, cold: u64) {
        self.count += 1;
        self.total += io;
        self.max = self.max.max(io);
        self.max_cold = self.max_cold.max(cold);
        *self.hist.entry(io).or_default() += 1;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total as f64 / self.count as f64
        }
    }

    /// Nearest-rank percentile, `q` in `(0, 1]`.
    pub fn percentile(&self, q: f64) -> u64 {
        let rank = ((q * self.count as f64).ceil() as u64).max(1);
        let mut seen = 0;
        for (&v, &c) in &self.hist {
            seen += c;
            if seen >= rank {
                return v;
            }
        }
        0
    }
}

/// Aggregates over a run, with the fitted constants:
/// `k_io` is the largest I/O charged to one update, `c_q` the smallest
/// constant with `cold <= c_q * (logBN + k/B)` for every query seen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub updates: Agg,
    pub preds: Agg,
    pub ranges: Agg,
    pub k_io: u64,
    pub c_q: f64,
    pub c_q_range: f64,
    pub total_io: u64,
}

impl Summary {
    pub fn add(&mut self, r: &MetricsRecord, log_b_n: u64, block: u64) {
        self.total_io += r.io();
        match r.op {
            'I' | 'D' => {
                self.updates.add(r.io(), r.cold);
                self.k_io = self.k_io.max(r.io());
            }
            'P' | 'R' => {
                let bound = log_b_n as f64 + r.k as f64 / block as f64;
                let c = r.cold as f64 / bound;
                self.c_q = self.c_q.max(c);
                if r.op == 'P' {
                    self.preds.add(r.io(), r.cold);
                } else {
                    self.c_q_range = self.c_q_range.max(c);
                    self.ranges.add(r.io(), r.cold);
                }
            }
            _ => {}
        }
    }

    pub fn ops(&self) -> u64 {
        self.updates.count + self.preds.count + self.ranges.count
    }

    /// Aligned text table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>10} {:>12} {:>10} {:>8} {:>8} {:>9}", "class", "ops", "total_io", "mean", "p99.9", "max", "max_cold");
        for (name, a) in [("update", &self.updates), ("pred", &self.preds), ("range", &self.ranges)] {
            let _ = writeln!(
                s,
                "{:<8} {:>10} {:>12} {:>10.4} {:>8} {:>8} {:>9}",
                name,
                a.count,
                a.total,
                a.mean(),
                a.percentile(0.999),
                a.max,
                a.max_cold
            );
        }
        let _ = writeln!(s, "total_io {}  k_io {}  c_q {:.3}  c_q(range) {:.3}", self.total_io, self.k_io, self.c_q, self.c_q_range);
        s
    }
}

/// FNV-1a over the sorted keys, little-endian.
pub fn digest(keys: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for k in keys {
        for b in k.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(index: u64, op: char, reads: u64, writes: u64, k: u64) -> MetricsRecord {
        MetricsRecord { index, op, reads, writes, cold: reads + writes, k, ..Default::default() }
    }

    #[test]
    fn empty_run_gives_header_only() {
        let out = CsvSink::new(Vec::new()).unwrap().finish().unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "op,kind,reads,writes,cold,k,cumulative,max_per_op,height,leaves,overfull\n");
    }

    #[test]
    fn three_records_by_hand() {
        let mut sink = CsvSink::new(Vec::new()).unwrap();
        let rows = [
            MetricsRecord { cumulative: 1, max_per_op: 1, height: 1, leaves: 1, ..rec(0, 'I', 1, 0, 0) },
            MetricsRecord { cumulative: 1, max_per_op: 1, height: 1, leaves: 1, ..rec(1, 'P', 0, 0, 0) },
            MetricsRecord { cumulative: 3, max_per_op: 2, height: 2, leaves: 3, overfull: 1, ..rec(2, 'R', 2, 0, 7) },
        ];
        for r in &rows {
            sink.push(r).unwrap();
        }
        let text = String::from_utf8(sink.finish().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "0,I,1,0,1,0,1,1,1,1,0");
        assert_eq!(lines[2], "1,P,0,0,0,0,1,1,1,1,0");
        assert_eq!(lines[3], "2,R,2,0,2,7,3,2,2,3,1");
    }

    #[test]
    fn percentile_is_nearest_rank() {
        let mut a = Agg::default();
        for v in 0..1000 {
            a.add(v, v);
        }
        assert_eq!(a.percentile(0.999), 998);
        assert_eq!(a.percentile(1.0), 999);
        assert_eq!(a.percentile(0.5), 499);
        a.add(5000, 5000);
        assert_eq!(a.percentile(0.999), 999);
        assert_eq!(a.max, 5000);
    }

    #[test]
    fn fitted_constants() {
        let mut s = Summary::default();
        s.add(&rec(0, 'I', 1, 1, 0), 3, 256);
        s.add(&rec(1, 'P', 6, 0, 0), 3, 256);
        s.add(&rec(2, 'R', 8, 0, 256), 3, 256);
        assert_eq!(s.k_io, 2);
        assert!((s.c_q - 2.0).abs() < 1e-12);
        assert!((s.c_q_range - 2.0).abs() < 1e-12);
        assert_eq!(s.total_io, 16);
        assert!(s.table().contains("k_io 2"));
    }

    #[test]
    fn digest_depends_on_content() {
        assert_eq!(digest(&[1, 2, 3]), digest(&[1, 2, 3]));
        assert_ne!(digest(&[1, 2, 3]), digest(&[1, 2, 4]));
        assert_ne!(digest(&[]), digest(&[0]));
    }
}
