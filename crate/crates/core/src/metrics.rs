//! Primitive invocation counts and timings per role per session.
//!
//! Only protocol-level calls are counted: one DPUF evaluation per challenge,
//! the challenge-chain and own-pseudonym hashes, every AEAD encryption
//! (including verification by re-encryption), one classifier call and one
//! KDF extract per session. Hashes inside HKDF are not counted.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Primitive {
    Dpuf,
    Hash,
    AeadEnc,
    Dpan,
    Kdf,
}

impl Primitive {
    pub const ALL: [Primitive; 5] = [
        Primitive::Dpuf,
        Primitive::Hash,
        Primitive::AeadEnc,
        Primitive::Dpan,
        Primitive::Kdf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Dpuf => "DPUF",
            Primitive::Hash => "H",
            Primitive::AeadEnc => "AEAD.Enc",
            Primitive::Dpan => "DPAN",
            Primitive::Kdf => "KDF",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounter {
    pub dpuf: u32,
    pub hash: u32,
    pub aead_enc: u32,
    pub dpan: u32,
    pub kdf: u32,
}

/// Per-role cost of one completed session: 2 DPUF + 2 H + 2 AEAD.Enc +
/// 1 DPAN + 1 KDF.
pub const COMPLETED_SESSION: OpCounter = OpCounter {
    dpuf: 2,
    hash: 2,
    aead_enc: 2,
    dpan: 1,
    kdf: 1,
};

impl OpCounter {
    pub fn get(&self, p: Primitive) -> u32 {
        match p {
            Primitive::Dpuf => self.dpuf,
            Primitive::Hash => self.hash,
            Primitive::AeadEnc => self.aead_enc,
            Primitive::Dpan => self.dpan,
            Primitive::Kdf => self.kdf,
        }
    }

    fn slot(&mut self, p: Primitive) -> &mut u32 {
        match p {
            Primitive::Dpuf => &mut self.dpuf,
            Primitive::Hash => &mut self.hash,
            Primitive::AeadEnc => &mut self.aead_enc,
            Primitive::Dpan => &mut self.dpan,
            Primitive::Kdf => &mut self.kdf,
        }
    }
}

/// Counts plus accumulated wall time for one role in one session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpLog {
    counts: OpCounter,
    elapsed: [Duration; 5],
}

impl OpLog {
    pub fn measure<T>(&mut self, p: Primitive, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.elapsed[p.index()] += start.elapsed();
        *self.counts.slot(p) += 1;
        out
    }

    pub fn snapshot(&self) -> OpCounter {
        self.counts
    }

    pub fn elapsed(&self, p: Primitive) -> Duration {
        self.elapsed[p.index()]
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub primitive: &'static str,
    pub count: u64,
    pub mean_us: f64,
    pub total_us: f64,
}

/// Our own measured timings. Not a reproduction of any published figures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub sessions: usize,
    pub rows: Vec<TimingRow>,
    pub total_us: f64,
}

pub fn timing_report(sessions: &[OpLog]) -> TimingReport {
    let rows: Vec<TimingRow> = Primitive::ALL
        .iter()
        .map(|&p| {
            let count: u64 = sessions.iter().map(|s| s.counts.get(p) as u64).sum();
            let total: Duration = sessions.iter().map(|s| s.elapsed(p)).sum();
            let total_us = total.as_secs_f64() * 1e6;
            TimingRow {
                primitive: p.name(),
                count,
                mean_us: if count == 0 { 0.0 } else { total_us / count as f64 },
                total_us,
            }
        })
        .collect();
    let total_us = rows.iter().map(|r| r.total_us).sum();
    TimingReport {
        sessions: sessions.len(),
        rows,
        total_us,
    }
}

impl TimingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("primitive,count,mean_us,total_us\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.3},{:.3}", r.primitive, r.count, r.mean_us, r.total_us);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn completed() -> OpLog {
        let mut log = OpLog::default();
        for p in Primitive::ALL {
            for _ in 0..COMPLETED_SESSION.get(p) {
                log.measure(p, || std::thread::sleep(Duration::from_micros(20)));
            }
        }
        log
    }

    #[test]
    fn counts_follow_invocations() {
        let log = completed();
        assert_eq!(log.snapshot(), COMPLETED_SESSION);
        let mut log = log;
        log.reset();
        assert_eq!(log.snapshot(), OpCounter::default());
    }

    #[test]
    fn report_rows_and_arithmetic() {
        let logs = vec![completed(), completed(), completed()];
        let report = timing_report(&logs);
        assert_eq!(report.rows.len(), 5);
        assert!(report.rows.iter().all(|r| r.mean_us > 0.0));
        let recomposed: f64 = report.rows.iter().map(|r| r.count as f64 * r.mean_us).sum();
        assert!((recomposed - report.total_us).abs() <= 0.05 * report.total_us);
        assert_eq!(report.rows[0].count, 6);
        let csv = report.to_csv();
        assert!(csv.starts_with("primitive,count,mean_us,total_us\nDPUF,6,"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["rows"][4]["primitive"], "KDF");
    }
}
