//! Per-phase, per-party byte accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::NetResult;
use crate::message::PhaseTag;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Traffic {
    pub sent: u64,
    pub received: u64,
}

/// Byte counters keyed by `(message type, party id)`; party 0 collects
/// traffic from connections that never completed a handshake.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ByteReport {
    rows: BTreeMap<(PhaseTag, u32), Traffic>,
}

impl ByteReport {
    pub fn record_sent(&mut self, tag: PhaseTag, party: u32, bytes: u64) {
        self.rows.entry((tag, party)).or_default().sent += bytes;
    }

    pub fn record_received(&mut self, tag: PhaseTag, party: u32, bytes: u64) {
        self.rows.entry((tag, party)).or_default().received += bytes;
    }

    pub fn rows(&self) -> impl Iterator<Item = (PhaseTag, u32, Traffic)> + '_ {
        self.rows.iter().map(|(&(t, p), &c)| (t, p, c))
    }

    pub fn total(&self) -> Traffic {
        self.rows.values().fold(Traffic::default(), |a, c| Traffic {
            sent: a.sent + c.sent,
            received: a.received + c.received,
        })
    }

    pub fn party_total(&self, party: u32) -> Traffic {
        self.rows
            .iter()
            .filter(|((_, p), _)| *p == party)
            .fold(Traffic::default(), |a, (_, c)| Traffic {
                sent: a.sent + c.sent,
                received: a.received + c.received,
            })
    }

    pub fn phase_total(&self, tag: PhaseTag) -> Traffic {
        self.rows
            .iter()
            .filter(|((t, _), _)| *t == tag)
            .fold(Traffic::default(), |a, (_, c)| Traffic {
                sent: a.sent + c.sent,
                received: a.received + c.received,
            })
    }

    /// Same traffic seen from the other end of each connection.
    pub fn mirrored(&self) -> ByteReport {
        ByteReport {
            rows: self
                .rows
                .iter()
                .map(|(&k, c)| {
                    (
                        k,
                        Traffic {
                            sent: c.received,
                            received: c.sent,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn merge(&mut self, other: &ByteReport) {
        for (&k, c) in &other.rows {
            let e = self.rows.entry(k).or_default();
            e.sent += c.sent;
            e.received += c.received;
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("phase\tparty\tsent\treceived\n");
        for (t, p, c) in self.rows() {
            let _ = writeln!(s, "{}\t{p}\t{}\t{}", t.name(), c.sent, c.received);
        }
        s
    }

    pub fn write_tsv(&self, path: &Path) -> NetResult<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}
