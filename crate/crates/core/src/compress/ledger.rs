//! Exact-versus-stored byte accounting.

use serde::{Deserialize, Serialize};

use super::StoredActivation;
use crate::linalg::Precision;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub rows: usize,
    pub cols: usize,
    /// Stored rank; `None` when the entry is kept exactly.
    pub k: Option<usize>,
    pub exact_bytes: u64,
    pub stored_bytes: u64,
}

/// One summary row, per label or the final `total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub label: String,
    pub rows: usize,
    pub cols: usize,
    pub k: Option<usize>,
    pub exact_bytes: u64,
    pub stored_bytes: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryLedger {
    entries: Vec<LedgerEntry>,
    exact_total: u64,
    stored_total: u64,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, label: &str, s: &StoredActivation) {
        self.push(LedgerEntry {
            label: label.to_string(),
            rows: s.shape.0,
            cols: s.shape.1,
            k: s.rank(),
            exact_bytes: s.exact_bytes,
            stored_bytes: s.stored_bytes,
        });
    }

    /// A small vector kept exactly alongside an activation, such as the
    /// per-row RMS of a normalization.
    pub fn record_vector(&mut self, label: &str, len: usize, precision: Precision) {
        let bytes = (len * precision.bytes_per_element()) as u64;
        self.push(LedgerEntry { label: label.to_string(), rows: len, cols: 1, k: None, exact_bytes: bytes, stored_bytes: bytes });
    }

    pub fn push(&mut self, entry: LedgerEntry) {
        self.exact_total += entry.exact_bytes;
        self.stored_total += entry.stored_bytes;
        self.entries.push(entry);
    }

    /// Appends every entry of `other`.
    pub fn merge(&mut self, other: MemoryLedger) {
        for e in other.entries {
            self.push(e);
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn exact_total(&self) -> u64 {
        self.exact_total
    }

    pub fn stored_total(&self) -> u64 {
        self.stored_total
    }

    /// `stored / exact`, or 1 for an empty ledger.
    pub fn compression_ratio(&self) -> f64 {
        if self.exact_total == 0 {
            1.0
        } else {
            self.stored_total as f64 / self.exact_total as f64
        }
    }

    /// One row per entry in recording order, then a `total` row.
    pub fn summary(&self) -> Vec<LedgerRow> {
        let mut rows: Vec<LedgerRow> = self
            .entries
            .iter()
            .map(|e| LedgerRow {
                label: e.label.clone(),
                rows: e.rows,
                cols: e.cols,
                k: e.k,
                exact_bytes: e.exact_bytes,
                stored_bytes: e.stored_bytes,
                ratio: if e.exact_bytes == 0 { 1.0 } else { e.stored_bytes as f64 / e.exact_bytes as f64 },
            })
            .collect();
        rows.push(LedgerRow {
            label: "total".into(),
            rows: 0,
            cols: 0,
            k: None,
            exact_bytes: self.exact_total,
            stored_bytes: self.stored_total,
            ratio: self.compression_ratio(),
        });
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{compress_activation, CompressionPolicy};
    use crate::linalg::{gaussian_matrix, SeededRng};

    #[test]
    fn empty_ledger() {
        let l = MemoryLedger::new();
        assert_eq!((l.exact_total(), l.stored_total()), (0, 0));
        assert_eq!(l.summary().len(), 1);
    }

    #[test]
    fn low_rank_entry_at_four_bytes() {
        let mut rng = SeededRng::new(1);
        let a = gaussian_matrix(&mut rng, 256, 512);
        let p = CompressionPolicy::lowrank(1.0 / 16.0).with_precision(Precision::F32);
        let s = compress_activation("x", &a, &p, &mut rng).unwrap();
        let mut l = MemoryLedger::new();
        l.record("x", &s);
        assert_eq!(l.stored_total(), 98304);
        assert_eq!(l.summary()[0].k, Some(32));
    }

    #[test]
    fn totals_are_sums() {
        let mut rng = SeededRng::new(2);
        let mut l = MemoryLedger::new();
        let (mut ex, mut st) = (0, 0);
        for i in 0..10 {
            let e = LedgerEntry {
                label: format!("e{i}"),
                rows: 1 + rng.below(100),
                cols: 1 + rng.below(100),
                k: None,
                exact_bytes: rng.below(10_000) as u64 + 1,
                stored_bytes: rng.below(10_000) as u64,
            };
            ex += e.exact_bytes;
            st += e.stored_bytes;
            l.push(e);
        }
        assert_eq!((l.exact_total(), l.stored_total()), (ex, st));
        let total = l.summary().pop().unwrap();
        assert_eq!((total.exact_bytes, total.stored_bytes), (ex, st));
    }
}
