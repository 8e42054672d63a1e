use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Transfer {
    pub count: u64,
    pub bytes: u64,
}

impl Transfer {
    pub(crate) fn record(&mut self, bytes: u64) {
        self.count += 1;
        self.bytes += bytes;
    }
}

/// Host↔arena traffic and the byte flows needed to audit residency.
///
/// Every counter only grows. At any quiescent point
/// `uploads.bytes − restored_bytes + produced_bytes − released_bytes − delivered_bytes`
/// equals the bytes resident in the arena plus the bytes held in the spill
/// store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TransferLedger {
    /// host → arena, including spill restores
    pub uploads: Transfer,
    /// arena → host, including spills
    pub downloads: Transfer,
    pub serializations: u64,
    pub deserializations: u64,
    /// results computed inside the arena
    pub produced_bytes: u64,
    /// freed by `release`, whether resident or spilled
    pub released_bytes: u64,
    /// uncached results handed to the host and dropped from the arena
    pub delivered_bytes: u64,
    /// spill traffic, a subset of `downloads`
    pub spilled: Transfer,
    /// restore traffic, a subset of `uploads`
    pub restored: Transfer,
}

impl TransferLedger {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ledger serializes")
    }

    /// Counter-wise difference `self − earlier`.
    pub fn since(&self, earlier: &TransferLedger) -> TransferLedger {
        let t = |a: Transfer, b: Transfer| Transfer {
            count: a.count - b.count,
            bytes: a.bytes - b.bytes,
        };
        TransferLedger {
            uploads: t(self.uploads, earlier.uploads),
            downloads: t(self.downloads, earlier.downloads),
            serializations: self.serializations - earlier.serializations,
            deserializations: self.deserializations - earlier.deserializations,
            produced_bytes: self.produced_bytes - earlier.produced_bytes,
            released_bytes: self.released_bytes - earlier.released_bytes,
            delivered_bytes: self.delivered_bytes - earlier.delivered_bytes,
            spilled: t(self.spilled, earlier.spilled),
            restored: t(self.restored, earlier.restored),
        }
    }

    /// Left side of the conservation identity.
    pub fn accounted_bytes(&self) -> i128 {
        self.uploads.bytes as i128 - self.restored.bytes as i128 + self.produced_bytes as i128
            - self.released_bytes as i128
            - self.delivered_bytes as i128
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let mut l = TransferLedger::default();
        l.uploads.record(10);
        let v: serde_json::Value = serde_json::from_str(&l.to_json()).unwrap();
        assert_eq!(v["uploads"]["count"], 1);
        assert_eq!(v["uploads"]["bytes"], 10);
        assert_eq!(v["downloads"]["bytes"], 0);
    }

    #[test]
    fn difference() {
        let mut a = TransferLedger::default();
        a.downloads.record(5);
        let mut b = a;
        b.downloads.record(7);
        b.serializations += 2;
        let d = b.since(&a);
        assert_eq!(d.downloads, Transfer { count: 1, bytes: 7 });
        assert_eq!(d.serializations, 2);
    }
}
