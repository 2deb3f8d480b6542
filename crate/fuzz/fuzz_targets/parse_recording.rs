#![no_main]

use libfuzzer_sys::fuzz_target;
use starspike::ingest::{parse_recording, ColumnMap, VoltageUnit};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // a successful parse must satisfy the recording invariants
    if let Ok(rec) = parse_recording(text, "fuzz", &ColumnMap::default(), VoltageUnit::Volt) {
        assert_eq!(rec.channels.len(), 8);
        assert!(rec.sample_rate > 0.0);
        for ch in &rec.channels {
            assert_eq!(ch.samples.len(), rec.len());
            for (v, ok) in ch.samples.iter().zip(&ch.validity_mask) {
                assert!(!ok || v.is_finite());
            }
        }
    }
});
