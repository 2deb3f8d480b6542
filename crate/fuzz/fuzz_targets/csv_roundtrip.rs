#![no_main]

use libfuzzer_sys::fuzz_target;
use starspike::ingest::{parse_recording, write_recording_csv, ColumnMap, VoltageUnit};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let cols = ColumnMap::default();
    let Ok(rec) = parse_recording(text, "a", &cols, VoltageUnit::Millivolt) else {
        return;
    };
    // far from the origin or at extreme rates, elapsed times lose the
    // resolution needed to keep rows on distinct grid slots
    if rec.t0.abs() > 1e9 || !(1e-3..=1e3).contains(&rec.sample_rate) {
        return;
    }
    let mut out = Vec::new();
    write_recording_csv(&rec, &mut out).unwrap();
    let again = parse_recording(std::str::from_utf8(&out).unwrap(), "a", &cols, VoltageUnit::Millivolt)
        .expect("written recordings parse");
    assert_eq!(again.len(), rec.len());
    for (a, b) in rec.channels.iter().zip(&again.channels) {
        assert_eq!(a.validity_mask, b.validity_mask);
    }
});
