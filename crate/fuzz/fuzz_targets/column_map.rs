#![no_main]

use libfuzzer_sys::fuzz_target;
use starspike::ingest::ColumnMap;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = ColumnMap::parse(s);
    }
});
