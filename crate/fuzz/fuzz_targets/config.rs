#![no_main]

use libfuzzer_sys::fuzz_target;
use starspike::config::ValueSource;
use starspike::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = PipelineConfig::from_toml(s) {
        // anything accepted must echo cleanly
        let _ = cfg.echo();
    }
    // same bytes as a command-line override
    let _ = PipelineConfig::default().set_assignment(s, ValueSource::Flag);
});
