//! Every serialised stage input goes through the same envelope check; none
//! of them may panic on arbitrary text.

#![no_main]

use libfuzzer_sys::fuzz_target;
use starspike::pipeline::{
    from_json, AnalyzeOutput, DetectOutput, PropagateOutput, ReportBundle, ScoreOutput,
    TruthDocument,
};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = from_json::<DetectOutput>(s);
        let _ = from_json::<AnalyzeOutput>(s);
        let _ = from_json::<PropagateOutput>(s);
        let _ = from_json::<ReportBundle>(s);
        let _ = from_json::<ScoreOutput>(s);
        let _ = from_json::<TruthDocument>(s);
    }
});
