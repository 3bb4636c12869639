#![no_main]
use gazeforge::fixation::{self, Subset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(recs) = fixation::parse_fixations(data, "fuzz") {
        for sel in [Subset::All, Subset::FirstFixation, Subset::FirstBlock] {
            assert!(fixation::subset(&recs, sel).len() <= recs.len());
        }
    }
});
