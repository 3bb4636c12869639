#![no_main]
use gazeforge::commands::Command;
use gazeforge::manifest::{self, RunManifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(m) = serde_json::from_slice::<RunManifest>(data) else {
        return;
    };
    assert!(manifest::compare(&m.artifacts, &m.artifacts).is_empty());
    if let Ok(cmd) = serde_json::from_value::<Command>(m.invocation) {
        let _ = cmd.inputs();
        let _ = cmd.seed();
    }
});
