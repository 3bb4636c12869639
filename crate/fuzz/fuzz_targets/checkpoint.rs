#![no_main]
use gazeforge::params::{CheckpointManifest, NetworkParams};
use libfuzzer_sys::fuzz_target;

// Input is the manifest JSON, a zero byte, then the tensor container.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(manifest) = serde_json::from_slice::<CheckpointManifest>(&data[..split]) else {
        return;
    };
    let blob = data.get(split + 1..).unwrap_or_default();
    if let Ok(p) = NetworkParams::from_manifest_blob(&manifest, blob) {
        assert_eq!(p.len(), manifest.tensors.len());
    }
});
