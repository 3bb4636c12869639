#![no_main]
use gazeforge::gzt;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // The encoding is canonical, so anything that decodes re-encodes to itself.
    if let Ok(t) = gzt::decode(data) {
        assert_eq!(gzt::encode(&t), data);
    }
    if let Ok(all) = gzt::decode_all(data) {
        let joined: Vec<u8> = all.iter().flat_map(gzt::encode).collect();
        assert_eq!(joined, data);
    }
});
