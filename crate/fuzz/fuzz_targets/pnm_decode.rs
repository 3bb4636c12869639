#![no_main]
use gazeforge::pnm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = pnm::decode(data) {
        let again = pnm::decode(&pnm::encode(&p)).expect("encoded image decodes");
        assert_eq!(again, p);
        let t = p.to_tensor();
        assert_eq!(t.numel(), p.samples.len());
    }
});
