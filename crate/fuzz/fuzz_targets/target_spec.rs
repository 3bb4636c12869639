#![no_main]
use gazeforge::target::TargetRequest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(r) = text.parse::<TargetRequest>() {
        let back: TargetRequest = r.to_string().parse().expect("display form parses");
        assert_eq!(back, r);
    }
});
