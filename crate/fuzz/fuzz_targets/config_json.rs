#![no_main]
use gazeforge::commands::{AblateConfig, EvaluateConfig, PretrainRunConfig, StimulusList};
use gazeforge::fixation::DensityFitConfig;
use gazeforge::trainer::TrainRunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = serde_json::from_slice::<TrainRunConfig>(data) {
        let _ = c.validate();
    }
    if let Ok(c) = serde_json::from_slice::<DensityFitConfig>(data) {
        let _ = c.validate();
    }
    let _ = serde_json::from_slice::<PretrainRunConfig>(data);
    let _ = serde_json::from_slice::<EvaluateConfig>(data);
    let _ = serde_json::from_slice::<AblateConfig>(data);
    let _ = serde_json::from_slice::<StimulusList>(data);
});
