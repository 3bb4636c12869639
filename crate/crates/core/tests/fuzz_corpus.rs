//! Runs the checked-in fuzz seeds through the same checks as the fuzz targets.

use std::path::PathBuf;

use gazeforge::commands::{AblateConfig, Command, EvaluateConfig, PretrainRunConfig, StimulusList};
use gazeforge::fixation::{self, DensityFitConfig, Subset};
use gazeforge::manifest::{self, RunManifest};
use gazeforge::params::{CheckpointManifest, NetworkParams};
use gazeforge::target::TargetRequest;
use gazeforge::trainer::TrainRunConfig;
use gazeforge::{gzt, pnm};

/// `(file name, bytes)` for every seed of a target, sorted by name.
fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn accepted(target: &str, ok: impl Fn(&[u8]) -> bool) -> Vec<String> {
    seeds(target).into_iter().filter(|(_, d)| ok(d)).map(|(n, _)| n).collect()
}

#[test]
fn gzt_seeds() {
    let ok = accepted("gzt_decode", |data| {
        let one = gzt::decode(data).inspect(|t| assert_eq!(gzt::encode(t), data));
        let all = gzt::decode_all(data).inspect(|ts| {
            let joined: Vec<u8> = ts.iter().flat_map(gzt::encode).collect();
            assert_eq!(joined, data);
        });
        one.is_ok() || all.is_ok()
    });
    assert_eq!(ok, ["checkpoint_tensors", "plane_2x2", "scalar", "two_records"]);
}

#[test]
fn checkpoint_seeds() {
    let ok = accepted("checkpoint", |data| {
        let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
        let Ok(m) = serde_json::from_slice::<CheckpointManifest>(&data[..split]) else {
            return false;
        };
        let blob = data.get(split + 1..).unwrap_or_default();
        NetworkParams::from_manifest_blob(&m, blob).inspect(|p| assert_eq!(p.len(), m.tensors.len())).is_ok()
    });
    assert_eq!(ok, ["one_tensor", "saliency"]);
}

#[test]
fn pnm_seeds() {
    let ok = accepted("pnm_decode", |data| {
        let Ok(p) = pnm::decode(data) else {
            return false;
        };
        assert_eq!(pnm::decode(&pnm::encode(&p)).unwrap(), p);
        assert_eq!(p.to_tensor().numel(), p.samples.len());
        true
    });
    assert_eq!(ok, ["comment_p5", "img0000.ppm", "img0000_obj1.pgm", "wide_p6"]);
}

#[test]
fn fixation_seeds() {
    let ok = accepted("fixation_csv", |data| {
        let Ok(recs) = fixation::parse_fixations(data, "seed") else {
            return false;
        };
        for sel in [Subset::All, Subset::FirstFixation, Subset::FirstBlock] {
            assert!(fixation::subset(&recs, sel).len() <= recs.len());
        }
        true
    });
    assert_eq!(ok, ["basic", "durations"]);
}

#[test]
fn target_spec_seeds() {
    let ok = accepted("target_spec", |data| {
        let Ok(r) = std::str::from_utf8(data).unwrap().parse::<TargetRequest>() else {
            return false;
        };
        assert_eq!(r.to_string().parse::<TargetRequest>().unwrap(), r);
        true
    });
    assert_eq!(ok, ["spec0", "spec1", "spec2"]);
}

#[test]
fn config_seeds() {
    let ok = accepted("config_json", |d| {
        let parsed = [
            serde_json::from_slice::<TrainRunConfig>(d).is_ok_and(|c| c.validate().is_ok()),
            serde_json::from_slice::<DensityFitConfig>(d).is_ok_and(|c| c.validate().is_ok()),
            serde_json::from_slice::<PretrainRunConfig>(d).is_ok(),
            serde_json::from_slice::<EvaluateConfig>(d).is_ok(),
            serde_json::from_slice::<AblateConfig>(d).is_ok(),
            serde_json::from_slice::<StimulusList>(d).is_ok(),
        ];
        parsed.iter().filter(|&&b| b).count() == 1
    });
    assert_eq!(ok, ["ablate", "density_fit", "evaluate", "pretrain", "stimuli", "train"]);
}

#[test]
fn run_manifest_seeds() {
    let ok = accepted("run_manifest", |data| {
        let Ok(m) = serde_json::from_slice::<RunManifest>(data) else {
            return false;
        };
        assert!(manifest::compare(&m.artifacts, &m.artifacts).is_empty());
        let cmd: Command = serde_json::from_value(m.invocation).unwrap();
        assert_eq!(cmd.name(), m.command);
        !cmd.inputs().is_empty() || cmd.name() != "pretrain"
    });
    assert_eq!(ok.len(), 3);
}
