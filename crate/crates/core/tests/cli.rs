mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use gazeforge::backbone::BackboneConfig;
use gazeforge::commands::{EvaluateConfig, PretrainRunConfig, TransformMetrics};
use gazeforge::dataset::Split;
use gazeforge::fixation;
use gazeforge::loss::{self, LossWeights};
use gazeforge::manifest;
use gazeforge::saliency::{PretrainOptions, SaliencyConfig, KL_EPS};
use gazeforge::target::Manipulation;
use gazeforge::trainer::TrainRunConfig;
use gazeforge::{gzt, pnm};

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn gazeforge(args: &[&str]) -> Run {
    let o = Command::new(env!("CARGO_BIN_EXE_gazeforge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    Run {
        code: o.status.code().expect("exit code"),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) -> Run {
    let r = gazeforge(args);
    assert_eq!(r.code, 0, "{args:?} failed:\n{}{}", r.stdout, r.stderr);
    r
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// A small dataset, a briefly pretrained saliency model, and an identity
/// generator checkpoint (zero head, no training steps).
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["make-dataset", "--n", "10", "--out", s(&root.join("data"))]);
        let pre = PretrainRunConfig {
            dataset: root.join("data/manifest.json"),
            backbone: BackboneConfig::desk(),
            saliency: SaliencyConfig::default(),
            options: PretrainOptions {
                steps: 10,
                ..Default::default()
            },
            train_images: None,
            held_out_images: None,
        };
        write_json(&root.join("pre.json"), &pre);
        ok(&["pretrain", "--config", s(&root.join("pre.json")), "--out", s(&root.join("pre"))]);
        let mut t = TrainRunConfig::new("data/manifest.json", "pre/saliency", Manipulation::LocalShift);
        t.generator.head_init_scale = 0.0;
        t.schedule.steps = 0;
        write_json(&root.join("identity.json"), &t);
        ok(&["train", "--config", s(&root.join("identity.json")), "--out", s(&root.join("identity"))]);
        Fixture { _dir: dir, root }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[test]
fn exit_codes_for_help_and_bad_arguments() {
    assert_eq!(gazeforge(&["--help"]).code, 0);
    assert_eq!(gazeforge(&["--version"]).code, 0);
    assert_eq!(gazeforge(&[]).code, 1);
    assert_eq!(gazeforge(&["frobnicate"]).code, 1);
    assert_eq!(gazeforge(&["make-dataset"]).code, 1);
    assert_eq!(gazeforge(&["make-dataset", "--n", "ten", "--out", "x"]).code, 1);
}

#[test]
fn gradcheck_reports_rows_and_fails_at_impossible_tolerance() {
    let r = ok(&["gradcheck", "--ops", "conv2d,gram,softmax_spatial"]);
    for op in ["conv2d", "gram", "softmax_spatial"] {
        let line = r.stdout.lines().find(|l| l.starts_with(op)).unwrap();
        assert!(line.ends_with("pass"), "{line}");
    }
    assert!(r.stdout.contains("3 of 3 ops pass"));

    let r = gazeforge(&["gradcheck", "--ops", "conv2d", "--tolerance", "1e-300"]);
    assert_eq!(r.code, 2);
    assert!(r.stdout.contains("FAIL"));

    let r = gazeforge(&["gradcheck", "--ops", "conv2d,nope"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("nope"), "{}", r.stderr);
    assert_eq!(gazeforge(&["gradcheck", "--size", "5"]).code, 1);
}

#[test]
fn gradcheck_writes_csv_when_given_an_out_dir() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("g");
    ok(&["gradcheck", "--ops", "relu,matmul", "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "op,max_rel_error,checked,skipped,pass");
    assert_eq!(lines.len(), 3);
    assert!(out.join(manifest::RUN_MANIFEST_FILE).exists());
}

#[test]
fn make_dataset_is_deterministic_and_validates_size() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["make-dataset", "--n", "10", "--seed", "5", "--out", s(&a)]);
    ok(&["make-dataset", "--n", "10", "--seed", "5", "--out", s(&b)]);
    assert_eq!(std::fs::read_dir(a.join("images")).unwrap().count(), 10);
    let (fa, fb) = (manifest::collect_artifacts(&a).unwrap(), manifest::collect_artifacts(&b).unwrap());
    assert!(!fa.is_empty());
    assert!(manifest::compare(&fa, &fb).is_empty());

    let r = gazeforge(&["make-dataset", "--n", "4", "--size", "40", "--out", s(&d.path().join("c"))]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("multiple of 16"), "{}", r.stderr);

    // An existing non-empty output directory is refused.
    assert_eq!(gazeforge(&["make-dataset", "--n", "4", "--out", s(&a)]).code, 1);
}

#[test]
fn config_errors_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, r#"{"dataset": "x", "manipulation": "local-shift"}"#).unwrap();
    let r = gazeforge(&["train", "--config", s(&bad), "--out", s(&d.path().join("o"))]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("missing field `saliency`"), "{}", r.stderr);

    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(gazeforge(&["pretrain", "--config", s(&bad), "--out", s(&d.path().join("o"))]).code, 1);
    let missing = d.path().join("missing.json");
    assert_eq!(gazeforge(&["evaluate", "--config", s(&missing), "--out", s(&d.path().join("o"))]).code, 1);
}

#[test]
fn identity_generator_end_to_end() {
    let f = Fixture::new();

    let mut ev = EvaluateConfig {
        dataset: f.p("data/manifest.json"),
        saliency: f.p("pre/saliency"),
        checkpoint: f.p("identity/checkpoints/final"),
        manipulation: Manipulation::LocalShift,
        weights: LossWeights::default(),
        split: Split::Test,
        n_images: Some(0),
        seed: 0,
        mask_blur_sigma: None,
    };
    write_json(&f.p("ev0.json"), &ev);
    let r = gazeforge(&["evaluate", "--config", s(&f.p("ev0.json")), "--out", s(&f.p("ev0"))]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    ev.n_images = None;
    write_json(&f.p("ev.json"), &ev);
    ok(&["evaluate", "--config", s(&f.p("ev.json")), "--out", s(&f.p("ev"))]);
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.p("ev/eval.json")).unwrap()).unwrap();
    // The identity mapping leaves the features untouched.
    assert_eq!(eval["mean"]["l_feat"].as_f64().unwrap(), 0.0);
    let trained: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.p("identity/eval.json")).unwrap()).unwrap();
    for k in ["l_sal", "l_tex", "l_adv", "l_d", "total"] {
        let (a, b) = (eval["mean"][k].as_f64().unwrap(), trained["test"][k].as_f64().unwrap());
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{k}: {a} vs {b}");
    }

    let image = f.p("data/images/img0002.ppm");
    let mask = f.p("data/masks/img0002_obj1.pgm");
    let out = f.p("tr");
    ok(&[
        "transform",
        "--checkpoint",
        s(&f.p("identity/checkpoints/final/generator")),
        "--saliency",
        s(&f.p("pre/saliency")),
        "--image",
        s(&image),
        "--target-spec",
        "local:k_sh=2",
        "--mask",
        s(&mask),
        "--out",
        s(&out),
    ]);
    let input = pnm::read_rgb(&image).unwrap();
    let output = gzt::load(out.join("transformed.gzt")).unwrap();
    assert!(output.bitwise_eq(&input));
    assert_eq!(std::fs::read(out.join("transformed.ppm")).unwrap(), std::fs::read(&image).unwrap());

    let m: TransformMetrics = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let p_t = gzt::load(out.join("target_density.gzt")).unwrap();
    let p_new = gzt::load(out.join("density_transformed.gzt")).unwrap();
    let p_orig = gzt::load(out.join("density_original.gzt")).unwrap();
    assert!(p_new.bitwise_eq(&p_orig));
    assert_eq!(m.kl_target_transformed, loss::saliency_loss_values(&p_t, &p_new, KL_EPS).unwrap());
    assert_eq!(m.kl_target_transformed, m.kl_target_original);
    assert!(m.kl_target_original > 0.0);
    assert_eq!(m.max_abs_pixel_change, 0.0);
    assert_eq!(m.delta_p_obj, Some(0.0));

    // A spec that leaves the saliency map alone targets the current density.
    let out = f.p("tr_unit");
    ok(&[
        "transform",
        "--checkpoint",
        s(&f.p("identity/checkpoints/final/generator")),
        "--saliency",
        s(&f.p("pre/saliency")),
        "--image",
        s(&f.p("tr/transformed.gzt")),
        "--target-spec",
        "global:k_sc=1",
        "--out",
        s(&out),
    ]);
    let m: TransformMetrics = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m.kl_target_original, 0.0);
    assert_eq!(m.p_obj_original, None);

    let r = gazeforge(&[
        "transform",
        "--checkpoint",
        s(&f.p("identity/checkpoints/final/generator")),
        "--saliency",
        s(&f.p("pre/saliency")),
        "--image",
        s(&image),
        "--target-spec",
        "local:k_sh=2",
        "--out",
        s(&f.p("tr_nomask")),
    ]);
    assert_eq!(r.code, 1, "a local shift without a mask is refused");

    let r = ok(&["replay", "--manifest", s(&f.p("tr/run.json")), "--out", s(&f.p("tr_replay"))]);
    assert!(r.stdout.contains("reproduced all 8 artifacts"), "{}", r.stdout);
    std::fs::write(&mask, b"P5\n32 32\n255\n").unwrap();
    let r = gazeforge(&["replay", "--manifest", s(&f.p("tr/run.json")), "--out", s(&f.p("tr_replay2"))]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("inputs changed"), "{}", r.stderr);
}

fn analyze_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let mut recs = common::blob_fixations(1, "orig", (16.0, 16.0), 6.0, 5, 12, 32);
    recs.extend(common::blob_fixations(2, "edit", (8.0, 8.0), 3.0, 5, 12, 32));
    let fix = dir.join("fix.csv");
    fixation::write_fixations(&fix, &recs).unwrap();
    let mask = gazeforge::Tensor::from_fn(&[1, 1, 32, 32], |i| ((i / 32) < 12 && (i % 32) < 12) as u8 as f64);
    pnm::write_mask(dir.join("obj.pgm"), &mask).unwrap();
    let stim = dir.join("stimuli.json");
    std::fs::write(
        &stim,
        r#"{"stimuli": [
            {"id": "orig", "width": 32, "height": 32, "mask": "obj.pgm"},
            {"id": "edit", "original": "orig", "width": 32, "height": 32, "mask": "obj.pgm", "object_targeted": true}
        ]}"#,
    )
    .unwrap();
    (fix, stim)
}

#[test]
fn analyze_reports_rows_and_aggregate() {
    let d = tempfile::tempdir().unwrap();
    let (fix, stim) = analyze_inputs(d.path());
    let out = d.path().join("all");
    ok(&["analyze", "--fixations", s(&fix), "--stimuli", s(&stim), "--out", s(&out)]);
    let rows = fixation::read_report(out.join("report.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.0.as_str()).collect::<Vec<_>>(), ["orig", "edit", "aggregate"]);
    assert_eq!(rows[0].1[0], Some(60.0));
    for j in 0..rows[2].1.len() {
        let vals: Vec<f64> = rows[..2].iter().filter_map(|r| r.1[j]).collect();
        let want = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        assert_eq!(rows[2].1[j], want, "column {j}");
    }
    // Fixations pulled onto the object raise p_obj.
    let change = rows[1].1[6].unwrap();
    assert!(change > 0.1, "{change}");
    assert!(gzt::load(out.join("densities/edit.gzt")).is_ok());

    let first = d.path().join("first");
    ok(&["analyze", "--fixations", s(&fix), "--stimuli", s(&stim), "--subset", "first-fixation", "--out", s(&first)]);
    let rows = fixation::read_report(first.join("report.csv")).unwrap();
    // Five subjects times three blocks.
    assert_eq!(rows[0].1[0], Some(15.0));
}

#[test]
fn analyze_rejects_malformed_fixations() {
    let d = tempfile::tempdir().unwrap();
    let (fix, stim) = analyze_inputs(d.path());
    let mut text = std::fs::read_to_string(&fix).unwrap();
    text.push_str("s00,orig,1,99,not-a-number,3\n");
    std::fs::write(&fix, text).unwrap();
    let r = gazeforge(&["analyze", "--fixations", s(&fix), "--stimuli", s(&stim), "--out", s(&d.path().join("o"))]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("line 122"), "{}", r.stderr);

    std::fs::write(&fix, "subject,image,block,fix_index,x,y\ns00,orig,1,1,40.0,3\n").unwrap();
    let r = gazeforge(&["analyze", "--fixations", s(&fix), "--stimuli", s(&stim), "--out", s(&d.path().join("o2"))]);
    assert_eq!(r.code, 1, "out-of-bounds fixation: {}", r.stderr);
}

#[test]
fn shipped_configs_parse() {
    use gazeforge::commands::{load_config, AblateConfig};
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let pre: PretrainRunConfig = load_config(&dir.join("pretrain.json")).unwrap();
    assert_eq!(pre.options, PretrainOptions::default());
    let train: TrainRunConfig = load_config(&dir.join("train.json")).unwrap();
    train.validate().unwrap();
    let _: EvaluateConfig = load_config(&dir.join("evaluate.json")).unwrap();
    let ablate: AblateConfig = load_config(&dir.join("ablate.json")).unwrap();
    assert_eq!(ablate.variants.len(), 2);
    let fit: fixation::DensityFitConfig = load_config(&dir.join("density_fit.json")).unwrap();
    assert_eq!(fit, fixation::DensityFitConfig::default());
}
