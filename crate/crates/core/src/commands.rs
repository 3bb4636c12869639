//! Command-line surface. Each command is a serializable [`Command`] so a run
//! manifest can replay it.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::dataset::{generate, Dataset, DatasetConfig, Split};
use crate::error::{Error, Result};
use crate::fixation::{self, DensityFitConfig, Stimulus, Subset};
use crate::gradcheck::{self, SuiteOptions};
use crate::loss::{self, LossReport, LossWeights};
use crate::manifest::{self, Mismatch, RunManifest, RUN_MANIFEST_FORMAT};
use crate::pnm;
use crate::saliency::{PretrainOptions, SaliencyConfig, SaliencyModel, KL_EPS};
use crate::target::{mask_to_grid, to_network_input, Manipulation, TargetRequest};
use crate::tensor::Tensor;
use crate::trainer::{self, AblationVariant, EvalModels, EvalOptions, TrainRunConfig, Trainer};
use crate::transformer::{Discriminator, FGTransform};
use crate::gzt;

#[derive(Parser, Debug)]
#[command(name = "gazeforge", version, about = "Saliency-guided image transformation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Subcommand, Debug)]
pub enum CliCommand {
    /// Finite-difference gradient checks of the differentiable ops.
    Gradcheck {
        /// `all` or a comma-separated list of op names.
        #[arg(long, default_value = "all")]
        ops: String,
        /// Spatial extent of image-shaped inputs (even, at least 4).
        #[arg(long, default_value_t = 6)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Also write `gradcheck.csv` and a run manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generates the synthetic image set with object masks.
    MakeDataset {
        #[arg(long, default_value_t = 40)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        objects_per_image: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits the saliency readout against the synthetic oracle.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the generator and discriminator.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-term losses of a trained generator on a dataset split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains one variant per set of zeroed loss weights.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Applies a trained generator to one image.
    Transform {
        /// Generator checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Saliency checkpoint directory.
        #[arg(long)]
        saliency: PathBuf,
        /// PPM image, or a GZT tensor for exact chaining.
        #[arg(long)]
        image: PathBuf,
        /// `local:k_sh=2[,sigma=0.5]` or `global:k_sc=1.5`.
        #[arg(long)]
        target_spec: String,
        /// Object mask (PGM at image resolution); repeat for a union.
        #[arg(long)]
        mask: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits fixation densities and reports behavioural metrics.
    Analyze {
        #[arg(long)]
        fixations: PathBuf,
        /// Stimulus list (JSON).
        #[arg(long)]
        stimuli: PathBuf,
        /// Directory mask paths resolve against; defaults to the stimulus list's.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        subset: Subset,
        /// Density-fit grids (JSON); defaults apply when omitted.
        #[arg(long)]
        fit_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-runs a recorded command and compares its outputs byte for byte.
    Replay {
        /// A `run.json` written by an earlier command.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// What the binary does after parsing.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Run(Command),
    Replay { manifest: PathBuf, out: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckArgs {
    /// Empty means every op.
    pub ops: Vec<String>,
    pub size: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MakeDatasetArgs {
    pub config: DatasetConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigRun<T> {
    pub config: T,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformArgs {
    pub checkpoint: PathBuf,
    pub saliency: PathBuf,
    pub image: PathBuf,
    pub target_spec: String,
    pub masks: Vec<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeArgs {
    pub fixations: PathBuf,
    pub stimuli: PathBuf,
    pub masks: PathBuf,
    pub subset: Subset,
    pub fit: DensityFitConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRunConfig {
    /// Dataset manifest.
    pub dataset: PathBuf,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub saliency: SaliencyConfig,
    #[serde(default)]
    pub options: PretrainOptions,
    /// Training-split images used; `None` takes all.
    #[serde(default)]
    pub train_images: Option<usize>,
    /// Test-split images for the held-out KL; `None` takes all.
    #[serde(default)]
    pub held_out_images: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub dataset: PathBuf,
    pub saliency: PathBuf,
    /// Directory holding `generator/` and `discriminator/` checkpoints.
    pub checkpoint: PathBuf,
    pub manipulation: Manipulation,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "test_split")]
    pub split: Split,
    #[serde(default)]
    pub n_images: Option<usize>,
    /// Seed of the training run; targets are drawn as its final evaluation drew them.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mask_blur_sigma: Option<f64>,
}

fn test_split() -> Split {
    Split::Test
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub base: TrainRunConfig,
    #[serde(default = "default_variants")]
    pub variants: Vec<AblationVariant>,
}

fn default_variants() -> Vec<AblationVariant> {
    vec![AblationVariant::full(), AblationVariant::saliency_only()]
}

/// One entry of the `analyze` stimulus list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusEntry {
    pub id: String,
    /// Defaults to `id`.
    #[serde(default)]
    pub original: Option<String>,
    pub width: usize,
    pub height: usize,
    /// PGM path relative to the mask directory.
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default)]
    pub object_targeted: bool,
    /// GZT path relative to the stimulus list.
    #[serde(default)]
    pub model_density: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusList {
    pub stimuli: Vec<StimulusEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "kebab-case")]
pub enum Command {
    Gradcheck(GradcheckArgs),
    MakeDataset(MakeDatasetArgs),
    Pretrain(ConfigRun<PretrainRunConfig>),
    Train(ConfigRun<TrainRunConfig>),
    Evaluate(ConfigRun<EvaluateConfig>),
    Ablate(ConfigRun<AblateConfig>),
    Transform(TransformArgs),
    Analyze(AnalyzeArgs),
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn resolve(p: &mut PathBuf, base: &Path) -> Result<()> {
    if p.is_relative() {
        *p = base.join(&*p);
    }
    *p = absolute(p)?;
    Ok(())
}

/// Reads a JSON config; unknown or missing keys are named in the error.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn config_dir(path: &Path) -> Result<PathBuf> {
    Ok(absolute(path)?.parent().map(Path::to_path_buf).unwrap_or_default())
}

impl CliCommand {
    /// Reads config files and resolves every path to an absolute one.
    pub fn into_action(self) -> Result<Action> {
        let cmd = match self {
            CliCommand::Gradcheck {
                ops,
                size,
                seed,
                tolerance,
                out,
            } => {
                let ops = if ops.trim() == "all" {
                    vec![]
                } else {
                    ops.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
                };
                Command::Gradcheck(GradcheckArgs {
                    ops,
                    size,
                    seed,
                    tolerance,
                    out: out.as_deref().map(absolute).transpose()?,
                })
            }
            CliCommand::MakeDataset {
                n,
                size,
                objects_per_image,
                seed,
                test_fraction,
                out,
            } => Command::MakeDataset(MakeDatasetArgs {
                config: DatasetConfig {
                    n,
                    size,
                    objects_per_image,
                    seed,
                    test_fraction,
                },
                out: absolute(&out)?,
            }),
            CliCommand::Pretrain { config, out } => {
                let mut c: PretrainRunConfig = load_config(&config)?;
                resolve(&mut c.dataset, &config_dir(&config)?)?;
                Command::Pretrain(ConfigRun { config: c, out: absolute(&out)? })
            }
            CliCommand::Train { config, out } => {
                let mut c: TrainRunConfig = load_config(&config)?;
                resolve_train(&mut c, &config_dir(&config)?)?;
                Command::Train(ConfigRun { config: c, out: absolute(&out)? })
            }
            CliCommand::Evaluate { config, out } => {
                let mut c: EvaluateConfig = load_config(&config)?;
                let base = config_dir(&config)?;
                for p in [&mut c.dataset, &mut c.saliency, &mut c.checkpoint] {
                    resolve(p, &base)?;
                }
                Command::Evaluate(ConfigRun { config: c, out: absolute(&out)? })
            }
            CliCommand::Ablate { config, out } => {
                let mut c: AblateConfig = load_config(&config)?;
                resolve_train(&mut c.base, &config_dir(&config)?)?;
                Command::Ablate(ConfigRun { config: c, out: absolute(&out)? })
            }
            CliCommand::Transform {
                checkpoint,
                saliency,
                image,
                target_spec,
                mask,
                out,
            } => {
                target_spec.parse::<TargetRequest>()?;
                Command::Transform(TransformArgs {
                    checkpoint: absolute(&checkpoint)?,
                    saliency: absolute(&saliency)?,
                    image: absolute(&image)?,
                    target_spec,
                    masks: mask.iter().map(|m| absolute(m)).collect::<Result<_>>()?,
                    out: absolute(&out)?,
                })
            }
            CliCommand::Analyze {
                fixations,
                stimuli,
                masks,
                subset,
                fit_config,
                out,
            } => {
                let masks = match masks {
                    Some(m) => absolute(&m)?,
                    None => config_dir(&stimuli)?,
                };
                let fit = match fit_config {
                    Some(p) => load_config(&p)?,
                    None => DensityFitConfig::default(),
                };
                Command::Analyze(AnalyzeArgs {
                    fixations: absolute(&fixations)?,
                    stimuli: absolute(&stimuli)?,
                    masks,
                    subset,
                    fit,
                    out: absolute(&out)?,
                })
            }
            CliCommand::Replay { manifest, out } => {
                return Ok(Action::Replay {
                    manifest: absolute(&manifest)?,
                    out: absolute(&out)?,
                })
            }
        };
        Ok(Action::Run(cmd))
    }
}

fn resolve_train(c: &mut TrainRunConfig, base: &Path) -> Result<()> {
    resolve(&mut c.dataset, base)?;
    resolve(&mut c.saliency, base)
}

/// The directory holding a dataset manifest, which is what a run depends on.
fn dataset_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck(_) => "gradcheck",
            Command::MakeDataset(_) => "make-dataset",
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::Transform(_) => "transform",
            Command::Analyze(_) => "analyze",
        }
    }

    pub fn out(&self) -> Option<&Path> {
        match self {
            Command::Gradcheck(a) => a.out.as_deref(),
            Command::MakeDataset(a) => Some(&a.out),
            Command::Pretrain(a) => Some(&a.out),
            Command::Train(a) => Some(&a.out),
            Command::Evaluate(a) => Some(&a.out),
            Command::Ablate(a) => Some(&a.out),
            Command::Transform(a) => Some(&a.out),
            Command::Analyze(a) => Some(&a.out),
        }
    }

    pub fn with_out(&self, out: PathBuf) -> Command {
        let mut c = self.clone();
        match &mut c {
            Command::Gradcheck(a) => a.out = Some(out),
            Command::MakeDataset(a) => a.out = out,
            Command::Pretrain(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Evaluate(a) => a.out = out,
            Command::Ablate(a) => a.out = out,
            Command::Transform(a) => a.out = out,
            Command::Analyze(a) => a.out = out,
        }
        c
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Command::Gradcheck(a) => Some(a.seed),
            Command::MakeDataset(a) => Some(a.config.seed),
            Command::Pretrain(a) => Some(a.config.saliency.seed),
            Command::Train(a) => Some(a.config.seed),
            Command::Evaluate(a) => Some(a.config.seed),
            Command::Ablate(a) => Some(a.config.base.seed),
            Command::Transform(_) | Command::Analyze(_) => None,
        }
    }

    /// Files and directories the command reads.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Command::Gradcheck(_) | Command::MakeDataset(_) => vec![],
            Command::Pretrain(a) => vec![dataset_dir(&a.config.dataset)],
            Command::Train(a) => vec![dataset_dir(&a.config.dataset), a.config.saliency.clone()],
            Command::Ablate(a) => vec![dataset_dir(&a.config.base.dataset), a.config.base.saliency.clone()],
            Command::Evaluate(a) => vec![
                dataset_dir(&a.config.dataset),
                a.config.saliency.clone(),
                a.config.checkpoint.join("generator"),
                a.config.checkpoint.join("discriminator"),
            ],
            Command::Transform(a) => {
                let mut v = vec![a.checkpoint.clone(), a.saliency.clone(), a.image.clone()];
                v.extend(a.masks.iter().cloned());
                v
            }
            Command::Analyze(a) => vec![a.fixations.clone(), a.stimuli.clone(), a.masks.clone()],
        }
    }
}

/// Result of [`execute`].
#[derive(Clone, Debug)]
pub struct Outcome {
    /// Human-readable summary for stdout.
    pub report: String,
    /// A check ran and did not pass.
    pub failed: bool,
    pub manifest: Option<RunManifest>,
}

fn prepare_out(out: &Path) -> Result<()> {
    if out.exists() {
        let mut rd = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if rd.next().is_some() {
            return Err(Error::Usage(format!("output directory {} is not empty", out.display())));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Runs a command and, when it has an output directory, writes its run
/// manifest there.
pub fn execute(cmd: &Command) -> Result<Outcome> {
    let started = manifest::unix_now();
    let t0 = Instant::now();
    let input_paths = cmd.inputs();
    let inputs = manifest::hash_inputs(&input_paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    if let Some(out) = cmd.out() {
        prepare_out(out)?;
    }
    let (report, failed) = match cmd {
        Command::Gradcheck(a) => run_gradcheck(a)?,
        Command::MakeDataset(a) => run_make_dataset(a)?,
        Command::Pretrain(a) => run_pretrain(&a.config, &a.out)?,
        Command::Train(a) => run_train(&a.config, &a.out)?,
        Command::Evaluate(a) => run_evaluate(&a.config, &a.out)?,
        Command::Ablate(a) => run_ablate(&a.config, &a.out)?,
        Command::Transform(a) => run_transform(a)?,
        Command::Analyze(a) => run_analyze(a)?,
    };
    let manifest = match cmd.out() {
        Some(out) => {
            let m = RunManifest {
                format: RUN_MANIFEST_FORMAT.into(),
                command: cmd.name().into(),
                invocation: serde_json::to_value(cmd)?,
                seed: cmd.seed(),
                crate_version: env!("CARGO_PKG_VERSION").into(),
                threads: rayon::current_num_threads(),
                formats: manifest::format_versions(),
                inputs,
                artifacts: manifest::collect_artifacts(out)?,
                started_unix_secs: started,
                elapsed_secs: t0.elapsed().as_secs_f64(),
            };
            m.write(out)?;
            Some(m)
        }
        None => None,
    };
    Ok(Outcome { report, failed, manifest })
}

/// Result of [`replay`].
#[derive(Clone, Debug)]
pub struct ReplayOutcome {
    pub outcome: Outcome,
    pub mismatches: Vec<Mismatch>,
}

/// Re-runs the command recorded in `manifest_path` into `out` and compares
/// every output file with the recorded hashes. Inputs that changed since
/// the recording are a usage error.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayOutcome> {
    let recorded = RunManifest::load(manifest_path)?;
    let cmd: Command = serde_json::from_value(recorded.invocation.clone())
        .map_err(|e| Error::Config(format!("{}: invocation: {e}", manifest_path.display())))?;
    let paths = cmd.inputs();
    let now = manifest::hash_inputs(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let changed = manifest::compare(&recorded.inputs, &now);
    if !changed.is_empty() {
        let list: Vec<String> = changed.iter().map(ToString::to_string).collect();
        return Err(Error::Usage(format!("inputs changed since the recorded run: {}", list.join("; "))));
    }
    let outcome = execute(&cmd.with_out(out.to_path_buf()))?;
    let produced = outcome.manifest.as_ref().map(|m| m.artifacts.clone()).unwrap_or_default();
    Ok(ReplayOutcome {
        mismatches: manifest::compare(&recorded.artifacts, &produced),
        outcome,
    })
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<(String, bool)> {
    if !(a.tolerance > 0.0) {
        return Err(Error::Usage(format!("tolerance must be positive, got {}", a.tolerance)));
    }
    let opts = SuiteOptions {
        size: a.size,
        seed: a.seed,
        tolerance: a.tolerance,
    };
    let rows = gradcheck::run_suite(&a.ops, &opts)?;
    let mut text = format!("{:<18} {:>14} {:>8} {:>8}  result\n", "op", "max_rel_error", "checked", "skipped");
    for r in &rows {
        let verdict = if r.passed { "pass" } else { "FAIL" };
        text += &format!(
            "{:<18} {:>14.3e} {:>8} {:>8}  {verdict}\n",
            r.op, r.report.max_rel_error, r.report.checked, r.report.skipped
        );
    }
    let failures = rows.iter().filter(|r| !r.passed).count();
    text += &format!("{} of {} ops pass at tolerance {:e}\n", rows.len() - failures, rows.len(), a.tolerance);
    if let Some(out) = &a.out {
        let path = out.join("gradcheck.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["op", "max_rel_error", "checked", "skipped", "pass"]).map_err(csv_err)?;
        for r in &rows {
            w.write_record([
                r.op.to_string(),
                format!("{:?}", r.report.max_rel_error),
                r.report.checked.to_string(),
                r.report.skipped.to_string(),
                r.passed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok((text, failures > 0))
}

fn run_make_dataset(a: &MakeDatasetArgs) -> Result<(String, bool)> {
    let data = generate(&a.config)?;
    let path = data.write(&a.out, Some(&a.config))?;
    let masks: usize = data.samples.iter().map(|s| s.masks.len()).sum();
    Ok((
        format!("wrote {} images and {masks} masks; manifest {}\n", data.samples.len(), path.display()),
        false,
    ))
}

fn take_images(data: &Dataset, split: Split, n: Option<usize>) -> Result<Vec<Tensor>> {
    let all = data.split(split);
    let n = n.unwrap_or(all.len());
    if n > all.len() {
        return Err(Error::Usage(format!("asked for {n} {split:?} images but the dataset has {}", all.len())));
    }
    Ok(all[..n].iter().map(|s| s.image.clone()).collect())
}

fn run_pretrain(c: &PretrainRunConfig, out: &Path) -> Result<(String, bool)> {
    let data = Dataset::load(&c.dataset)?;
    let train = take_images(&data, Split::Train, c.train_images)?;
    let held = take_images(&data, Split::Test, c.held_out_images)?;
    if train.is_empty() {
        return Err(Error::Usage("pretraining needs at least one training image".into()));
    }
    let backbone = Arc::new(Backbone::new(c.backbone.clone())?);
    let mut model = SaliencyModel::new(c.saliency.clone(), backbone)?;
    let r = model.pretrain_readout(&train, &held, &c.options)?;
    model.save(out.join("saliency"))?;
    let path = out.join("pretrain_losses.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["step", "kl"]).map_err(csv_err)?;
    for (i, l) in r.losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:?}")]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let summary = serde_json::json!({
        "steps": r.losses.len(),
        "train_images": train.len(),
        "held_out_images": held.len(),
        "held_out_initial": r.held_out_initial,
        "held_out_final": r.held_out_final,
    });
    write_json(&out.join("pretrain.json"), &summary)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.5}"));
    Ok((
        format!(
            "pretrained readout on {} images; held-out KL {} -> {}\n",
            train.len(),
            fmt(r.held_out_initial),
            fmt(r.held_out_final)
        ),
        false,
    ))
}

fn summarize(label: &str, r: &LossReport) -> String {
    format!(
        "{label}: L_sal {:.5}  L_feat {:.5}  L_tex {:.5}  L_adv {:.5}  L_D {:.5}  total {:.5}\n",
        r.l_sal, r.l_feat, r.l_tex, r.l_adv, r.l_d, r.total
    )
}

fn run_train(c: &TrainRunConfig, out: &Path) -> Result<(String, bool)> {
    let data = Dataset::load(&c.dataset)?;
    let sal = Arc::new(SaliencyModel::load(&c.saliency)?);
    let mut t = Trainer::new(c, sal, &data)?;
    let o = t.run(Some(out))?;
    let mut text = format!("trained {} steps\n", t.steps_done());
    text += &summarize("train", &o.final_train.mean);
    if !o.final_test.rows.is_empty() {
        text += &summarize("test", &o.final_test.mean);
    }
    Ok((text, false))
}

fn run_evaluate(c: &EvaluateConfig, out: &Path) -> Result<(String, bool)> {
    let data = Dataset::load(&c.dataset)?;
    let sal = SaliencyModel::load(&c.saliency)?;
    let gen = FGTransform::load(c.checkpoint.join("generator"), sal.backbone().clone())?;
    let disc = Discriminator::load(c.checkpoint.join("discriminator"))?;
    c.weights.validate()?;
    let models = EvalModels {
        saliency: &sal,
        generator: &gen,
        discriminator: &disc,
        weights: &c.weights,
        manipulation: c.manipulation,
        mask_blur_sigma: c.mask_blur_sigma,
    };
    let samples = data.split(c.split);
    let disjoint_from = (c.split == Split::Test).then(|| data.split(Split::Train).iter().map(|s| s.id.clone()).collect());
    let opts = EvalOptions {
        n_images: c.n_images,
        seed: trainer::eval_seed(c.seed),
        disjoint_from,
    };
    let rep = trainer::evaluate(&models, &samples, &opts)?;
    let path = out.join("eval_rows.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let mut header = vec!["image"];
    header.extend(&loss::CSV_HEADER[1..]);
    w.write_record(&header).map_err(csv_err)?;
    for (id, r) in &rep.rows {
        let vals = [r.l_sal, r.l_feat, r.l_tex, r.l_adv, r.l_d, r.total];
        let mut rec = vec![id.clone()];
        rec.extend(vals.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&out.join("eval.json"), &serde_json::json!({ "images": rep.rows.len(), "mean": rep.mean }))?;
    Ok((summarize(&format!("{} images", rep.rows.len()), &rep.mean), false))
}

fn run_ablate(c: &AblateConfig, out: &Path) -> Result<(String, bool)> {
    let data = Dataset::load(&c.base.dataset)?;
    let sal = Arc::new(SaliencyModel::load(&c.base.saliency)?);
    let rows = trainer::run_ablation(&c.base, &c.variants, sal, &data, Some(out))?;
    write_json(&out.join("ablation.json"), &rows)?;
    let mut text = String::new();
    for r in &rows {
        text += &format!(
            "{}: train L_sal {:.5} -> {:.5}; end L_feat {:.5}; test L_sal {:.5}\n",
            r.variant, r.sal_start, r.sal_end, r.train.l_feat, r.test.l_sal
        );
    }
    Ok((text, false))
}

/// Reads a PPM, or a `[1, 3, H, W]` GZT tensor for exact chaining.
fn read_image(path: &Path) -> Result<Tensor> {
    let t = if path.extension().is_some_and(|e| e == "gzt") {
        gzt::load(path)?
    } else {
        pnm::read_rgb(path)?
    };
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Usage(format!("{} is not a single RGB image ({:?})", path.display(), s)));
    }
    Ok(t)
}

/// Metrics written by `transform`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformMetrics {
    pub target_spec: String,
    /// `KL(p_t || p(I_hat))`, the saliency loss of the output.
    pub kl_target_transformed: f64,
    /// `KL(p_t || p(I))`.
    pub kl_target_original: f64,
    pub p_obj_original: Option<f64>,
    pub p_obj_transformed: Option<f64>,
    pub delta_p_obj: Option<f64>,
    pub max_abs_pixel_change: f64,
}

fn run_transform(a: &TransformArgs) -> Result<(String, bool)> {
    let request: TargetRequest = a.target_spec.parse()?;
    let sal = SaliencyModel::load(&a.saliency)?;
    let gen = FGTransform::load(&a.checkpoint, sal.backbone().clone())?;
    let image = read_image(&a.image)?;
    let (h, w) = (image.shape()[2], image.shape()[3]);
    let r = BackboneConfig::REDUCTION;
    if h % r != 0 || w % r != 0 {
        return Err(Error::Usage(format!("image extents {h}x{w} must be divisible by {r}")));
    }
    let masks: Vec<Tensor> = a
        .masks
        .iter()
        .map(|p| {
            let m = pnm::read_gray(p)?;
            if m.shape()[2..] != [h, w] {
                return Err(Error::Usage(format!("mask {} is not {h}x{w}", p.display())));
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let factor = sal.config().output_reduction();
    let grid_masks: Vec<Tensor> = masks.iter().map(|m| mask_to_grid(m, factor)).collect::<Result<_>>()?;

    let log_s = sal.log_saliency(&image)?;
    let spec = request.resolve(&grid_masks)?;
    let p_t = spec.density(&log_s)?;
    let transformed = gen.transform(&image, &to_network_input(&p_t)?)?;
    let p_orig = sal.density(&image, None)?;
    let p_new = sal.density(&transformed, None)?;

    let union = (!grid_masks.is_empty())
        .then(|| {
            let first = grid_masks[0].clone();
            grid_masks[1..].iter().try_fold(first, |acc, m| acc.zip_map(m, f64::max))
        })
        .transpose()?;
    let p_obj = |p: &Tensor| union.as_ref().map(|m| fixation::object_probability(p, m)).transpose();
    let (before, after) = (p_obj(&p_orig)?, p_obj(&p_new)?);
    let metrics = TransformMetrics {
        target_spec: request.to_string(),
        kl_target_transformed: loss::saliency_loss_values(&p_t, &p_new, KL_EPS)?,
        kl_target_original: loss::saliency_loss_values(&p_t, &p_orig, KL_EPS)?,
        p_obj_original: before,
        p_obj_transformed: after,
        delta_p_obj: before.zip(after).map(|(b, a)| a - b),
        max_abs_pixel_change: transformed.data().iter().zip(image.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
    };

    let out = &a.out;
    gzt::save(out.join("transformed.gzt"), &transformed)?;
    pnm::write_rgb(out.join("transformed.ppm"), &transformed.map(|v| v.clamp(0.0, 1.0)))?;
    gzt::save(out.join("target_density.gzt"), &p_t)?;
    gzt::save(out.join("density_original.gzt"), &p_orig)?;
    gzt::save(out.join("density_transformed.gzt"), &p_new)?;
    pnm::write_density(out.join("density_original.pgm"), &p_orig)?;
    pnm::write_density(out.join("density_transformed.pgm"), &p_new)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    let mut text = format!(
        "KL(target || p(I)) {:.5} -> KL(target || p(I_hat)) {:.5}\n",
        metrics.kl_target_original, metrics.kl_target_transformed
    );
    if let (Some(b), Some(a)) = (before, after) {
        text += &format!("p_obj {b:.4} -> {a:.4}\n");
    }
    Ok((text, false))
}

fn run_analyze(a: &AnalyzeArgs) -> Result<(String, bool)> {
    let list: StimulusList = load_config(&a.stimuli)?;
    let list_dir = config_dir(&a.stimuli)?;
    let stimuli: Vec<Stimulus> = list
        .stimuli
        .iter()
        .map(|e| {
            let mask = e
                .mask
                .as_ref()
                .map(|m| {
                    let t = pnm::read_gray(a.masks.join(m))?;
                    if t.shape()[2..] != [e.height, e.width] {
                        return Err(Error::Usage(format!("mask {m} is not {}x{}", e.width, e.height)));
                    }
                    Ok(t)
                })
                .transpose()?;
            let model_density = e.model_density.as_ref().map(|d| gzt::load(list_dir.join(d))).transpose()?;
            Ok(Stimulus {
                id: e.id.clone(),
                original: e.original.clone().unwrap_or_else(|| e.id.clone()),
                width: e.width,
                height: e.height,
                mask,
                object_targeted: e.object_targeted,
                model_density,
            })
        })
        .collect::<Result<_>>()?;
    let all = fixation::read_fixations(&a.fixations)?;
    let records = fixation::subset(&all, a.subset);
    let report = fixation::analysis_report(&stimuli, &records, &a.fit)?;
    fixation::write_report(a.out.join("report.csv"), &report)?;
    let dens = a.out.join("densities");
    std::fs::create_dir_all(&dens).map_err(|e| Error::io(&dens, e))?;
    for (s, f) in stimuli.iter().zip(&report.densities) {
        if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
            return Err(Error::Usage(format!("stimulus id `{}` cannot name a file", s.id)));
        }
        gzt::save(dens.join(format!("{}.gzt", s.id)), &f.density)?;
    }
    Ok((
        format!(
            "analyzed {} stimuli from {} of {} fixations ({:?} subset); report {}\n",
            stimuli.len(),
            records.len(),
            all.len(),
            a.subset,
            a.out.join("report.csv").display()
        ),
        false,
    ))
}
