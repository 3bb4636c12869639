//! Fixation-density model: a pointwise readout over the backbone's block-5
//! stack, nearest-neighbour up-sampling, blur, and a spatial soft-max.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{self, Backbone, BackboneConfig};
use crate::error::{shape_err, Error, Result};
use crate::ops;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{BoundParams, NetworkParams};
use crate::tensor::Tensor;

/// Clamp inside the KL logarithm.
pub const KL_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyConfig {
    /// Output widths of the 1x1 readout layers; the last must be 1.
    pub widths: Vec<usize>,
    pub blur_sigma: f64,
    pub upsample: usize,
    pub seed: u64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            widths: vec![16, 8, 4, 1],
            blur_sigma: 1.5,
            upsample: 8,
            seed: 11,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("readout widths must be nonempty and positive".into()));
        }
        if self.widths.last() != Some(&1) {
            return Err(Error::Config("the last readout layer must have exactly 1 channel".into()));
        }
        if !(self.blur_sigma > 0.0) {
            return Err(Error::Config(format!("blur_sigma must be positive, got {}", self.blur_sigma)));
        }
        if self.upsample == 0 || BackboneConfig::REDUCTION % self.upsample != 0 {
            return Err(Error::Config(format!("upsample must divide 16, got {}", self.upsample)));
        }
        Ok(())
    }

    /// Output grid reduction relative to the input image.
    pub fn output_reduction(&self) -> usize {
        BackboneConfig::REDUCTION / self.upsample
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SaliencyCheckpoint {
    saliency: SaliencyConfig,
    backbone: BackboneConfig,
    backbone_checksum: String,
}

pub struct SaliencyModel {
    cfg: SaliencyConfig,
    backbone: Arc<Backbone>,
    readout: NetworkParams,
}

impl std::fmt::Debug for SaliencyModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SaliencyModel").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

fn init_readout(cfg: &SaliencyConfig, in_channels: usize) -> Result<NetworkParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = NetworkParams::new();
    let mut c = in_channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        let std = (2.0 / c as f64).sqrt();
        p.insert(format!("readout.{i}.weight"), Tensor::randn(&[w, c, 1, 1], std, &mut rng), true)?;
        p.insert(format!("readout.{i}.bias"), Tensor::zeros(&[w]), true)?;
        c = w;
    }
    Ok(p)
}

impl SaliencyModel {
    pub fn new(cfg: SaliencyConfig, backbone: Arc<Backbone>) -> Result<Self> {
        cfg.validate()?;
        let readout = init_readout(&cfg, backbone.config().readout_channels())?;
        Ok(SaliencyModel { cfg, backbone, readout })
    }

    pub fn config(&self) -> &SaliencyConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn readout(&self) -> &NetworkParams {
        &self.readout
    }

    pub fn readout_mut(&mut self) -> &mut NetworkParams {
        &mut self.readout
    }

    /// Readout, up-sampling, and blur applied to a block-5 stack.
    pub fn log_saliency_from_stack<'t>(&self, stack: Var<'t>, params: &BoundParams<'t>) -> Result<Var<'t>> {
        let n = self.cfg.widths.len();
        let mut x = stack;
        for i in 0..n {
            let w = params.get(&format!("readout.{i}.weight"))?;
            let b = params.get(&format!("readout.{i}.bias"))?;
            x = x.conv1x1(w, Some(b))?;
            if i + 1 < n {
                x = x.relu();
            }
        }
        x.nn_upsample(self.cfg.upsample)?.gaussian_blur(self.cfg.blur_sigma)
    }

    fn check_extents(&self, shape: &[usize]) -> Result<()> {
        let r = BackboneConfig::REDUCTION;
        if shape.len() != 4 || shape[2] % r != 0 || shape[3] % r != 0 {
            return Err(shape_err!("saliency input extents must be divisible by {}, got {:?}", r, shape));
        }
        Ok(())
    }

    /// Log-saliency of a display-RGB `[B, 3, H, W]` image, on an
    /// `[B, 1, H/2, W/2]` grid. Readout weights enter as constants.
    pub fn predict_log_saliency<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Var<'t>> {
        self.check_extents(&image.shape())?;
        let stack = self.backbone.readout_stack(tape, backbone::preprocess(image)?)?;
        let bound = self.readout.bind_frozen(tape);
        self.log_saliency_from_stack(stack, &bound)
    }

    /// Soft-max of the log-saliency plus an optional additive bias grid.
    pub fn predict_density<'t>(&self, tape: &'t Tape, image: Var<'t>, center_bias: Option<&Tensor>) -> Result<Var<'t>> {
        let s = self.predict_log_saliency(tape, image)?;
        density_from_log(s, center_bias)
    }

    pub fn log_saliency(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let s = self.predict_log_saliency(&tape, tape.constant(image.clone()))?;
        Ok((*s.value()).clone())
    }

    pub fn density(&self, image: &Tensor, center_bias: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.predict_density(&tape, tape.constant(image.clone()), center_bias)?;
        Ok((*p.value()).clone())
    }

    /// Fits the readout to the contrast oracle with full-batch Adam on
    /// precomputed block-5 stacks. The backbone is untouched.
    pub fn pretrain_readout(&mut self, train: &[Tensor], held_out: &[Tensor], opts: &PretrainOptions) -> Result<PretrainReport> {
        opts.adam.validate()?;
        if train.is_empty() {
            return Err(Error::Usage("pretraining needs at least one training image".into()));
        }
        let prep = |imgs: &[Tensor]| -> Result<Option<(Tensor, Tensor)>> {
            if imgs.is_empty() {
                return Ok(None);
            }
            let batch = Tensor::stack_batch(imgs)?;
            self.check_extents(batch.shape())?;
            let target = synthetic_saliency_oracle(&batch, opts.oracle_sigma)?;
            let tape = Tape::new();
            let x = backbone::preprocess(tape.constant(batch))?;
            let stack = (*self.backbone.readout_stack(&tape, x)?.value()).clone();
            Ok(Some((stack, target)))
        };
        let (train_stack, train_target) = prep(train)?.expect("nonempty");
        let held = prep(held_out)?;

        let eval = |model: &SaliencyModel, stack: &Tensor, target: &Tensor| -> Result<f64> {
            let tape = Tape::new();
            let bound = model.readout.bind_frozen(&tape);
            let s = model.log_saliency_from_stack(tape.constant(stack.clone()), &bound)?;
            Ok(s.softmax_spatial()?.kl_from_target(target, KL_EPS)?.item())
        };
        let held_initial = held.as_ref().map(|(s, t)| eval(self, s, t)).transpose()?;

        let mut state = AdamState::new(&self.readout);
        let mut losses = Vec::with_capacity(opts.steps);
        for step in 0..opts.steps {
            let (loss, grads) = {
                let tape = Tape::new();
                let bound = self.readout.bind(&tape);
                let s = self.log_saliency_from_stack(tape.constant(train_stack.clone()), &bound)?;
                let kl = s.softmax_spatial()?.kl_from_target(&train_target, KL_EPS)?;
                let g = tape.backward(kl)?;
                (kl.item(), bound.grads(&g))
            };
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.all_finite()) {
                return Err(Error::Divergence {
                    step,
                    term: "L_sal".into(),
                    last_good_step: step.saturating_sub(1),
                });
            }
            losses.push(loss);
            adam_step(&mut self.readout, &grads, &mut state, &opts.adam)?;
            log::debug!("pretrain step {step}: KL {loss:.6}");
        }
        let held_final = held.as_ref().map(|(s, t)| eval(self, s, t)).transpose()?;
        Ok(PretrainReport {
            losses,
            held_out_initial: held_initial,
            held_out_final: held_final,
        })
    }

    /// Writes the readout and the configuration needed to rebuild the model.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let ck = SaliencyCheckpoint {
            saliency: self.cfg.clone(),
            backbone: self.backbone.config().clone(),
            backbone_checksum: self.backbone.checksum(),
        };
        self.readout.save(dir, "saliency", serde_json::to_value(ck)?)
    }

    /// Loads a readout and rebuilds its seeded backbone, which must match the
    /// recorded checksum.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (readout, manifest) = NetworkParams::load(dir)?;
        if manifest.kind != "saliency" {
            return Err(Error::Format(format!("expected a saliency checkpoint, found `{}`", manifest.kind)));
        }
        let ck: SaliencyCheckpoint = serde_json::from_value(manifest.config)?;
        let backbone = Arc::new(Backbone::new(ck.backbone)?);
        if backbone.checksum() != ck.backbone_checksum {
            return Err(Error::Format("backbone checksum differs from the one recorded with the readout".into()));
        }
        let mut model = SaliencyModel::new(ck.saliency, backbone)?;
        for p in model.readout.iter() {
            if readout.get(&p.name)?.shape() != p.value.shape() {
                return Err(Error::Format(format!("readout tensor `{}` has the wrong shape", p.name)));
            }
        }
        model.readout = readout;
        Ok(model)
    }
}

/// `softmax_spatial(s + bias)`.
pub fn density_from_log<'t>(s: Var<'t>, center_bias: Option<&Tensor>) -> Result<Var<'t>> {
    match center_bias {
        Some(b) => {
            let sh = s.shape();
            let plane = [sh[2], sh[3]];
            if b.shape().len() < 2 || b.shape()[b.rank() - 2..] != plane || b.numel() != plane[0] * plane[1] {
                return Err(shape_err!("center bias {:?} does not match the {:?} output grid", b.shape(), plane));
            }
            let tiled = Tensor::from_fn(&sh, |i| b.data()[i % (plane[0] * plane[1])]);
            s.add_const(&tiled)?.softmax_spatial()
        }
        None => s.softmax_spatial(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOptions {
    pub steps: usize,
    pub adam: AdamConfig,
    pub oracle_sigma: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 300,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            oracle_sigma: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Training KL before each update.
    pub losses: Vec<f64>,
    pub held_out_initial: Option<f64>,
    pub held_out_final: Option<f64>,
}

/// Contrast floor below which a region counts as flat.
const CONTRAST_FLOOR: f64 = 1e-12;

/// Density proportional to blurred local RMS luminance contrast, on the
/// model's half-resolution grid. Flat images give the uniform density.
pub fn synthetic_saliency_oracle(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(shape_err!("oracle expects 3 channels, got {}", c));
    }
    let hw = h * w;
    let mut lum = Tensor::zeros(&[n, 1, h, w]);
    for b in 0..n {
        let dst = &mut lum.data_mut()[b * hw..(b + 1) * hw];
        for ch in 0..3 {
            for (d, s) in dst.iter_mut().zip(image.plane(b, ch)) {
                *d += s / 3.0;
            }
        }
    }
    let mean = ops::gaussian_blur(&lum, sigma)?;
    let sq = ops::gaussian_blur(&lum.map(|v| v * v), sigma)?;
    let var = sq.zip_map(&mean, |s, m| s - m * m)?;
    let contrast = var.map(|v| if v > CONTRAST_FLOOR { v.sqrt() } else { 0.0 });
    let contrast = ops::gaussian_blur(&contrast, sigma)?;
    let small = ops::downsample_avg(&contrast, 2)?;
    Ok(normalize_planes(&small))
}

/// Scales every plane to sum 1; all-zero planes become uniform.
pub fn normalize_planes(x: &Tensor) -> Tensor {
    let s = x.shape();
    let m = s[s.len() - 2] * s[s.len() - 1];
    let mut out = x.clone();
    for plane in out.data_mut().chunks_mut(m) {
        let total: f64 = plane.iter().sum();
        if total > 0.0 {
            plane.iter_mut().for_each(|v| *v /= total);
        } else {
            plane.iter_mut().for_each(|v| *v = 1.0 / m as f64);
        }
    }
    out
}
