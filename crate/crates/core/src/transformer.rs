//! The feature-guided generator and the patch discriminator.
//!
//! The generator reads the backbone's block-5 stack of the input image, runs
//! a residual trunk at 1/16 resolution, then doubles the resolution in each
//! up-sampling stage. Before every stage a 4-channel guide (RGB plus the log
//! target, block-averaged to the stage's scale) is concatenated to the
//! stage input. A 3x3 head maps back to RGB and, with the output skip, the
//! input image is added.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{self, Backbone, BackboneConfig};
use crate::error::{shape_err, Error, Result};
use crate::ops;
use crate::params::{BoundParams, NetworkParams};
use crate::tensor::Tensor;

pub const GUIDE_CHANNELS: usize = 4;
pub const IN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FGTransformConfig {
    pub residual_blocks: usize,
    pub trunk_channels: usize,
    pub upsample_stages: usize,
    pub concat_channels: usize,
    pub output_residual_skip: bool,
    /// Head weights are He-normal times this factor; 0 starts at the
    /// identity when the skip is on.
    pub head_init_scale: f64,
    /// Fixed factor on the head output before the skip is added.
    pub output_scale: f64,
    pub backbone: BackboneConfig,
    pub seed: u64,
}

impl Default for FGTransformConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl FGTransformConfig {
    pub fn desk() -> Self {
        FGTransformConfig {
            residual_blocks: 2,
            trunk_channels: 64,
            upsample_stages: 4,
            concat_channels: GUIDE_CHANNELS,
            output_residual_skip: true,
            head_init_scale: 0.1,
            output_scale: 0.1,
            backbone: BackboneConfig::desk(),
            seed: 21,
        }
    }

    pub fn full_scale() -> Self {
        FGTransformConfig {
            residual_blocks: 6,
            trunk_channels: 1024,
            backbone: BackboneConfig::full_scale(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.concat_channels != GUIDE_CHANNELS {
            return Err(Error::Config(format!("concat_channels is fixed at 4, got {}", self.concat_channels)));
        }
        if self.residual_blocks == 0 {
            return Err(Error::Config("at least one residual block is required".into()));
        }
        if self.upsample_stages >= usize::BITS as usize || 1usize << self.upsample_stages != BackboneConfig::REDUCTION {
            return Err(Error::Config(format!(
                "{} up-sampling stages do not undo the backbone's 16x reduction",
                self.upsample_stages
            )));
        }
        if self.trunk_channels % (1 << self.upsample_stages) != 0 {
            return Err(Error::Config(format!(
                "trunk_channels {} cannot be halved {} times",
                self.trunk_channels, self.upsample_stages
            )));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::Config("output_scale must be finite and positive".into()));
        }
        if !(self.head_init_scale >= 0.0 && self.head_init_scale.is_finite()) {
            return Err(Error::Config("head_init_scale must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Residual,
    Upsample,
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub name: String,
    pub kind: StageKind,
    /// Channels arriving from the previous stage, before the guide.
    pub feature_channels: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    /// Input resolution as a divisor of the image extents.
    pub reduction: usize,
}

/// Stage-by-stage channel arithmetic; needs no weights.
pub fn shape_plan(cfg: &FGTransformConfig) -> Result<Vec<StagePlan>> {
    cfg.validate()?;
    let g = cfg.concat_channels;
    let mut plan = Vec::new();
    let mut feat = cfg.backbone.readout_channels();
    for i in 0..cfg.residual_blocks {
        plan.push(StagePlan {
            name: format!("res{}", i + 1),
            kind: StageKind::Residual,
            feature_channels: feat,
            input_channels: feat + g,
            output_channels: cfg.trunk_channels,
            reduction: BackboneConfig::REDUCTION,
        });
        feat = cfg.trunk_channels;
    }
    let mut reduction = BackboneConfig::REDUCTION;
    for k in 0..cfg.upsample_stages {
        plan.push(StagePlan {
            name: format!("up{}", k + 1),
            kind: StageKind::Upsample,
            feature_channels: feat,
            input_channels: feat + g,
            output_channels: feat / 2,
            reduction,
        });
        feat /= 2;
        reduction /= 2;
    }
    plan.push(StagePlan {
        name: "head".into(),
        kind: StageKind::Head,
        feature_channels: feat,
        input_channels: feat + g,
        output_channels: 3,
        reduction,
    });
    Ok(plan)
}

/// Weight count implied by a plan: two 3x3 convs per residual block (plus a
/// 1x1 projection when channels change), one 3x3 conv per up-sampling stage
/// and for the head. Only the projection and the head have biases.
pub fn plan_param_count(plan: &[StagePlan]) -> usize {
    let conv = |i: usize, o: usize, k: usize| o * i * k * k;
    let bias = |o: usize| o;
    plan.iter()
        .map(|s| match s.kind {
            StageKind::Residual => {
                let proj = if s.feature_channels != s.output_channels {
                    conv(s.feature_channels, s.output_channels, 1) + bias(s.output_channels)
                } else {
                    0
                };
                conv(s.input_channels, s.output_channels, 3) + conv(s.output_channels + GUIDE_CHANNELS, s.output_channels, 3) + proj
            }
            StageKind::Upsample => conv(s.input_channels, s.output_channels, 3),
            StageKind::Head => conv(s.input_channels, s.output_channels, 3) + bias(s.output_channels),
        })
        .sum()
}

fn he(shape: &[usize], rng: &mut ChaCha8Rng, gain: f64) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    Tensor::randn(shape, gain * (2.0 / fan_in).sqrt(), rng)
}

fn concat_guide<'t>(x: Var<'t>, guide: Option<Var<'t>>) -> Result<Var<'t>> {
    match guide {
        Some(g) => x.tape().concat_channels(&[x, g]),
        None => Ok(x),
    }
}

/// Weight and optional bias. Convs followed by instance norm carry no bias.
pub type ConvParams<'t> = (Var<'t>, Option<Var<'t>>);

/// `relu(shortcut(x) + IN(conv(relu(IN(conv([x, guide]))))))`, where the
/// second conv also sees the guide and `shortcut` is the identity or a 1x1
/// projection.
pub fn residual_block<'t>(
    x: Var<'t>,
    guide: Option<Var<'t>>,
    conv1: ConvParams<'t>,
    conv2: ConvParams<'t>,
    proj: Option<ConvParams<'t>>,
    eps: f64,
) -> Result<Var<'t>> {
    let h = concat_guide(x, guide)?.conv2d(conv1.0, conv1.1, 1, 1)?.instance_norm(eps)?.relu();
    let h = concat_guide(h, guide)?.conv2d(conv2.0, conv2.1, 1, 1)?.instance_norm(eps)?;
    let shortcut = match proj {
        Some((w, b)) => x.conv1x1(w, b)?,
        None => x,
    };
    if shortcut.shape() != h.shape() {
        return Err(shape_err!("residual branch {:?} does not match shortcut {:?}", h.shape(), shortcut.shape()));
    }
    Ok(shortcut.add(h)?.relu())
}

/// Nearest-neighbour x2, then conv, IN, ReLU.
pub fn upsample_block<'t>(x: Var<'t>, guide: Option<Var<'t>>, conv: ConvParams<'t>, eps: f64) -> Result<Var<'t>> {
    concat_guide(x, guide)?
        .nn_upsample(2)?
        .conv2d(conv.0, conv.1, 1, 1)?
        .instance_norm(eps)
        .map(|v| v.relu())
}

pub struct FGTransform {
    cfg: FGTransformConfig,
    plan: Vec<StagePlan>,
    params: NetworkParams,
    backbone: Arc<Backbone>,
}

impl std::fmt::Debug for FGTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FGTransform").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

/// Result of an audited forward pass.
pub struct Forward<'t> {
    pub output: Var<'t>,
    /// Channel count actually fed to each stage, in plan order.
    pub stage_inputs: Vec<usize>,
}

impl FGTransform {
    pub fn new(cfg: FGTransformConfig, backbone: Arc<Backbone>) -> Result<Self> {
        let plan = shape_plan(&cfg)?;
        if backbone.config() != &cfg.backbone {
            return Err(Error::Config("generator config names a different backbone than the one supplied".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = NetworkParams::new();
        for s in &plan {
            let (i, o) = (s.input_channels, s.output_channels);
            match s.kind {
                StageKind::Residual => {
                    p.insert(format!("{}.conv1.weight", s.name), he(&[o, i, 3, 3], &mut rng, 1.0), true)?;
                    p.insert(format!("{}.conv2.weight", s.name), he(&[o, o + GUIDE_CHANNELS, 3, 3], &mut rng, 1.0), true)?;
                    if s.feature_channels != o {
                        p.insert(format!("{}.proj.weight", s.name), he(&[o, s.feature_channels, 1, 1], &mut rng, 1.0), true)?;
                        p.insert(format!("{}.proj.bias", s.name), Tensor::zeros(&[o]), true)?;
                    }
                }
                StageKind::Upsample => {
                    p.insert(format!("{}.conv.weight", s.name), he(&[o, i, 3, 3], &mut rng, 1.0), true)?;
                }
                StageKind::Head => {
                    p.insert("head.weight", he(&[o, i, 3, 3], &mut rng, cfg.head_init_scale), true)?;
                    p.insert("head.bias", Tensor::zeros(&[o]), true)?;
                }
            }
        }
        Ok(FGTransform {
            cfg,
            plan,
            params: p,
            backbone,
        })
    }

    pub fn config(&self) -> &FGTransformConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &[StagePlan] {
        &self.plan
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    /// The 4-channel guide: RGB plus the log target resampled to the image.
    pub fn guide(image: &Tensor, log_target: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = image.dims4()?;
        let (tn, tc, _, _) = log_target.dims4()?;
        if c != 3 || tc != 1 || tn != n {
            return Err(shape_err!(
                "guide needs a [B, 3, H, W] image and a [B, 1, h, w] log target, got {:?} and {:?}",
                image.shape(),
                log_target.shape()
            ));
        }
        let t = ops::bilinear_resize(log_target, h, w)?;
        ops::concat_channels(&[image.clone(), t])
    }

    /// Generator forward pass with parameters bound on `tape`.
    pub fn forward<'t>(&self, tape: &'t Tape, params: &BoundParams<'t>, image: Var<'t>, log_target: &Tensor) -> Result<Forward<'t>> {
        self.check_input(&image.shape())?;
        let stack = self.backbone.readout_stack(tape, backbone::preprocess(image)?)?;
        self.forward_with_stack(tape, params, image, stack, log_target)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = BackboneConfig::REDUCTION;
        if shape.len() != 4 || shape[1] != 3 || shape[2] % r != 0 || shape[3] % r != 0 {
            return Err(shape_err!("generator input must be [B, 3, H, W] with H, W divisible by 16, got {:?}", shape));
        }
        Ok(())
    }

    /// [`Self::forward`] with the block-5 stack of `image` already computed.
    pub fn forward_with_stack<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        image: Var<'t>,
        stack: Var<'t>,
        log_target: &Tensor,
    ) -> Result<Forward<'t>> {
        self.check_input(&image.shape())?;
        let guide_full = tape.constant(Self::guide(&image.value(), log_target)?);
        let mut guides: Vec<(usize, Var<'t>)> = vec![(1, guide_full)];
        let mut guide_at = |f: usize| -> Result<Var<'t>> {
            if let Some(&(_, g)) = guides.iter().find(|(k, _)| *k == f) {
                return Ok(g);
            }
            let g = guide_full.downsample_avg(f)?.detach();
            guides.push((f, g));
            Ok(g)
        };

        let mut x = stack;
        let mut stage_inputs = Vec::with_capacity(self.plan.len());
        for s in &self.plan {
            let g = guide_at(s.reduction)?;
            stage_inputs.push(x.shape()[1] + g.shape()[1]);
            let p = |k: &str| params.get(&format!("{}.{k}", s.name));
            x = match s.kind {
                StageKind::Residual => {
                    let proj = if params_has(params, &format!("{}.proj.weight", s.name)) {
                        Some((p("proj.weight")?, Some(p("proj.bias")?)))
                    } else {
                        None
                    };
                    residual_block(x, Some(g), (p("conv1.weight")?, None), (p("conv2.weight")?, None), proj, IN_EPS)?
                }
                StageKind::Upsample => upsample_block(x, Some(g), (p("conv.weight")?, None), IN_EPS)?,
                StageKind::Head => {
                    let mut y = concat_guide(x, Some(g))?.conv2d(params.get("head.weight")?, Some(params.get("head.bias")?), 1, 1)?;
                    if self.cfg.output_scale != 1.0 {
                        y = y.scale(self.cfg.output_scale);
                    }
                    if self.cfg.output_residual_skip {
                        y.add(image)?
                    } else {
                        y
                    }
                }
            };
        }
        Ok(Forward { output: x, stage_inputs })
    }

    /// Tape-free transform with the current weights.
    pub fn transform(&self, image: &Tensor, log_target: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let out = self.forward(&tape, &bound, tape.constant(image.clone()), log_target)?;
        Ok((*out.output.value()).clone())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.params.save(dir, "fgtransform", serde_json::to_value(&self.cfg)?)
    }

    pub fn load(dir: impl AsRef<Path>, backbone: Arc<Backbone>) -> Result<Self> {
        let (params, manifest) = NetworkParams::load(dir)?;
        if manifest.kind != "fgtransform" {
            return Err(Error::Format(format!("expected a generator checkpoint, found `{}`", manifest.kind)));
        }
        let cfg: FGTransformConfig = serde_json::from_value(manifest.config)?;
        let mut net = FGTransform::new(cfg, backbone)?;
        check_same_layout(&net.params, &params)?;
        net.params = params;
        Ok(net)
    }
}

fn params_has(p: &BoundParams<'_>, name: &str) -> bool {
    p.get(name).is_ok()
}

fn check_same_layout(expected: &NetworkParams, got: &NetworkParams) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Format(format!("checkpoint has {} tensors, expected {}", got.len(), expected.len())));
    }
    for (a, b) in expected.iter().zip(got.iter()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Err(Error::Format(format!("checkpoint tensor `{}` does not match `{}`", b.name, a.name)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Output channels of the five layers; the last must be 1.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub padding: usize,
    pub slope: f64,
    /// Concatenate the untransformed image to the discriminator input.
    pub conditional: bool,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig {
            channels: vec![8, 16, 32, 64, 1],
            kernel: 4,
            strides: vec![2, 2, 2, 1, 1],
            padding: 1,
            slope: 0.2,
            conditional: false,
            seed: 31,
        }
    }

    pub fn full_scale() -> Self {
        DiscriminatorConfig {
            channels: vec![64, 128, 256, 512, 1],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.strides.len() || self.channels.is_empty() {
            return Err(Error::Config("discriminator channels and strides must have the same nonzero length".into()));
        }
        if self.channels.last() != Some(&1) || self.channels.contains(&0) {
            return Err(Error::Config("discriminator widths must be positive and end in 1".into()));
        }
        if self.kernel == 0 || self.strides.contains(&0) {
            return Err(Error::Config("discriminator kernel and strides must be positive".into()));
        }
        Ok(())
    }

    /// Hidden layers other than the first are instance-normalized.
    pub fn normalized(&self, layer: usize) -> bool {
        layer > 0 && layer + 1 < self.channels.len()
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&vec![self.kernel; self.strides.len()], &self.strides)
    }

    /// Output grid extents for an `h x w` input, or an error when some layer
    /// would produce an empty map.
    pub fn output_extents(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for (i, &s) in self.strides.iter().enumerate() {
            let step = |n: usize| (n + 2 * self.padding).checked_sub(self.kernel).map(|v| v / s + 1);
            match (step(h), step(w)) {
                (Some(a), Some(b)) => (h, w) = (a, b),
                _ => return Err(shape_err!("discriminator layer {} has no output for this input", i + 1)),
            }
        }
        Ok((h, w))
    }
}

/// `r <- r + (k - 1) * jump; jump <- jump * s`, starting from one pixel.
pub fn receptive_field(kernels: &[usize], strides: &[usize]) -> usize {
    let (mut r, mut jump) = (1, 1);
    for (&k, &s) in kernels.iter().zip(strides) {
        r += (k - 1) * jump;
        jump *= s;
    }
    r
}

pub struct Discriminator {
    cfg: DiscriminatorConfig,
    params: NetworkParams,
}

impl std::fmt::Debug for Discriminator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discriminator").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = NetworkParams::new();
        let mut c = if cfg.conditional { 6 } else { 3 };
        for (i, &o) in cfg.channels.iter().enumerate() {
            let k = cfg.kernel;
            p.insert(format!("d{}.weight", i + 1), he(&[o, c, k, k], &mut rng, 1.0), true)?;
            if !cfg.normalized(i) {
                p.insert(format!("d{}.bias", i + 1), Tensor::zeros(&[o]), true)?;
            }
            c = o;
        }
        Ok(Discriminator { cfg, params: p })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    /// Patch decisions `[B, 1, h, w]` for a display-RGB image. In conditional
    /// mode `condition` (the untransformed image) is concatenated first.
    pub fn forward<'t>(&self, params: &BoundParams<'t>, image: Var<'t>, condition: Option<Var<'t>>) -> Result<Var<'t>> {
        let mut x = match (self.cfg.conditional, condition) {
            (true, Some(c)) => image.tape().concat_channels(&[image, c])?,
            (true, None) => return Err(Error::Usage("conditional discriminator needs the input image".into())),
            (false, _) => image,
        };
        let n = self.cfg.channels.len();
        for (i, &s) in self.cfg.strides.iter().enumerate() {
            let w = params.get(&format!("d{}.weight", i + 1))?;
            let b = if self.cfg.normalized(i) {
                None
            } else {
                Some(params.get(&format!("d{}.bias", i + 1))?)
            };
            x = x.conv2d(w, b, s, self.cfg.padding)?;
            if self.cfg.normalized(i) {
                x = x.instance_norm(IN_EPS)?;
            }
            if i + 1 < n {
                x = x.leaky_relu(self.cfg.slope);
            }
        }
        Ok(x)
    }

    pub fn decisions(&self, image: &Tensor, condition: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let c = condition.map(|c| tape.constant(c.clone()));
        Ok((*self.forward(&bound, tape.constant(image.clone()), c)?.value()).clone())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.params.save(dir, "discriminator", serde_json::to_value(&self.cfg)?)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (params, manifest) = NetworkParams::load(dir)?;
        if manifest.kind != "discriminator" {
            return Err(Error::Format(format!("expected a discriminator checkpoint, found `{}`", manifest.kind)));
        }
        let cfg: DiscriminatorConfig = serde_json::from_value(manifest.config)?;
        let mut d = Discriminator::new(cfg)?;
        check_same_layout(&d.params, &params)?;
        d.params = params;
        Ok(d)
    }
}
