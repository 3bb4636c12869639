//! Alternating generator/discriminator training, evaluation, and ablations.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{self, READOUT_LAYERS};
use crate::dataset::{Dataset, Sample, Split};
use crate::error::{shape_err, Error, Result};
use crate::loss::{self, LossCsv, LossReport, LossWeights};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{BoundParams, NetworkParams};
use crate::saliency::{density_from_log, SaliencyModel};
use crate::target::{mask_to_grid, sample_target, to_network_input, Manipulation};
use crate::tensor::Tensor;
use crate::transformer::{Discriminator, DiscriminatorConfig, FGTransform, FGTransformConfig};

const EVAL_SALT: u64 = 0xe7a1_5eed;

/// Target-sampling seed for evaluations of a run started from `run_seed`.
pub fn eval_seed(run_seed: u64) -> u64 {
    run_seed ^ EVAL_SALT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    /// Train CSV row cadence in steps.
    pub report_every: usize,
    /// Test evaluation cadence; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Images per periodic test evaluation; 0 uses the whole test split.
    pub eval_images: usize,
    /// Intermediate checkpoint cadence; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            steps: 2000,
            batch_size: 4,
            report_every: 1,
            eval_every: 500,
            eval_images: 0,
            checkpoint_every: 0,
        }
    }
}

/// One training run. Paths are resolved by the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    /// Dataset manifest.
    pub dataset: PathBuf,
    /// Pretrained saliency checkpoint directory.
    pub saliency: PathBuf,
    pub manipulation: Manipulation,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub generator: FGTransformConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub generator_adam: AdamConfig,
    #[serde(default)]
    pub discriminator_adam: AdamConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub seed: u64,
    /// Blur applied to object masks for local shifts; `None` scales with the grid.
    #[serde(default)]
    pub mask_blur_sigma: Option<f64>,
}

impl TrainRunConfig {
    pub fn new(dataset: impl Into<PathBuf>, saliency: impl Into<PathBuf>, manipulation: Manipulation) -> Self {
        TrainRunConfig {
            dataset: dataset.into(),
            saliency: saliency.into(),
            manipulation,
            weights: LossWeights::default(),
            generator: FGTransformConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            generator_adam: AdamConfig::default(),
            discriminator_adam: AdamConfig::default(),
            schedule: Schedule::default(),
            seed: 0,
            mask_blur_sigma: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if [self.weights.sal, self.weights.feat, self.weights.tex, self.weights.adv].iter().all(|&w| w == 0.0) {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.generator_adam.validate()?;
        self.discriminator_adam.validate()?;
        let s = &self.schedule;
        if s.batch_size == 0 || s.report_every == 0 {
            return Err(Error::Config("batch_size and report_every must be positive".into()));
        }
        if let Some(sig) = self.mask_blur_sigma {
            if !(sig >= 0.0 && sig.is_finite()) {
                return Err(Error::Config("mask_blur_sigma must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Resolves relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.dataset, &mut self.saliency] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Per-image values that do not change during training.
#[derive(Clone)]
struct Cached {
    id: String,
    image: Tensor,
    log_sal: Tensor,
    masks: Vec<Tensor>,
    stack: Tensor,
    feat: Tensor,
    grams: Vec<Tensor>,
}

struct Batch {
    images: Tensor,
    stacks: Tensor,
    p_t: Tensor,
    log_t: Tensor,
    feat: Tensor,
    grams: Vec<Tensor>,
}

/// Concatenates along the leading axis.
fn cat_leading(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| shape_err!("cannot batch zero items"))?;
    let tail = &first.shape()[1..];
    let mut data = Vec::new();
    let mut n = 0;
    for t in items {
        if &t.shape()[1..] != tail {
            return Err(shape_err!("cannot batch {:?} with {:?}", t.shape(), first.shape()));
        }
        n += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![n];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data)
}

/// Everything the per-step losses need besides the networks.
struct LossContext<'a> {
    saliency: &'a SaliencyModel,
    weights: &'a LossWeights,
    manipulation: Manipulation,
    mask_blur_sigma: Option<f64>,
}

impl LossContext<'_> {
    fn layers(&self) -> Vec<String> {
        let mut v: Vec<String> = READOUT_LAYERS.iter().map(|s| s.to_string()).collect();
        let extra = std::iter::once(&self.weights.feature_layer).chain(self.weights.texture_layers.iter().map(|t| &t.layer));
        for l in extra {
            if !v.contains(l) {
                v.push(l.clone());
            }
        }
        v
    }

    fn cache(&self, s: &Sample) -> Result<Cached> {
        let bb = self.saliency.backbone();
        let image = s.image.clone();
        let log_sal = self.saliency.log_saliency(&image)?;
        let factor = self.saliency.config().output_reduction();
        let masks = s.masks.iter().map(|m| mask_to_grid(&m.mask, factor)).collect::<Result<_>>()?;
        let mut names: Vec<&str> = READOUT_LAYERS.to_vec();
        names.push(&self.weights.feature_layer);
        let tex: Vec<&str> = self.weights.texture_layers.iter().map(|t| t.layer.as_str()).collect();
        names.extend(&tex);
        let vals = bb.extract_values(&backbone::preprocess_values(&image)?, &names)?;
        let parts: Vec<Tensor> = vals[..READOUT_LAYERS.len()].iter().map(|(_, t)| t.clone()).collect();
        let stack = crate::ops::concat_channels(&parts)?;
        let feat = vals[READOUT_LAYERS.len()].1.clone();
        let grams = vals[READOUT_LAYERS.len() + 1..]
            .iter()
            .map(|(_, f)| {
                let tape = Tape::new();
                let g = tape.constant(f.clone()).gram()?;
                Ok((*g.value()).clone())
            })
            .collect::<Result<_>>()?;
        Ok(Cached {
            id: s.id.clone(),
            image,
            log_sal,
            masks,
            stack,
            feat,
            grams,
        })
    }

    fn batch(&self, items: &[&Cached], rng: &mut ChaCha8Rng) -> Result<Batch> {
        let mut p_ts = Vec::with_capacity(items.len());
        for c in items {
            let (p, _) = sample_target(&c.log_sal, &c.masks, self.manipulation, self.mask_blur_sigma, rng)?;
            p_ts.push(p);
        }
        let p_t = cat_leading(&p_ts.iter().collect::<Vec<_>>())?;
        let log_t = to_network_input(&p_t)?;
        let grams = (0..self.weights.texture_layers.len())
            .map(|k| cat_leading(&items.iter().map(|c| &c.grams[k]).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Ok(Batch {
            images: cat_leading(&items.iter().map(|c| &c.image).collect::<Vec<_>>())?,
            stacks: cat_leading(&items.iter().map(|c| &c.stack).collect::<Vec<_>>())?,
            feat: cat_leading(&items.iter().map(|c| &c.feat).collect::<Vec<_>>())?,
            p_t,
            log_t,
            grams,
        })
    }
}

struct GenTerms<'t> {
    sal: Var<'t>,
    feat: Var<'t>,
    tex: Var<'t>,
    adv: Var<'t>,
    fake: Var<'t>,
}

impl GenTerms<'_> {
    fn values(&self) -> [f64; 4] {
        [self.sal.item(), self.feat.item(), self.tex.item(), self.adv.item()]
    }
}

#[allow(clippy::too_many_arguments)]
fn generator_terms<'t>(
    tape: &'t Tape,
    ctx: &LossContext<'_>,
    gen: &FGTransform,
    gb: &BoundParams<'t>,
    disc: &Discriminator,
    db: &BoundParams<'t>,
    b: &Batch,
) -> Result<GenTerms<'t>> {
    let image = tape.constant(b.images.clone());
    let stack = tape.constant(b.stacks.clone());
    let fake = gen.forward_with_stack(tape, gb, image, stack, &b.log_t)?.output;

    let layers = ctx.layers();
    let names: Vec<&str> = layers.iter().map(String::as_str).collect();
    let feats = ctx.saliency.backbone().extract(tape, backbone::preprocess(fake)?, &names)?;
    let parts: Vec<Var<'t>> = READOUT_LAYERS.iter().map(|n| feats.get(n)).collect::<Result<_>>()?;
    let readout = ctx.saliency.readout().bind_frozen(tape);
    let s_hat = ctx.saliency.log_saliency_from_stack(tape.concat_channels(&parts)?, &readout)?;
    let p_hat = density_from_log(s_hat, None)?;
    let w = ctx.weights;

    let sal = loss::saliency_loss(&b.p_t, p_hat, w.kl_eps)?;
    let feat = loss::feature_loss(feats.get(&w.feature_layer)?, tape.constant(b.feat.clone()))?;
    let tex = if w.texture_layers.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let tl: Vec<(Var<'t>, Var<'t>, f64)> = w
            .texture_layers
            .iter()
            .zip(&b.grams)
            .map(|(t, g)| Ok((feats.get(&t.layer)?, tape.constant(g.clone()), t.weight)))
            .collect::<Result<_>>()?;
        loss::texture_loss(&tl)?
    };
    let cond = disc.config().conditional.then_some(image);
    let adv = loss::adv_generator_loss(disc.forward(db, fake, cond)?)?;
    Ok(GenTerms { sal, feat, tex, adv, fake })
}

fn discriminator_loss<'t>(tape: &'t Tape, disc: &Discriminator, db: &BoundParams<'t>, fake: &Tensor, real: &Tensor) -> Result<Var<'t>> {
    let real = tape.constant(real.clone());
    let cond = disc.config().conditional.then_some(real);
    let d_fake = disc.forward(db, tape.constant(fake.clone()), cond)?;
    let d_real = disc.forward(db, real, cond)?;
    loss::adv_discriminator_loss(d_fake, d_real)
}

/// Mean losses over a set, with one row per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<(String, LossReport)>,
    pub mean: LossReport,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Number of images from the front of the set; `None` uses all.
    pub n_images: Option<usize>,
    pub seed: u64,
    /// Ids the evaluated set must not contain.
    pub disjoint_from: Option<HashSet<String>>,
}

/// Networks and settings shared by training and evaluation.
pub struct EvalModels<'a> {
    pub saliency: &'a SaliencyModel,
    pub generator: &'a FGTransform,
    pub discriminator: &'a Discriminator,
    pub weights: &'a LossWeights,
    pub manipulation: Manipulation,
    pub mask_blur_sigma: Option<f64>,
}

impl<'a> EvalModels<'a> {
    fn ctx(&self) -> LossContext<'a> {
        LossContext {
            saliency: self.saliency,
            weights: self.weights,
            manipulation: self.manipulation,
            mask_blur_sigma: self.mask_blur_sigma,
        }
    }
}

pub fn evaluate(models: &EvalModels<'_>, samples: &[&Sample], opts: &EvalOptions) -> Result<EvalReport> {
    let n = opts.n_images.unwrap_or(samples.len());
    if n == 0 || samples.is_empty() {
        return Err(Error::Usage("evaluation needs at least one image".into()));
    }
    if n > samples.len() {
        return Err(Error::Usage(format!("asked for {n} images but the set has {}", samples.len())));
    }
    if let Some(train) = &opts.disjoint_from {
        if let Some(s) = samples.iter().find(|s| train.contains(&s.id)) {
            return Err(Error::Usage(format!("evaluation image `{}` was used for training", s.id)));
        }
    }
    let ctx = models.ctx();
    let cached: Vec<Cached> = samples[..n].iter().map(|s| ctx.cache(s)).collect::<Result<_>>()?;
    evaluate_cached(models, &cached, opts.seed)
}

fn evaluate_cached(models: &EvalModels<'_>, cached: &[Cached], seed: u64) -> Result<EvalReport> {
    let ctx = models.ctx();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(cached.len());
    for c in cached {
        let b = ctx.batch(&[c], &mut rng)?;
        let tape = Tape::new();
        let gb = models.generator.params().bind_frozen(&tape);
        let db = models.discriminator.params().bind_frozen(&tape);
        let t = generator_terms(&tape, &ctx, models.generator, &gb, models.discriminator, &db, &b)?;
        let fake = (*t.fake.value()).clone();
        let l_d = discriminator_loss(&tape, models.discriminator, &db, &fake, &b.images)?.item();
        let [s, f, x, a] = t.values();
        rows.push((c.id.clone(), loss::total_loss([s, f, x, a, l_d], models.weights, 0)?));
    }
    let k = rows.len() as f64;
    let avg = |f: fn(&LossReport) -> f64| rows.iter().map(|(_, r)| f(r)).sum::<f64>() / k;
    let mut mean = LossReport {
        l_sal: avg(|r| r.l_sal),
        l_feat: avg(|r| r.l_feat),
        l_tex: avg(|r| r.l_tex),
        l_adv: avg(|r| r.l_adv),
        l_d: avg(|r| r.l_d),
        total: 0.0,
    };
    mean.total = mean.weighted_total(models.weights);
    Ok(EvalReport { rows, mean })
}

/// Outcome of [`Trainer::run`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub train: Vec<(usize, LossReport)>,
    pub test: Vec<(usize, LossReport)>,
    pub final_train: EvalReport,
    pub final_test: EvalReport,
    pub elapsed_secs: f64,
}

pub struct Trainer {
    cfg: TrainRunConfig,
    saliency: Arc<SaliencyModel>,
    generator: FGTransform,
    discriminator: Discriminator,
    gen_state: AdamState,
    disc_state: AdamState,
    train: Vec<Cached>,
    test: Vec<Cached>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    step: usize,
    last_good: Option<(usize, NetworkParams, NetworkParams)>,
}

impl Trainer {
    /// Builds fresh networks and caches per-image values. The saliency
    /// model stays frozen.
    pub fn new(cfg: &TrainRunConfig, saliency: Arc<SaliencyModel>, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let generator = FGTransform::new(cfg.generator.clone(), saliency.backbone().clone())?;
        let discriminator = Discriminator::new(cfg.discriminator.clone())?;
        let train_s = data.split(Split::Train);
        let test_s = data.split(Split::Test);
        if train_s.is_empty() {
            return Err(Error::Usage("the dataset has no training images".into()));
        }
        if cfg.manipulation == Manipulation::LocalShift {
            if let Some(s) = train_s.iter().chain(&test_s).find(|s| s.masks.is_empty()) {
                return Err(Error::Usage(format!("image `{}` has no object mask for local shifts", s.id)));
            }
        }
        let ctx = LossContext {
            saliency: &saliency,
            weights: &cfg.weights,
            manipulation: cfg.manipulation,
            mask_blur_sigma: cfg.mask_blur_sigma,
        };
        let train: Vec<Cached> = train_s.iter().map(|s| ctx.cache(s)).collect::<Result<_>>()?;
        let test: Vec<Cached> = test_s.iter().map(|s| ctx.cache(s)).collect::<Result<_>>()?;
        let gen_state = AdamState::new(generator.params());
        let disc_state = AdamState::new(discriminator.params());
        Ok(Trainer {
            cfg: cfg.clone(),
            saliency,
            generator,
            discriminator,
            gen_state,
            disc_state,
            order: Vec::new(),
            cursor: 0,
            train,
            test,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            last_good: None,
        })
    }

    pub fn config(&self) -> &TrainRunConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &FGTransform {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn saliency(&self) -> &Arc<SaliencyModel> {
        &self.saliency
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn train_ids(&self) -> HashSet<String> {
        self.train.iter().map(|c| c.id.clone()).collect()
    }

    fn models(&self) -> EvalModels<'_> {
        EvalModels {
            saliency: &self.saliency,
            generator: &self.generator,
            discriminator: &self.discriminator,
            weights: &self.cfg.weights,
            manipulation: self.cfg.manipulation,
            mask_blur_sigma: self.cfg.mask_blur_sigma,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.schedule.batch_size);
        while out.len() < self.cfg.schedule.batch_size {
            if self.cursor == self.order.len() {
                self.order = (0..self.train.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One generator update followed by one discriminator update.
    pub fn step(&mut self) -> Result<LossReport> {
        let step = self.step;
        let idx = self.next_batch();
        let ctx = LossContext {
            saliency: &self.saliency,
            weights: &self.cfg.weights,
            manipulation: self.cfg.manipulation,
            mask_blur_sigma: self.cfg.mask_blur_sigma,
        };
        let items: Vec<&Cached> = idx.iter().map(|&i| &self.train[i]).collect();
        let b = ctx.batch(&items, &mut self.rng)?;
        let w = &self.cfg.weights;

        let (terms, fake, gen_grads) = {
            let tape = Tape::new();
            let gb = self.generator.params().bind(&tape);
            let db = self.discriminator.params().bind_frozen(&tape);
            let t = generator_terms(&tape, &ctx, &self.generator, &gb, &self.discriminator, &db, &b)?;
            let mut total: Option<Var<'_>> = None;
            for (v, wt) in [(t.sal, w.sal), (t.feat, w.feat), (t.tex, w.tex), (t.adv, w.adv)] {
                if wt != 0.0 {
                    let e = v.scale(wt);
                    total = Some(match total {
                        Some(acc) => acc.add(e)?,
                        None => e,
                    });
                }
            }
            let total = total.expect("validated: some weight is nonzero");
            let g = tape.backward(total)?;
            (t.values(), (*t.fake.value()).clone(), gb.grads(&g))
        };
        let (l_d, disc_grads) = {
            let tape = Tape::new();
            let db = self.discriminator.params().bind(&tape);
            let l = discriminator_loss(&tape, &self.discriminator, &db, &fake, &b.images)?;
            let g = tape.backward(l)?;
            (l.item(), db.grads(&g))
        };
        let [s, f, x, a] = terms;
        let report = match loss::total_loss([s, f, x, a, l_d], w, step) {
            Ok(r) if gen_grads.iter().chain(&disc_grads).flatten().all(Tensor::all_finite) => r,
            Ok(_) => return Err(self.diverged(step, "gradient".into())),
            Err(Error::NonFinite { term, .. }) => return Err(self.diverged(step, term)),
            Err(e) => return Err(e),
        };
        self.last_good = Some((step, self.generator.params().clone(), self.discriminator.params().clone()));
        adam_step(self.generator.params_mut(), &gen_grads, &mut self.gen_state, &self.cfg.generator_adam)?;
        adam_step(self.discriminator.params_mut(), &disc_grads, &mut self.disc_state, &self.cfg.discriminator_adam)?;
        self.step += 1;
        Ok(report)
    }

    fn diverged(&mut self, step: usize, term: String) -> Error {
        if let Some((good, g, d)) = self.last_good.take() {
            *self.generator.params_mut() = g;
            *self.discriminator.params_mut() = d;
            Error::Divergence {
                step,
                term,
                last_good_step: good,
            }
        } else {
            Error::NonFinite { term, step }
        }
    }

    /// Total generator loss on a seeded training batch as a function of the
    /// generator parameter `name`, all other weights frozen. Used to check
    /// gradients through the whole pipeline.
    pub fn pipeline_loss<'t>(&self, tape: &'t Tape, name: &str, value: Var<'t>, seed: u64) -> Result<Var<'t>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.cfg.schedule.batch_size.min(self.train.len());
        let items: Vec<&Cached> = self.train[..n].iter().collect();
        let ctx = self.models().ctx();
        let b = ctx.batch(&items, &mut rng)?;
        let mut gb = self.generator.params().bind_frozen(tape);
        gb.replace(name, value)?;
        let db = self.discriminator.params().bind_frozen(tape);
        let t = generator_terms(tape, &ctx, &self.generator, &gb, &self.discriminator, &db, &b)?;
        let w = &self.cfg.weights;
        t.sal
            .scale(w.sal)
            .add(t.feat.scale(w.feat))?
            .add(t.tex.scale(w.tex))?
            .add(t.adv.scale(w.adv))
    }

    /// Evaluates the current generator on the training or test split with
    /// the run's evaluation seed.
    pub fn evaluate_split(&self, split: Split, n_images: Option<usize>) -> Result<EvalReport> {
        let set = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        let n = n_images.unwrap_or(set.len());
        if n == 0 || n > set.len() {
            return Err(Error::Usage(format!("cannot evaluate {n} of {} {split:?} images", set.len())));
        }
        evaluate_cached(&self.models(), &set[..n], self.eval_seed())
    }

    pub fn eval_seed(&self) -> u64 {
        eval_seed(self.cfg.seed)
    }

    fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.generator.save(dir.join("generator"))?;
        self.discriminator.save(dir.join("discriminator"))
    }

    /// Runs the remaining steps of the schedule. With `out` set, writes
    /// `train_losses.csv`, `test_losses.csv`, `eval.json` and checkpoints
    /// under `checkpoints/`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainOutcome> {
        let start = Instant::now();
        let sched = self.cfg.schedule.clone();
        let mut train_csv = out.map(|d| LossCsv::create(d.join("train_losses.csv"))).transpose()?;
        let mut test_csv = out.map(|d| LossCsv::create(d.join("test_losses.csv"))).transpose()?;
        let eval_n = (sched.eval_images > 0).then_some(sched.eval_images.min(self.test.len()));
        let mut train_rows = Vec::new();
        let mut test_rows = Vec::new();
        while self.step < sched.steps {
            let step = self.step;
            let r = match self.step() {
                Ok(r) => r,
                Err(e @ Error::Divergence { .. }) => {
                    if let Some(d) = out {
                        self.save_checkpoint(&d.join("checkpoints").join("last_good"))?;
                    }
                    log::error!("training diverged: {e}");
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if step % sched.report_every == 0 {
                if let Some(c) = train_csv.as_mut() {
                    c.row(step, &r)?;
                }
                train_rows.push((step, r.clone()));
            }
            let done = step + 1;
            if sched.eval_every > 0 && done % sched.eval_every == 0 && done < sched.steps && !self.test.is_empty() {
                let e = self.evaluate_split(Split::Test, eval_n)?.mean;
                log::info!("step {done}: train L_sal {:.5}, test L_sal {:.5}", r.l_sal, e.l_sal);
                if let Some(c) = test_csv.as_mut() {
                    c.row(done, &e)?;
                }
                test_rows.push((done, e));
            }
            if let Some(d) = out {
                if sched.checkpoint_every > 0 && done % sched.checkpoint_every == 0 {
                    self.save_checkpoint(&d.join("checkpoints").join(format!("step_{done:06}")))?;
                }
            }
        }
        let final_train = self.evaluate_split(Split::Train, None)?;
        let final_test = if self.test.is_empty() {
            EvalReport {
                rows: vec![],
                mean: LossReport::default(),
            }
        } else {
            self.evaluate_split(Split::Test, None)?
        };
        if !self.test.is_empty() {
            if let Some(c) = test_csv.as_mut() {
                c.row(self.step, &final_test.mean)?;
            }
            test_rows.push((self.step, final_test.mean.clone()));
        }
        if let Some(d) = out {
            train_csv.as_mut().map(LossCsv::flush).transpose()?;
            test_csv.as_mut().map(LossCsv::flush).transpose()?;
            self.save_checkpoint(&d.join("checkpoints").join("final"))?;
            let summary = serde_json::json!({
                "steps": self.step,
                "eval_seed": self.eval_seed(),
                "train": final_train.mean,
                "test": final_test.mean,
            });
            let path = d.join("eval.json");
            std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(TrainOutcome {
            train: train_rows,
            test: test_rows,
            final_train,
            final_test,
            elapsed_secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// A copy of the base run with some loss weights set to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    #[serde(default)]
    pub zero: Vec<String>,
}

impl AblationVariant {
    pub fn full() -> Self {
        AblationVariant {
            name: "full".into(),
            zero: vec![],
        }
    }

    pub fn saliency_only() -> Self {
        AblationVariant {
            name: "saliency-only".into(),
            zero: vec!["feat".into(), "tex".into(), "adv".into()],
        }
    }

    pub fn apply(&self, base: &TrainRunConfig) -> Result<TrainRunConfig> {
        let mut cfg = base.clone();
        for w in &self.zero {
            cfg.weights.set(w, 0.0)?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub weights: [f64; 4],
    pub train: LossReport,
    pub test: LossReport,
    /// Mean training L_sal over the first and last 10% of steps.
    pub sal_start: f64,
    pub sal_end: f64,
}

/// Trains and evaluates each variant from the same seed. With `out` set,
/// each variant writes its run under `out/<name>/` and the table goes to
/// `out/ablation.csv`.
pub fn run_ablation(
    base: &TrainRunConfig,
    variants: &[AblationVariant],
    saliency: Arc<SaliencyModel>,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut names = HashSet::new();
    let cfgs: Vec<TrainRunConfig> = variants
        .iter()
        .map(|v| {
            if !names.insert(v.name.as_str()) || v.name.is_empty() || v.name.contains(['/', '\\']) {
                return Err(Error::Usage(format!("bad or duplicate variant name `{}`", v.name)));
            }
            v.apply(base)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(variants.len());
    for (v, cfg) in variants.iter().zip(cfgs) {
        let dir = out.map(|d| d.join(&v.name));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut t = Trainer::new(&cfg, saliency.clone(), data)?;
        let o = t.run(dir.as_deref())?;
        let (start, end) = edge_means(&o.train, |r| r.l_sal, 0.1);
        let w = &cfg.weights;
        rows.push(AblationRow {
            variant: v.name.clone(),
            weights: [w.sal, w.feat, w.tex, w.adv],
            train: o.final_train.mean,
            test: o.final_test.mean,
            sal_start: start,
            sal_end: end,
        });
    }
    if let Some(d) = out {
        write_ablation_csv(&d.join("ablation.csv"), &rows)?;
    }
    Ok(rows)
}

/// Means of `f` over the first and last `frac` of the rows (at least one row each).
pub fn edge_means(rows: &[(usize, LossReport)], f: impl Fn(&LossReport) -> f64, frac: f64) -> (f64, f64) {
    if rows.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let k = ((rows.len() as f64 * frac).round() as usize).clamp(1, rows.len());
    let mean = |s: &[(usize, LossReport)]| s.iter().map(|(_, r)| f(r)).sum::<f64>() / s.len() as f64;
    (mean(&rows[..k]), mean(&rows[rows.len() - k..]))
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut header = vec!["variant".to_string(), "split".into()];
    header.extend(loss::CSV_HEADER[1..].iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        for (split, m) in [("train", &r.train), ("test", &r.test)] {
            let vals = [m.l_sal, m.l_feat, m.l_tex, m.l_adv, m.l_d, m.total];
            let mut rec = vec![r.variant.clone(), split.to_string()];
            rec.extend(vals.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_means_windows() {
        let rows: Vec<(usize, LossReport)> = (0..10)
            .map(|i| {
                (
                    i,
                    LossReport {
                        l_sal: i as f64,
                        ..Default::default()
                    },
                )
            })
            .collect();
        assert_eq!(edge_means(&rows, |r| r.l_sal, 0.2), (0.5, 8.5));
    }

    #[test]
    fn cat_leading_checks_tails() {
        let a = Tensor::zeros(&[1, 2, 2]);
        let b = Tensor::ones(&[2, 2, 2]);
        assert_eq!(cat_leading(&[&a, &b]).unwrap().shape(), &[3, 2, 2]);
        assert!(cat_leading(&[&a, &Tensor::zeros(&[1, 3, 2])]).is_err());
    }

    #[test]
    fn config_requires_paths() {
        let err = serde_json::from_str::<TrainRunConfig>(r#"{"saliency": "s", "manipulation": "global-scale"}"#).unwrap_err();
        assert!(err.to_string().contains("dataset"));
        let cfg = TrainRunConfig::new("d", "s", Manipulation::GlobalScale);
        let back: TrainRunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
