//! Frozen surrogate feature hierarchy.
//!
//! Five blocks of 3x3 convolutions with ReLU, each block followed by 2x2
//! average pooling, with VGG-19 style layer names (`conv{b}_{i}`,
//! `relu{b}_{i}`). Weights are drawn from a seeded He-normal distribution,
//! centred per output filter, and never trained. With `normalize_activations`, every conv output channel is
//! rescaled so that its mean post-ReLU activation over a seeded calibration
//! batch is exactly one.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::NetworkParams;
use crate::tensor::Tensor;

/// Per-channel means in BGR order, in display units.
pub const BGR_MEAN: [f64; 3] = [103.939 / 255.0, 116.779 / 255.0, 123.68 / 255.0];

/// Layers concatenated into the saliency readout stack.
pub const READOUT_LAYERS: [&str; 5] = ["conv5_1", "relu5_1", "relu5_2", "conv5_3", "relu5_4"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub block_channels: [usize; 5],
    pub convs_per_block: [usize; 5],
    pub seed: u64,
    pub normalize_activations: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    pub fn desk() -> Self {
        BackboneConfig {
            block_channels: [8, 16, 32, 64, 64],
            convs_per_block: [2, 2, 4, 4, 4],
            seed: 7,
            normalize_activations: true,
        }
    }

    pub fn full_scale() -> Self {
        BackboneConfig {
            block_channels: [64, 128, 256, 512, 512],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.iter().chain(&self.convs_per_block).any(|&v| v == 0) {
            return Err(Error::Config("backbone channels and conv counts must be positive".into()));
        }
        if self.convs_per_block[4] < 4 {
            return Err(Error::Config("the readout stack needs at least 4 convs in block 5".into()));
        }
        Ok(())
    }

    /// Channel count of the concatenated readout stack.
    pub fn readout_channels(&self) -> usize {
        READOUT_LAYERS.len() * self.block_channels[4]
    }

    /// Spatial reduction of the block-5 layers.
    pub const REDUCTION: usize = 16;
}

#[derive(Clone, Debug)]
struct ConvLayer {
    block: usize,
    index: usize,
    in_channels: usize,
    out_channels: usize,
}

impl ConvLayer {
    fn conv_name(&self) -> String {
        format!("conv{}_{}", self.block, self.index)
    }

    fn relu_name(&self) -> String {
        format!("relu{}_{}", self.block, self.index)
    }
}

/// Spatial extents and channel counts of a named layer.
#[derive(Clone, Debug)]
pub struct FeatureStack<'t> {
    entries: Vec<(String, Var<'t>)>,
}

impl<'t> FeatureStack<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// `N_l`, the channel count of a layer.
    pub fn channels(&self, name: &str) -> Result<usize> {
        Ok(self.get(name)?.shape()[1])
    }

    /// `M_l = H_l * W_l`, the number of spatial positions of a layer.
    pub fn positions(&self, name: &str) -> Result<usize> {
        let s = self.get(name)?.shape();
        Ok(s[2] * s[3])
    }
}

pub struct Backbone {
    cfg: BackboneConfig,
    layers: Vec<ConvLayer>,
    params: NetworkParams,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

/// Removes each output filter's mean so a layer does not respond to the
/// constant level of its input; without this, local contrast fades out of
/// the deeper random layers.
fn center_filters(w: &mut Tensor, per_filter: usize) {
    for f in w.data_mut().chunks_mut(per_filter) {
        let m = f.iter().sum::<f64>() / per_filter as f64;
        f.iter_mut().for_each(|v| *v -= m);
    }
}

fn layer_plan(cfg: &BackboneConfig) -> Vec<ConvLayer> {
    let mut layers = Vec::new();
    let mut in_c = 3;
    for b in 0..5 {
        for i in 0..cfg.convs_per_block[b] {
            layers.push(ConvLayer {
                block: b + 1,
                index: i + 1,
                in_channels: in_c,
                out_channels: cfg.block_channels[b],
            });
            in_c = cfg.block_channels[b];
        }
    }
    layers
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = layer_plan(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = NetworkParams::new();
        for l in &layers {
            let fan_in = (l.in_channels * 9) as f64;
            let mut w = Tensor::randn(&[l.out_channels, l.in_channels, 3, 3], (2.0 / fan_in).sqrt(), &mut rng);
            center_filters(&mut w, l.in_channels * 9);
            params.insert(format!("{}.weight", l.conv_name()), w, false)?;
            params.insert(format!("{}.bias", l.conv_name()), Tensor::zeros(&[l.out_channels]), false)?;
        }
        let mut bb = Backbone { cfg, layers, params };
        if bb.cfg.normalize_activations {
            let batch = bb.calibration_batch();
            bb.normalize(&batch)?;
        }
        Ok(bb)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// All valid layer names in forward order.
    pub fn layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| [l.conv_name(), l.relu_name()])
            .collect()
    }

    /// Seeded noise images, preprocessed, used to calibrate normalization.
    pub fn calibration_batch(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_ca11);
        let raw = Tensor::uniform(&[4, 3, 64, 64], 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let x = preprocess(tape.constant(raw)).expect("3-channel batch");
        (*x.value()).clone()
    }

    fn normalize(&mut self, batch: &Tensor) -> Result<()> {
        for li in 0..self.layers.len() {
            let name = self.layers[li].conv_name();
            let out_c = self.layers[li].out_channels;
            let pre = {
                let tape = Tape::new();
                let x = tape.constant(batch.clone());
                let feats = self.extract(&tape, x, &[name.as_str()])?;
                (*feats.get(&name)?.value()).clone()
            };
            let (n, c, h, w) = pre.dims4()?;
            debug_assert_eq!(c, out_c);
            let count = (n * h * w) as f64;
            let wname = format!("{name}.weight");
            let bname = format!("{name}.bias");
            for ch in 0..c {
                let mut pos = 0.0;
                let mut neg = 0.0;
                for b in 0..n {
                    for &v in pre.plane(b, ch) {
                        if v > 0.0 {
                            pos += v;
                        } else {
                            neg -= v;
                        }
                    }
                }
                // A channel dead on the calibration batch is mirrored so its
                // rectified mean becomes positive.
                let (sign, mean) = if pos > 0.0 { (1.0, pos / count) } else { (-1.0, neg / count) };
                if mean <= 0.0 {
                    continue;
                }
                let k = sign / mean;
                let wt = self.params.get_mut(&wname)?;
                let per = wt.numel() / c;
                wt.data_mut()[ch * per..(ch + 1) * per].iter_mut().for_each(|v| *v *= k);
                self.params.get_mut(&bname)?.data_mut()[ch] *= k;
            }
        }
        Ok(())
    }

    fn parse_layer(&self, name: &str) -> Result<(usize, bool)> {
        let err = || Error::UnknownLayer(name.to_string());
        let (kind, rest) = if let Some(r) = name.strip_prefix("conv") {
            (false, r)
        } else if let Some(r) = name.strip_prefix("relu") {
            (true, r)
        } else {
            return Err(err());
        };
        let (b, i) = rest.split_once('_').ok_or_else(err)?;
        let (b, i): (usize, usize) = (b.parse().map_err(|_| err())?, i.parse().map_err(|_| err())?);
        let pos = self
            .layers
            .iter()
            .position(|l| l.block == b && l.index == i)
            .ok_or_else(err)?;
        Ok((pos, kind))
    }

    /// Runs the hierarchy on a preprocessed `[B, 3, H, W]` image and returns
    /// the requested layers. Weights enter the tape as constants, so the
    /// result is differentiable with respect to `image` only.
    pub fn extract<'t>(&self, tape: &'t Tape, image: Var<'t>, layers: &[&str]) -> Result<FeatureStack<'t>> {
        let (_, c, h, w) = image.value().dims4()?;
        if c != 3 {
            return Err(shape_err!("backbone expects 3 input channels, got {}", c));
        }
        let wanted: BTreeSet<(usize, bool)> = layers
            .iter()
            .map(|n| self.parse_layer(n))
            .collect::<Result<_>>()?;
        let Some(&(last, last_relu)) = wanted.iter().next_back() else {
            return Ok(FeatureStack { entries: vec![] });
        };
        let last_block = self.layers[last].block;
        let scale = 1usize << (last_block - 1);
        if h % scale != 0 || w % scale != 0 {
            return Err(shape_err!(
                "image {}x{} cannot be pooled {} times",
                h,
                w,
                last_block - 1
            ));
        }
        let mut found: Vec<((usize, bool), Var<'t>)> = Vec::new();
        let mut x = image;
        let mut block = 1;
        for (li, l) in self.layers.iter().enumerate().take(last + 1) {
            if l.block != block {
                x = x.downsample_avg(2)?;
                block = l.block;
            }
            let wv = tape.constant(self.params.get(&format!("{}.weight", l.conv_name()))?.clone());
            let bv = tape.constant(self.params.get(&format!("{}.bias", l.conv_name()))?.clone());
            x = x.conv2d(wv, Some(bv), 1, 1)?;
            if wanted.contains(&(li, false)) {
                found.push(((li, false), x));
            }
            if li == last && !last_relu {
                break;
            }
            x = x.relu();
            if wanted.contains(&(li, true)) {
                found.push(((li, true), x));
            }
        }
        let entries = layers
            .iter()
            .map(|&n| {
                let key = self.parse_layer(n)?;
                let v = found.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).expect("computed");
                Ok((n.to_string(), v))
            })
            .collect::<Result<_>>()?;
        Ok(FeatureStack { entries })
    }

    /// Channel concatenation of the five block-5 layers used by the readout.
    pub fn readout_stack<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Var<'t>> {
        let feats = self.extract(tape, image, &READOUT_LAYERS)?;
        let parts: Vec<Var<'t>> = READOUT_LAYERS.iter().map(|n| feats.get(n)).collect::<Result<_>>()?;
        tape.concat_channels(&parts)
    }

    /// Tape-free extraction of plain values.
    pub fn extract_values(&self, image: &Tensor, layers: &[&str]) -> Result<Vec<(String, Tensor)>> {
        let tape = Tape::new();
        let x = tape.constant(image.clone());
        let feats = self.extract(&tape, x, layers)?;
        layers
            .iter()
            .map(|&n| Ok((n.to_string(), (*feats.get(n)?.value()).clone())))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.params.save(dir, "backbone", serde_json::to_value(&self.cfg)?)
    }

    /// Loads weights written by [`Backbone::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (params, manifest) = NetworkParams::load(dir)?;
        if manifest.kind != "backbone" {
            return Err(Error::Format(format!("expected a backbone checkpoint, found `{}`", manifest.kind)));
        }
        let cfg: BackboneConfig = serde_json::from_value(manifest.config)?;
        cfg.validate()?;
        let layers = layer_plan(&cfg);
        for l in &layers {
            let w = params.get(&format!("{}.weight", l.conv_name()))?;
            if w.shape() != [l.out_channels, l.in_channels, 3, 3] {
                return Err(Error::Format(format!("{} has shape {:?}", l.conv_name(), w.shape())));
            }
        }
        Ok(Backbone { cfg, layers, params })
    }
}

/// Display RGB in `[0, 1]` to the backbone's input convention: channels
/// reversed to BGR, per-channel mean subtracted, scaled by 255.
pub fn preprocess(image: Var<'_>) -> Result<Var<'_>> {
    let c = image.shape().get(1).copied().unwrap_or(0);
    if image.shape().len() != 4 || c != 3 {
        return Err(shape_err!("preprocess expects [B, 3, H, W], got {:?}", image.shape()));
    }
    let shift: Vec<f64> = BGR_MEAN.iter().map(|m| -255.0 * m).collect();
    image.channel_affine(&[2, 1, 0], &[255.0; 3], &shift)
}

/// Inverse of [`preprocess`] on plain values.
pub fn deprocess(x: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if c != 3 {
        return Err(shape_err!("deprocess expects 3 channels, got {}", c));
    }
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    // BGR -> RGB: out[c] = in[2 - c] / 255 + mean_bgr[2 - c]
    let shift: Vec<f64> = (0..3).map(|c| BGR_MEAN[2 - c]).collect();
    let y = v.channel_affine(&[2, 1, 0], &[1.0 / 255.0; 3], &shift)?;
    Ok((*y.value()).clone())
}

/// Tape-free [`preprocess`].
pub fn preprocess_values(image: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok((*preprocess(tape.constant(image.clone()))?.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            block_channels: [4, 4, 8, 8, 8],
            convs_per_block: [1, 1, 2, 2, 4],
            seed: 3,
            normalize_activations: true,
        }
    }

    #[test]
    fn preprocess_round_trip_and_reindexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[1, 3, 4, 4], 0.0, 1.0, &mut rng);
        let back = deprocess(&preprocess_values(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);

        let zero = preprocess_values(&Tensor::zeros(&[1, 3, 2, 2])).unwrap();
        for c in 0..3 {
            assert!(zero.plane(0, c).iter().all(|&v| (v + 255.0 * BGR_MEAN[c]).abs() < 1e-12));
        }

        let mut imp = Tensor::zeros(&[1, 3, 2, 2]);
        imp.data_mut()[0] = 1.0; // red channel, pixel 0
        let p = preprocess_values(&imp).unwrap();
        assert!((p.plane(0, 2)[0] - 255.0 * (1.0 - BGR_MEAN[2])).abs() < 1e-12);
        assert!(preprocess_values(&Tensor::zeros(&[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn unknown_layer_is_lookup_error() {
        let bb = Backbone::new(small()).unwrap();
        let img = Tensor::zeros(&[1, 3, 16, 16]);
        for bad in ["relu9_1", "pool1", "conv1_3", "relu1"] {
            assert!(matches!(bb.extract_values(&img, &[bad]), Err(Error::UnknownLayer(_))), "{bad}");
        }
    }

    #[test]
    fn block5_is_sixteen_times_smaller() {
        let bb = Backbone::new(small()).unwrap();
        let img = Tensor::zeros(&[1, 3, 32, 48]);
        let f = bb.extract_values(&img, &["relu5_4", "conv1_1"]).unwrap();
        assert_eq!(f[0].1.shape(), &[1, 8, 2, 3]);
        assert_eq!(f[1].1.shape(), &[1, 4, 32, 48]);
    }

    #[test]
    fn normalization_gives_unit_channel_means() {
        let bb = Backbone::new(small()).unwrap();
        let batch = bb.calibration_batch();
        let names: Vec<String> = bb.layer_names().into_iter().filter(|n| n.starts_with("relu")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        for (name, t) in bb.extract_values(&batch, &refs).unwrap() {
            let (n, c, h, w) = t.dims4().unwrap();
            for ch in 0..c {
                let mean: f64 = (0..n).map(|b| t.plane(b, ch).iter().sum::<f64>()).sum::<f64>() / (n * h * w) as f64;
                assert!((mean - 1.0).abs() < 0.05, "{name} channel {ch}: {mean}");
            }
        }
    }

    fn std_of(t: &Tensor) -> f64 {
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn he_gain_per_layer_on_unit_noise() {
        let cfg = BackboneConfig {
            normalize_activations: false,
            ..BackboneConfig::desk()
        };
        let bb = Backbone::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in &bb.layers {
            let x = Tensor::randn(&[2, l.in_channels, 16, 16], 1.0, &mut rng);
            let w = bb.params.get(&format!("{}.weight", l.conv_name())).unwrap();
            let y = crate::ops::relu(&crate::ops::conv2d(&x, w, None, 1, 1).unwrap());
            let s = std_of(&y);
            assert!((0.2..=5.0).contains(&s), "{}: std {s}", l.relu_name());
        }
    }

    #[test]
    fn save_load_preserves_weights() {
        let bb = Backbone::new(small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bb.save(dir.path()).unwrap();
        let back = Backbone::load(dir.path()).unwrap();
        assert_eq!(back.checksum(), bb.checksum());
        assert_eq!(back.config(), bb.config());
    }

    #[test]
    fn readout_channel_arithmetic() {
        assert_eq!(BackboneConfig::full_scale().readout_channels(), 2560);
        assert_eq!(BackboneConfig::desk().readout_channels(), 320);
    }
}
