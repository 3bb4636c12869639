//! Target saliency maps: shifting log-saliency under object masks, or
//! scaling it globally.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub const K_SH_RANGE: (f64, f64) = (-4.0, 4.0);
pub const K_SC_RANGE: (f64, f64) = (0.5, 2.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Manipulation {
    LocalShift,
    GlobalScale,
}

impl fmt::Display for Manipulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Manipulation::LocalShift => "local-shift",
            Manipulation::GlobalScale => "global-scale",
        })
    }
}

/// A resolved target description; the mask lives on the saliency grid.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetSpec {
    LocalShift {
        mask: Tensor,
        k_sh: f64,
        mask_blur_sigma: f64,
    },
    GlobalScale {
        k_sc: f64,
    },
}

impl TargetSpec {
    pub fn manipulation(&self) -> Manipulation {
        match self {
            TargetSpec::LocalShift { .. } => Manipulation::LocalShift,
            TargetSpec::GlobalScale { .. } => Manipulation::GlobalScale,
        }
    }

    /// The target log-saliency `S_t`.
    pub fn apply(&self, s: &Tensor) -> Result<Tensor> {
        match self {
            TargetSpec::LocalShift {
                mask,
                k_sh,
                mask_blur_sigma,
            } => local_shift(s, mask, *k_sh, *mask_blur_sigma),
            TargetSpec::GlobalScale { k_sc } => global_scale(s, *k_sc),
        }
    }

    /// `softmax_spatial(S_t)`.
    pub fn density(&self, s: &Tensor) -> Result<Tensor> {
        ops::softmax_spatial(&self.apply(s)?)
    }
}

/// Text form of a target, without its mask: `local:k_sh=2[,sigma=0]` or
/// `global:k_sc=1.5`. A missing sigma means the grid-scaled default.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetRequest {
    Local { k_sh: f64, sigma: Option<f64> },
    Global { k_sc: f64 },
}

impl FromStr for TargetRequest {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Usage(format!("target spec `{text}`: {m}"));
        let (kind, rest) = text.split_once(':').ok_or_else(|| bad("expected `kind:key=value,...`"))?;
        let mut pairs = Vec::new();
        for item in rest.split(',').filter(|s| !s.trim().is_empty()) {
            let (k, v) = item.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let v: f64 = v.trim().parse().map_err(|_| bad(&format!("`{}` is not a number", v.trim())))?;
            if !v.is_finite() {
                return Err(bad("values must be finite"));
            }
            if pairs.iter().any(|(name, _)| *name == k.trim()) {
                return Err(bad(&format!("duplicate key `{}`", k.trim())));
            }
            pairs.push((k.trim(), v));
        }
        let take = |name: &str| pairs.iter().find(|(k, _)| *k == name).map(|(_, v)| *v);
        let allow = |names: &[&str]| -> Result<()> {
            match pairs.iter().find(|(k, _)| !names.contains(k)) {
                Some((k, _)) => Err(bad(&format!("unknown key `{k}`"))),
                None => Ok(()),
            }
        };
        match kind.trim() {
            "local" => {
                allow(&["k_sh", "sigma"])?;
                let k_sh = take("k_sh").ok_or_else(|| bad("missing k_sh"))?;
                let sigma = take("sigma");
                if sigma.is_some_and(|s| s < 0.0) {
                    return Err(bad("sigma must be nonnegative"));
                }
                Ok(TargetRequest::Local { k_sh, sigma })
            }
            "global" => {
                allow(&["k_sc"])?;
                let k_sc = take("k_sc").ok_or_else(|| bad("missing k_sc"))?;
                if k_sc <= 0.0 {
                    return Err(bad("k_sc must be positive"));
                }
                Ok(TargetRequest::Global { k_sc })
            }
            other => Err(bad(&format!("unknown kind `{other}` (expected local or global)"))),
        }
    }
}

impl fmt::Display for TargetRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetRequest::Local { k_sh, sigma: None } => write!(f, "local:k_sh={k_sh}"),
            TargetRequest::Local { k_sh, sigma: Some(s) } => write!(f, "local:k_sh={k_sh},sigma={s}"),
            TargetRequest::Global { k_sc } => write!(f, "global:k_sc={k_sc}"),
        }
    }
}

impl TargetRequest {
    /// Resolves against object masks already on the saliency grid.
    pub fn resolve(&self, masks: &[Tensor]) -> Result<TargetSpec> {
        match *self {
            TargetRequest::Local { k_sh, sigma } => {
                let first = masks
                    .first()
                    .ok_or_else(|| Error::Usage("a local-shift target needs at least one object mask".into()))?;
                let sigma = sigma.unwrap_or_else(|| default_mask_sigma(first.shape()[first.rank() - 1]));
                Ok(TargetSpec::LocalShift {
                    mask: union_mask(masks, sigma)?,
                    k_sh,
                    mask_blur_sigma: 0.0,
                })
            }
            TargetRequest::Global { k_sc } => Ok(TargetSpec::GlobalScale { k_sc }),
        }
    }
}

/// 5 px at a 512 px wide grid, scaled with the grid width.
pub fn default_mask_sigma(grid_width: usize) -> f64 {
    5.0 * grid_width as f64 / 512.0
}

fn plane_of(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(shape_err!("expected a [B, 1, H, W] map, got {:?}", s));
    }
    Ok((s[2], s[3]))
}

fn blur_mask(mask: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma < 0.0 || sigma.is_nan() {
        return Err(Error::Domain(format!("mask blur sigma must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        Ok(mask.clone())
    } else {
        ops::gaussian_blur(mask, sigma)
    }
}

/// `S_t = S + k_sh * blur(M, sigma)`; sigma 0 leaves the mask sharp. A
/// single-plane mask is applied to every batch item.
pub fn local_shift(s: &Tensor, mask: &Tensor, k_sh: f64, mask_blur_sigma: f64) -> Result<Tensor> {
    let (h, w) = plane_of(s)?;
    if plane_of(mask)? != (h, w) || (mask.shape()[0] != 1 && mask.shape()[0] != s.shape()[0]) {
        return Err(shape_err!("mask {:?} does not match saliency map {:?}", mask.shape(), s.shape()));
    }
    let m = blur_mask(mask, mask_blur_sigma)?;
    let per = m.numel();
    let mut out = s.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += k_sh * m.data()[i % per];
    }
    Ok(out)
}

/// `S_t = k_sc * S`.
pub fn global_scale(s: &Tensor, k_sc: f64) -> Result<Tensor> {
    if !(k_sc > 0.0) {
        return Err(Error::Domain(format!("k_sc must be positive, got {k_sc}")));
    }
    Ok(s.scale(k_sc))
}

/// Elementwise maximum of the individually blurred masks.
pub fn union_mask(masks: &[Tensor], sigma: f64) -> Result<Tensor> {
    let mut it = masks.iter();
    let first = it
        .next()
        .ok_or_else(|| Error::Usage("union of an empty mask list".into()))?;
    let mut out = blur_mask(first, sigma)?;
    for m in it {
        out = out.zip_map(&blur_mask(m, sigma)?, f64::max)?;
    }
    Ok(out)
}

/// Block-averages a full-resolution mask onto the saliency grid.
pub fn mask_to_grid(mask: &Tensor, factor: usize) -> Result<Tensor> {
    ops::downsample_avg(mask, factor)
}

/// Draws a target for one saliency map. Local shifts use one `k_sh` for the
/// union of all object masks.
pub fn sample_target<R: Rng + ?Sized>(
    s: &Tensor,
    masks: &[Tensor],
    kind: Manipulation,
    mask_blur_sigma: Option<f64>,
    rng: &mut R,
) -> Result<(Tensor, TargetSpec)> {
    let (_, w) = plane_of(s)?;
    let spec = match kind {
        Manipulation::LocalShift => {
            if masks.is_empty() {
                return Err(Error::Usage("local-shift sampling needs at least one object mask".into()));
            }
            let sigma = mask_blur_sigma.unwrap_or_else(|| default_mask_sigma(w));
            let k_sh = rng.random_range(K_SH_RANGE.0..=K_SH_RANGE.1);
            TargetSpec::LocalShift {
                mask: union_mask(masks, sigma)?,
                k_sh,
                mask_blur_sigma: 0.0,
            }
        }
        Manipulation::GlobalScale => TargetSpec::GlobalScale {
            k_sc: rng.random_range(K_SC_RANGE.0..=K_SC_RANGE.1),
        },
    };
    Ok((spec.density(s)?, spec))
}

/// `log(p)`, the guide channel fed to the transformer.
pub fn to_network_input(p: &Tensor) -> Result<Tensor> {
    if let Some(bad) = p.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("log target needs a positive density, found {bad}")));
    }
    Ok(p.map(f64::ln))
}
