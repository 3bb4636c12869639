//! Saliency, feature, texture, and least-squares adversarial losses and
//! their weighted total.
//!
//! Batched inputs are reduced per image as written and then averaged over
//! the batch.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_KL_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureLayer {
    pub layer: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub sal: f64,
    pub feat: f64,
    pub tex: f64,
    pub adv: f64,
    pub feature_layer: String,
    pub texture_layers: Vec<TextureLayer>,
    pub kl_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sal: 1e0,
            feat: 1e-2,
            tex: 2e-2,
            adv: 1e-1,
            feature_layer: "relu5_2".into(),
            texture_layers: ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"]
                .into_iter()
                .map(|l| TextureLayer {
                    layer: l.into(),
                    weight: 1.0,
                })
                .collect(),
            kl_eps: DEFAULT_KL_EPS,
        }
    }
}

impl LossWeights {
    /// Only the saliency term.
    pub fn saliency_only() -> Self {
        LossWeights {
            feat: 0.0,
            tex: 0.0,
            adv: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sal", self.sal), ("feat", self.feat), ("tex", self.tex), ("adv", self.adv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and nonnegative, got {v}")));
            }
        }
        if self.tex > 0.0 && self.texture_layers.is_empty() {
            return Err(Error::Config("texture loss needs at least one layer".into()));
        }
        if self.texture_layers.iter().any(|t| !(t.weight >= 0.0 && t.weight.is_finite())) {
            return Err(Error::Config("texture layer weights must be finite and nonnegative".into()));
        }
        if !(self.kl_eps > 0.0) {
            return Err(Error::Config("kl_eps must be positive".into()));
        }
        Ok(())
    }

    /// Sets a weight by its name (`sal`, `feat`, `tex`, `adv`).
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "sal" => self.sal = value,
            "feat" => self.feat = value,
            "tex" => self.tex = value,
            "adv" => self.adv = value,
            other => return Err(Error::Usage(format!("unknown loss weight `{other}` (expected sal, feat, tex, adv)"))),
        }
        Ok(())
    }

    /// Layers the feature and texture terms read from the backbone.
    pub fn layers(&self) -> Vec<&str> {
        let mut v: Vec<&str> = Vec::new();
        if self.feat > 0.0 {
            v.push(&self.feature_layer);
        }
        if self.tex > 0.0 {
            for t in &self.texture_layers {
                if !v.contains(&t.layer.as_str()) {
                    v.push(&t.layer);
                }
            }
        }
        v
    }
}

fn batch_of(v: &[usize]) -> f64 {
    v.first().copied().unwrap_or(1).max(1) as f64
}

/// `KL(p_t || p_hat)` with the prediction clamped at `eps`.
pub fn saliency_loss<'t>(p_t: &Tensor, p_hat: Var<'t>, eps: f64) -> Result<Var<'t>> {
    p_hat.kl_from_target(p_t, eps)
}

/// Tape-free [`saliency_loss`].
pub fn saliency_loss_values(p_t: &Tensor, p_hat: &Tensor, eps: f64) -> Result<f64> {
    if p_t.shape() != p_hat.shape() {
        return Err(shape_err!("KL extents differ: {:?} vs {:?}", p_t.shape(), p_hat.shape()));
    }
    let b = batch_of(p_t.shape());
    Ok(crate::autodiff::kl_sum(p_t.data(), p_hat.data(), eps) / b)
}

/// `(1 / (N M)) sum (F(I_hat) - F(I))^2`.
pub fn feature_loss<'t>(f_hat: Var<'t>, f: Var<'t>) -> Result<Var<'t>> {
    Ok(f_hat.sub(f)?.square().mean())
}

/// `sum_l w_l (1 / N_l^2) sum_ij (G_l(I_hat) - G_l(I))^2`, with `layers`
/// holding `(F_l(I_hat), G_l(I), w_l)` and `G_l(I)` shaped `[B, N, N]`.
pub fn texture_loss<'t>(layers: &[(Var<'t>, Var<'t>, f64)]) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for &(f_hat, g_ref, w) in layers {
        let g_hat = f_hat.gram()?;
        let s = g_hat.shape();
        let n = s[1] as f64;
        let e = g_hat.sub(g_ref)?.square().sum().scale(w / (n * n * batch_of(&s)));
        total = Some(match total {
            Some(t) => t.add(e)?,
            None => e,
        });
    }
    total.ok_or_else(|| Error::Usage("texture loss needs at least one layer".into()))
}

/// `sum (1 - D)^2`.
pub fn adv_generator_loss(d_out: Var<'_>) -> Result<Var<'_>> {
    let s = d_out.shape();
    let one = Tensor::ones(&s);
    Ok(d_out.sub_const(&one)?.square().sum().scale(1.0 / batch_of(&s)))
}

/// `1/2 sum (D_fake^2 + (1 - D_real)^2)`.
pub fn adv_discriminator_loss<'t>(d_fake: Var<'t>, d_real: Var<'t>) -> Result<Var<'t>> {
    let s = d_fake.shape();
    if s != d_real.shape() {
        return Err(shape_err!("discriminator outputs differ: {:?} vs {:?}", s, d_real.shape()));
    }
    let one = Tensor::ones(&s);
    let fake = d_fake.square().sum();
    let real = d_real.sub_const(&one)?.square().sum();
    Ok(fake.add(real)?.scale(0.5 / batch_of(&s)))
}

/// Per-term values of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sal: f64,
    pub l_feat: f64,
    pub l_tex: f64,
    pub l_adv: f64,
    pub l_d: f64,
    pub total: f64,
}

impl LossReport {
    /// `lambda_s L_sal + lambda_f L_feat + lambda_t L_tex + lambda_a L_adv`.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.sal * self.l_sal + w.feat * self.l_feat + w.tex * self.l_tex + w.adv * self.l_adv
    }
}

/// Builds a report from raw terms, rejecting non-finite ones by name.
pub fn total_loss(terms: [f64; 5], weights: &LossWeights, step: usize) -> Result<LossReport> {
    let names = ["L_sal", "L_feat", "L_tex", "L_adv", "L_D"];
    for (name, v) in names.iter().zip(terms) {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: (*name).into(),
                step,
            });
        }
    }
    let [l_sal, l_feat, l_tex, l_adv, l_d] = terms;
    let mut r = LossReport {
        l_sal,
        l_feat,
        l_tex,
        l_adv,
        l_d,
        total: 0.0,
    };
    r.total = r.weighted_total(weights);
    Ok(r)
}

pub const CSV_HEADER: [&str; 7] = ["step", "L_sal", "L_feat", "L_tex", "L_adv", "L_D", "total"];

/// One row per step.
pub struct LossCsv {
    w: csv::Writer<Box<dyn Write>>,
}

impl LossCsv {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Self::from_writer(Box::new(std::io::BufWriter::new(f)))
    }

    pub fn from_writer(w: Box<dyn Write>) -> Result<Self> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        Ok(LossCsv { w })
    }

    pub fn row(&mut self, step: usize, r: &LossReport) -> Result<()> {
        let fields = [r.l_sal, r.l_feat, r.l_tex, r.l_adv, r.l_d, r.total];
        let mut rec = vec![step.to_string()];
        // `{:?}` on f64 prints the shortest string that parses back exactly.
        rec.extend(fields.iter().map(|v| format!("{v:?}")));
        self.w.write_record(&rec).map_err(csv_err)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io("<loss csv>", e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Reads a loss CSV back into `(step, report)` rows.
pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, LossReport)>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Format(format!("{}: unexpected loss CSV header {:?}", path.display(), header)));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(csv_err)?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line,
                message: format!("bad value in column {}", CSV_HEADER[k]),
            })
        };
        let step = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line,
            message: "bad step".into(),
        })?;
        out.push((
            step,
            LossReport {
                l_sal: num(1)?,
                l_feat: num(2)?,
                l_tex: num(3)?,
                l_adv: num(4)?,
                l_d: num(5)?,
                total: num(6)?,
            },
        ));
    }
    Ok(out)
}
