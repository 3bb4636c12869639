//! Empirical fixation densities and the behavioural metrics computed on them.
//!
//! Densities are fitted as `(1 - a - b) KDE + a uniform + b center_bias`, with
//! the kernel width and both weights chosen by leave-one-subject-out
//! log-likelihood over a grid.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const FIXATION_HEADER: [&str; 6] = ["subject", "image", "block", "fix_index", "x", "y"];
pub const DURATION_COLUMN: &str = "duration_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixationRecord {
    pub subject: String,
    pub image: String,
    /// 1 to 3.
    pub block: u32,
    /// 1-based position within the trial.
    pub fix_index: u32,
    /// Pixel coordinates; pixel `j` covers `[j, j + 1)`.
    pub x: f64,
    pub y: f64,
    pub duration_ms: Option<f64>,
}

fn parse_err(path: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses fixation CSV text. `source` names the input in error messages.
pub fn parse_fixations(reader: impl Read, source: &str) -> Result<Vec<FixationRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| parse_err(source, 1, e.to_string()))?,
        None => return Err(parse_err(source, 1, "empty file, expected a header")),
    };
    let names: Vec<&str> = header.iter().collect();
    let with_duration = match names.as_slice() {
        [a @ .., d] if a == FIXATION_HEADER && *d == DURATION_COLUMN => true,
        a if a == FIXATION_HEADER => false,
        _ => {
            return Err(parse_err(
                source,
                1,
                format!("expected header `{}[,{DURATION_COLUMN}]`, found `{}`", FIXATION_HEADER.join(","), names.join(",")),
            ))
        }
    };
    let width = FIXATION_HEADER.len() + usize::from(with_duration);
    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(source, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(parse_err(source, line, format!("expected {width} fields, found {}", rec.len())));
        }
        let field = |i: usize| &rec[i];
        let int = |i: usize, lo: u32, hi: u32| -> Result<u32> {
            let v: u32 = field(i)
                .parse()
                .map_err(|_| parse_err(source, line, format!("`{}` is not an integer: `{}`", FIXATION_HEADER[i], field(i))))?;
            if !(lo..=hi).contains(&v) {
                return Err(parse_err(source, line, format!("`{}` must lie in {lo}..={hi}, got {v}", FIXATION_HEADER[i])));
            }
            Ok(v)
        };
        let real = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = field(i).parse().map_err(|_| parse_err(source, line, format!("`{name}` is not a number: `{}`", field(i))))?;
            if !v.is_finite() {
                return Err(parse_err(source, line, format!("`{name}` must be finite")));
            }
            Ok(v)
        };
        if field(0).is_empty() || field(1).is_empty() {
            return Err(parse_err(source, line, "subject and image ids must be nonempty"));
        }
        let x = real(4, "x")?;
        let y = real(5, "y")?;
        if x < 0.0 || y < 0.0 {
            return Err(parse_err(source, line, "coordinates must be nonnegative"));
        }
        let duration_ms = if with_duration && !field(6).is_empty() {
            let d = real(6, DURATION_COLUMN)?;
            if d < 0.0 {
                return Err(parse_err(source, line, "duration must be nonnegative"));
            }
            Some(d)
        } else {
            None
        };
        out.push(FixationRecord {
            subject: field(0).to_string(),
            image: field(1).to_string(),
            block: int(2, 1, 3)?,
            fix_index: int(3, 1, u32::MAX)?,
            x,
            y,
            duration_ms,
        });
    }
    Ok(out)
}

pub fn read_fixations(path: impl AsRef<Path>) -> Result<Vec<FixationRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_fixations(std::io::BufReader::new(f), &path.display().to_string())
}

pub fn write_fixations(path: impl AsRef<Path>, records: &[FixationRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let any_duration = records.iter().any(|r| r.duration_ms.is_some());
    let mut header: Vec<&str> = FIXATION_HEADER.to_vec();
    if any_duration {
        header.push(DURATION_COLUMN);
    }
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(&header).map_err(fmt)?;
    for r in records {
        let mut row = vec![r.subject.clone(), r.image.clone(), r.block.to_string(), r.fix_index.to_string(), format!("{:?}", r.x), format!("{:?}", r.y)];
        if any_duration {
            row.push(r.duration_ms.map(|d| format!("{d:?}")).unwrap_or_default());
        }
        w.write_record(&row).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rejects fixations outside `[0, w) x [0, h)` of their image.
pub fn check_bounds(records: &[FixationRecord], extents: &HashMap<String, (usize, usize)>) -> Result<()> {
    for r in records {
        let &(w, h) = extents
            .get(&r.image)
            .ok_or_else(|| Error::Usage(format!("fixation on unknown image `{}`", r.image)))?;
        if !(r.x < w as f64 && r.y < h as f64) {
            return Err(Error::Usage(format!(
                "fixation ({}, {}) of subject `{}` lies outside image `{}` ({w}x{h})",
                r.x, r.y, r.subject, r.image
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    All,
    FirstFixation,
    FirstBlock,
}

/// Keeps the first fixation of every trial (subject, image, block), or the
/// first block, or everything.
pub fn subset(records: &[FixationRecord], sel: Subset) -> Vec<FixationRecord> {
    match sel {
        Subset::All => records.to_vec(),
        Subset::FirstBlock => records.iter().filter(|r| r.block == 1).cloned().collect(),
        Subset::FirstFixation => {
            let mut first: HashMap<(&str, &str, u32), u32> = HashMap::new();
            for r in records {
                let e = first.entry((&r.subject, &r.image, r.block)).or_insert(r.fix_index);
                *e = (*e).min(r.fix_index);
            }
            let mut seen = BTreeSet::new();
            records
                .iter()
                .filter(|r| first[&(r.subject.as_str(), r.image.as_str(), r.block)] == r.fix_index && seen.insert((&r.subject, &r.image, r.block)))
                .cloned()
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityFitConfig {
    /// Kernel widths in grid cells.
    pub bandwidths: Vec<f64>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Image pixels per density cell along each axis.
    pub grid_divisor: usize,
}

impl Default for DensityFitConfig {
    fn default() -> Self {
        DensityFitConfig {
            bandwidths: vec![1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0],
            alphas: vec![0.0, 0.01, 0.05, 0.1, 0.2, 0.5],
            betas: vec![0.0, 0.1, 0.25, 0.5],
            grid_divisor: 1,
        }
    }
}

impl DensityFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() || self.alphas.is_empty() || self.betas.is_empty() {
            return Err(Error::Config("density fit grids must be nonempty".into()));
        }
        if self.bandwidths.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::Config("bandwidths must be positive and finite".into()));
        }
        if self.alphas.iter().chain(&self.betas).any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("mixture weights must be nonnegative and finite".into()));
        }
        let amax = self.alphas.iter().cloned().fold(0.0, f64::max);
        let bmax = self.betas.iter().cloned().fold(0.0, f64::max);
        if amax + bmax > 1.0 {
            return Err(Error::Config(format!("largest alpha {amax} plus largest beta {bmax} exceeds 1")));
        }
        if self.grid_divisor == 0 {
            return Err(Error::Config("grid_divisor must be positive".into()));
        }
        Ok(())
    }

    /// Density grid `(width, height)` for an image.
    pub fn grid(&self, w: usize, h: usize) -> Result<(usize, usize)> {
        let d = self.grid_divisor;
        if w % d != 0 || h % d != 0 {
            return Err(Error::Usage(format!("image {w}x{h} is not divisible by grid_divisor {d}")));
        }
        Ok((w / d, h / d))
    }
}

fn phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Mass of a unit 1-D Gaussian at `c` falling in each cell of `[0, n)`,
/// with the mass beyond either border reflected back in.
fn cell_masses(c: f64, sigma: f64, n: usize) -> Vec<f64> {
    let len = n as f64;
    let mut out = vec![0.0; n];
    for k in -2i32..=2 {
        let shift = 2.0 * k as f64 * len;
        for centre in [shift + c, shift - c] {
            if (centre - len * 0.5).abs() > len * 0.5 + 10.0 * sigma {
                continue;
            }
            let mut prev = phi((0.0 - centre) / sigma);
            for (j, o) in out.iter_mut().enumerate() {
                let next = phi((j as f64 + 1.0 - centre) / sigma);
                *o += next - prev;
                prev = next;
            }
        }
    }
    out
}

/// Gaussian KDE of `points` (grid coordinates) on a `w x h` grid, summing
/// to one.
pub fn kde(points: &[(f64, f64)], w: usize, h: usize, sigma: f64) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::Degenerate("KDE needs at least one point".into()));
    }
    if !(sigma > 0.0) || w == 0 || h == 0 {
        return Err(Error::Domain("KDE needs a positive bandwidth and a nonempty grid".into()));
    }
    let mut grid = vec![0.0; w * h];
    for &(x, y) in points {
        let mx = cell_masses(x, sigma, w);
        let my = cell_masses(y, sigma, h);
        for (yi, &a) in my.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (g, &b) in grid[yi * w..(yi + 1) * w].iter_mut().zip(&mx) {
                *g += a * b;
            }
        }
    }
    let total: f64 = grid.iter().sum();
    grid.iter_mut().for_each(|g| *g /= total);
    Ok(grid)
}

fn plane(t: &Tensor) -> Result<(usize, usize, &[f64])> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 1 {
        return Err(shape_err!("expected a single [1, 1, H, W] density, got {:?}", t.shape()));
    }
    Ok((w, h, t.data()))
}

/// Normalized mean of `densities` excluding entry `exclude`.
pub fn estimate_center_bias(densities: &[Tensor], exclude: usize) -> Result<Tensor> {
    if densities.len() < 2 {
        return Err(Error::Usage("center bias needs at least two images".into()));
    }
    if exclude >= densities.len() {
        return Err(Error::Usage(format!("image index {exclude} out of range")));
    }
    let shape = densities[0].shape().to_vec();
    let mut acc = vec![0.0; densities[0].numel()];
    for (i, d) in densities.iter().enumerate() {
        if d.shape() != shape.as_slice() {
            return Err(shape_err!("center-bias inputs differ in shape: {:?} vs {:?}", d.shape(), shape));
        }
        if i != exclude {
            acc.iter_mut().zip(d.data()).for_each(|(a, v)| *a += v);
        }
    }
    let total: f64 = acc.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("center-bias inputs carry no mass".into()));
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Tensor::new(shape, acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityFit {
    pub density: Tensor,
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Mean held-out log-likelihood per fixation of the chosen setting.
    pub log_likelihood: f64,
}

/// Fits one image's density. `w`, `h` are image extents in pixels.
pub fn fit_density(
    records: &[FixationRecord],
    w: usize,
    h: usize,
    cfg: &DensityFitConfig,
    center_bias: Option<&Tensor>,
) -> Result<DensityFit> {
    cfg.validate()?;
    let (gw, gh) = cfg.grid(w, h)?;
    let cells = gw * gh;
    let cb: Option<&[f64]> = match center_bias {
        Some(t) => {
            let (cw, ch, d) = plane(t)?;
            if (cw, ch) != (gw, gh) {
                return Err(shape_err!("center bias is {cw}x{ch}, density grid is {gw}x{gh}"));
            }
            Some(d)
        }
        None => None,
    };
    let betas: Vec<f64> = if cb.is_some() { cfg.betas.clone() } else { vec![0.0] };
    let scale = cfg.grid_divisor as f64;

    let mut by_subject: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        if !(r.x < w as f64 && r.y < h as f64) {
            return Err(Error::Usage(format!("fixation ({}, {}) lies outside {w}x{h}", r.x, r.y)));
        }
        by_subject.entry(&r.subject).or_default().push((r.x / scale, r.y / scale));
    }
    if by_subject.len() < 2 {
        return Err(Error::Usage(format!(
            "cross-validation over subjects needs at least two subjects, found {}",
            by_subject.len()
        )));
    }
    let cell_of = |(x, y): (f64, f64)| ((y as usize).min(gh - 1)) * gw + (x as usize).min(gw - 1);
    let uniform = 1.0 / cells as f64;
    let n_total: usize = by_subject.values().map(Vec::len).sum();

    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &sigma in &cfg.bandwidths {
        let mut sums = vec![vec![0.0; betas.len()]; cfg.alphas.len()];
        for (held, pts) in &by_subject {
            let train: Vec<(f64, f64)> = by_subject.iter().filter(|(s, _)| *s != held).flat_map(|(_, p)| p.iter().copied()).collect();
            let k = kde(&train, gw, gh, sigma)?;
            for &p in pts {
                let c = cell_of(p);
                for (ai, &a) in cfg.alphas.iter().enumerate() {
                    for (bi, &b) in betas.iter().enumerate() {
                        let v = (1.0 - a - b) * k[c] + a * uniform + b * cb.map_or(0.0, |d| d[c]);
                        sums[ai][bi] += v.ln();
                    }
                }
            }
        }
        for (ai, &a) in cfg.alphas.iter().enumerate() {
            for (bi, &b) in betas.iter().enumerate() {
                let score = sums[ai][bi] / n_total as f64;
                let better = match best {
                    None => true,
                    Some((bs, _, ba, _)) => score > bs || (score == bs && a > ba),
                };
                if better {
                    best = Some((score, sigma, a, b));
                }
            }
        }
    }
    let (score, sigma, alpha, beta) = best.expect("grids are nonempty");
    let all: Vec<(f64, f64)> = by_subject.values().flatten().copied().collect();
    let k = kde(&all, gw, gh, sigma)?;
    let mut d: Vec<f64> = (0..cells)
        .map(|c| (1.0 - alpha - beta) * k[c] + alpha * uniform + beta * cb.map_or(0.0, |d| d[c]))
        .collect();
    let total: f64 = d.iter().sum();
    d.iter_mut().for_each(|v| *v /= total);
    Ok(DensityFit {
        density: Tensor::new(vec![1, 1, gh, gw], d)?,
        sigma,
        alpha,
        beta,
        log_likelihood: score,
    })
}

/// `sum M p`.
pub fn object_probability(p: &Tensor, mask: &Tensor) -> Result<f64> {
    if p.shape() != mask.shape() {
        return Err(shape_err!("density {:?} and mask {:?} differ in extent", p.shape(), mask.shape()));
    }
    Ok(p.data().iter().zip(mask.data()).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyBase {
    Nats,
    Bits,
}

/// `-sum p log p` with `0 log 0 = 0`.
pub fn entropy(p: &Tensor, base: EntropyBase) -> f64 {
    let log = match base {
        EntropyBase::Nats => f64::ln,
        EntropyBase::Bits => f64::log2,
    };
    p.data().iter().filter(|&&v| v > 0.0).map(|&v| -v * log(v)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Change {
    pub absolute: f64,
    /// `None` when `before` is not positive.
    pub relative: Option<f64>,
}

pub fn relative_change(before: f64, after: f64) -> Change {
    let absolute = after - before;
    Change {
        absolute,
        relative: (before > 0.0).then(|| absolute / before),
    }
}

/// One stimulus in an analysis: an original image or a manipulated copy.
#[derive(Clone, Debug)]
pub struct Stimulus {
    pub id: String,
    /// The unmanipulated stimulus this one derives from; itself for originals.
    pub original: String,
    pub width: usize,
    pub height: usize,
    /// Target object mask at image resolution, required when `object_targeted`.
    pub mask: Option<Tensor>,
    pub object_targeted: bool,
    /// Model-predicted density on its own grid, if a model was supplied.
    pub model_density: Option<Tensor>,
}

pub const REPORT_COLUMNS: [&str; 16] = [
    "stimulus",
    "original",
    "fixations",
    "sigma",
    "alpha",
    "beta",
    "p_obj",
    "p_obj_original",
    "p_obj_change",
    "p_obj_change_rel",
    "entropy_bits",
    "entropy_change",
    "model_p_obj",
    "model_p_obj_change",
    "model_entropy_bits",
    "model_entropy_change",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stimulus: String,
    pub original: String,
    pub fixations: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub p_obj: Option<f64>,
    pub p_obj_original: Option<f64>,
    pub p_obj_change: Option<f64>,
    pub p_obj_change_rel: Option<f64>,
    pub entropy_bits: f64,
    pub entropy_change: f64,
    pub model_p_obj: Option<f64>,
    pub model_p_obj_change: Option<f64>,
    pub model_entropy_bits: Option<f64>,
    pub model_entropy_change: Option<f64>,
}

impl ReportRow {
    fn numeric(&self) -> [Option<f64>; 14] {
        [
            Some(self.fixations as f64),
            Some(self.sigma),
            Some(self.alpha),
            Some(self.beta),
            self.p_obj,
            self.p_obj_original,
            self.p_obj_change,
            self.p_obj_change_rel,
            Some(self.entropy_bits),
            Some(self.entropy_change),
            self.model_p_obj,
            self.model_p_obj_change,
            self.model_entropy_bits,
            self.model_entropy_change,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub rows: Vec<ReportRow>,
    /// Mean of each numeric column over the rows where it is present.
    pub aggregate: Vec<Option<f64>>,
    pub densities: Vec<DensityFit>,
}

fn mask_on_grid(mask: &Tensor, gw: usize, gh: usize) -> Result<Tensor> {
    let (w, h, _) = plane(mask)?;
    if w % gw != 0 || h % gh != 0 || w / gw != h / gh {
        return Err(shape_err!("mask {w}x{h} does not reduce to a {gw}x{gh} grid"));
    }
    crate::ops::downsample_avg(mask, w / gw)
}

/// Fits densities for every stimulus (center bias from all other stimuli,
/// fitted in a first pass without it) and compares each with its original.
pub fn analysis_report(stimuli: &[Stimulus], records: &[FixationRecord], cfg: &DensityFitConfig) -> Result<AnalysisReport> {
    cfg.validate()?;
    if stimuli.is_empty() {
        return Err(Error::Usage("analysis needs at least one stimulus".into()));
    }
    let index: HashMap<&str, usize> = stimuli.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    if index.len() != stimuli.len() {
        return Err(Error::Usage("duplicate stimulus ids".into()));
    }
    for s in stimuli {
        if !index.contains_key(s.original.as_str()) {
            return Err(Error::Usage(format!("stimulus `{}` names unknown original `{}`", s.id, s.original)));
        }
        if s.object_targeted && s.mask.is_none() {
            return Err(Error::Usage(format!("object-targeted stimulus `{}` has no mask", s.id)));
        }
    }
    let extents: HashMap<String, (usize, usize)> = stimuli.iter().map(|s| (s.id.clone(), (s.width, s.height))).collect();
    check_bounds(records, &extents)?;
    let mut per: Vec<Vec<FixationRecord>> = vec![Vec::new(); stimuli.len()];
    for r in records {
        per[index[r.image.as_str()]].push(r.clone());
    }

    let first_pass_cfg = DensityFitConfig {
        betas: vec![0.0],
        ..cfg.clone()
    };
    let first: Vec<DensityFit> = stimuli
        .par_iter()
        .zip(&per)
        .map(|(s, r)| fit_density(r, s.width, s.height, &first_pass_cfg, None))
        .collect::<Result<_>>()?;
    let same_grid = first.windows(2).all(|w| w[0].density.shape() == w[1].density.shape());
    let fits: Vec<DensityFit> = if stimuli.len() >= 2 && same_grid {
        let dens: Vec<Tensor> = first.iter().map(|f| f.density.clone()).collect();
        stimuli
            .par_iter()
            .zip(&per)
            .enumerate()
            .map(|(i, (s, r))| {
                let cb = estimate_center_bias(&dens, i)?;
                fit_density(r, s.width, s.height, cfg, Some(&cb))
            })
            .collect::<Result<_>>()?
    } else {
        first
    };

    let mut rows = Vec::with_capacity(stimuli.len());
    for (i, s) in stimuli.iter().enumerate() {
        let o = index[s.original.as_str()];
        let (fit, ofit) = (&fits[i], &fits[o]);
        // The stimulus' own mask, else its original's.
        let mask = s.mask.as_ref().or(stimuli[o].mask.as_ref());
        let on = |d: &Tensor| -> Result<Option<f64>> {
            match mask {
                Some(m) => {
                    let s = d.shape();
                    Ok(Some(object_probability(d, &mask_on_grid(m, s[3], s[2])?)?))
                }
                None => Ok(None),
            }
        };
        let p_obj = on(&fit.density)?;
        let p_obj_original = on(&ofit.density)?;
        let change = p_obj.zip(p_obj_original).map(|(a, b)| relative_change(b, a));
        let h = entropy(&fit.density, EntropyBase::Bits);
        let ho = entropy(&ofit.density, EntropyBase::Bits);
        let (mp, mpo) = (s.model_density.as_ref(), stimuli[o].model_density.as_ref());
        let model_p_obj = mp.map(&on).transpose()?.flatten();
        let model_p_obj_o = mpo.map(&on).transpose()?.flatten();
        let model_h = mp.map(|d| entropy(d, EntropyBase::Bits));
        let model_ho = mpo.map(|d| entropy(d, EntropyBase::Bits));
        rows.push(ReportRow {
            stimulus: s.id.clone(),
            original: s.original.clone(),
            fixations: per[i].len(),
            sigma: fit.sigma,
            alpha: fit.alpha,
            beta: fit.beta,
            p_obj,
            p_obj_original,
            p_obj_change: change.map(|c| c.absolute),
            p_obj_change_rel: change.and_then(|c| c.relative),
            entropy_bits: h,
            entropy_change: h - ho,
            model_p_obj,
            model_p_obj_change: model_p_obj.zip(model_p_obj_o).map(|(a, b)| a - b),
            model_entropy_bits: model_h,
            model_entropy_change: model_h.zip(model_ho).map(|(a, b)| a - b),
        });
    }
    let aggregate = aggregate_rows(&rows);
    Ok(AnalysisReport {
        rows,
        aggregate,
        densities: fits,
    })
}

/// Column means over the numeric report columns, skipping empty cells.
pub fn aggregate_rows(rows: &[ReportRow]) -> Vec<Option<f64>> {
    let cols: Vec<[Option<f64>; 14]> = rows.iter().map(ReportRow::numeric).collect();
    (0..14)
        .map(|j| {
            let vals: Vec<f64> = cols.iter().filter_map(|c| c[j]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

/// Writes the per-stimulus rows followed by an `aggregate` row.
pub fn write_report(path: impl AsRef<Path>, report: &AnalysisReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let cell = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    w.write_record(REPORT_COLUMNS).map_err(fmt)?;
    for r in &report.rows {
        let mut rec = vec![r.stimulus.clone(), r.original.clone()];
        rec.extend(r.numeric().iter().map(|&v| cell(v)));
        w.write_record(&rec).map_err(fmt)?;
    }
    let mut rec = vec!["aggregate".to_string(), String::new()];
    rec.extend(report.aggregate.iter().map(|&v| cell(v)));
    w.write_record(&rec).map_err(fmt)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a report CSV back as `(stimulus, cells)` rows, the aggregate row last.
pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<Option<f64>>)>> {
    let path = path.as_ref();
    let src = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{src}: {e}")))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(format!("{src}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals = rec
            .iter()
            .skip(2)
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse().map(Some).map_err(|_| parse_err(&src, line, format!("bad number `{c}`")))
                }
            })
            .collect::<Result<_>>()?;
        out.push((rec[0].to_string(), vals));
    }
    Ok(out)
}
