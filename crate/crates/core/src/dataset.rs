//! Synthetic stimuli: textured backgrounds with composited high-contrast
//! rectangles and disks, each with an exact binary mask.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "gazeforge-dataset-1";

/// Range of the per-image background texture amplitude.
pub const BACKGROUND_TEXTURE: (f64, f64) = (0.03, 0.12);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n: usize,
    pub size: usize,
    pub objects_per_image: usize,
    pub seed: u64,
    /// Every k-th image (k = round(1 / test_fraction)) goes to the test split.
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: 40,
            size: 32,
            objects_per_image: 1,
            seed: 1,
            test_fraction: 0.2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Usage("dataset size n must be positive".into()));
        }
        if self.size == 0 || self.size % 16 != 0 {
            return Err(Error::Usage(format!("image size must be a positive multiple of 16, got {}", self.size)));
        }
        if self.objects_per_image == 0 {
            return Err(Error::Usage("objects_per_image must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Usage(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMask {
    pub object_id: u32,
    /// `[1, 1, H, W]` with values in `[0, 1]`.
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    /// `[1, 3, H, W]` display RGB, quantized to 8 bits.
    pub image: Tensor,
    pub masks: Vec<ObjectMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub object_id: u32,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub size: usize,
    pub config: Option<DatasetConfig>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    Disk { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, h, w } => (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x),
            Shape::Disk { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

fn q8(v: f64) -> f64 {
    pnm::quantize(v, 255) as f64 / 255.0
}

fn make_sample(idx: usize, cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Sample {
    let s = cfg.size;
    let hw = s * s;
    // Background: a soft two-colour gradient, value noise on a 4 px lattice
    // with a per-image amplitude, and faint pixel noise.
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let cell = 4;
    let g = s / cell + 2;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tex_amp = rng.random_range(BACKGROUND_TEXTURE.0..BACKGROUND_TEXTURE.1);
    let mut img = vec![0.0; 3 * hw];
    for y in 0..s {
        for x in 0..s {
            let u = ((x as f64 / s as f64 - 0.5) * ca + (y as f64 / s as f64 - 0.5) * sa + 0.5).clamp(0.0, 1.0);
            let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |a: usize, b: usize| lattice[a * g + b];
            let v = (1.0 - ty) * ((1.0 - tx) * at(iy, ix) + tx * at(iy, ix + 1)) + ty * ((1.0 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
            let noise = rng.random_range(-0.02..0.02);
            for c in 0..3 {
                img[c * hw + y * s + x] = c0[c] + (c1[c] - c0[c]) * u + tex_amp * v + noise;
            }
        }
    }

    let mut taken = vec![false; hw];
    let mut masks = Vec::new();
    let (lo, hi) = ((s * 5 / 16).max(3), (s * 8 / 16).max(4));
    for k in 0..cfg.objects_per_image {
        // Rejection sampling keeps objects disjoint so masks are exact.
        let mut placed = None;
        for _ in 0..64 {
            let shape = if rng.random_bool(0.5) {
                let h = rng.random_range(lo..=hi);
                let w = rng.random_range(lo..=hi);
                Shape::Rect {
                    y0: rng.random_range(0..=s - h),
                    x0: rng.random_range(0..=s - w),
                    h,
                    w,
                }
            } else {
                let r = rng.random_range(lo as f64 / 2.0..=hi as f64 / 2.0);
                Shape::Disk {
                    cy: rng.random_range(r..=s as f64 - r),
                    cx: rng.random_range(r..=s as f64 - r),
                    r,
                }
            };
            let cells: Vec<usize> = (0..hw).filter(|&i| shape.contains(i / s, i % s)).collect();
            if !cells.is_empty() && cells.iter().all(|&i| !taken[i]) {
                placed = Some(cells);
                break;
            }
        }
        let Some(cells) = placed else { continue };
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
        let amp = rng.random_range(0.25..0.4);
        let period = rng.random_range(2..=4);
        let mut mask = Tensor::zeros(&[1, 1, s, s]);
        for &i in &cells {
            taken[i] = true;
            mask.data_mut()[i] = 1.0;
            let (y, x) = (i / s, i % s);
            let sign = if (y / period + x / period) % 2 == 0 { 1.0 } else { -1.0 };
            for c in 0..3 {
                img[c * hw + i] = base[c] + sign * amp;
            }
        }
        masks.push(ObjectMask {
            object_id: k as u32 + 1,
            mask,
        });
    }
    let image = Tensor::new(vec![1, 3, s, s], img.into_iter().map(q8).collect()).expect("sized");
    let stride = if cfg.test_fraction > 0.0 {
        (1.0 / cfg.test_fraction).round().max(1.0) as usize
    } else {
        usize::MAX
    };
    let split = if stride != usize::MAX && idx % stride == stride - 1 { Split::Test } else { Split::Train };
    Sample {
        id: format!("img{idx:04}"),
        split,
        image,
        masks,
    }
}

/// Deterministic under `cfg.seed`.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = (0..cfg.n).map(|i| make_sample(i, cfg, &mut rng)).collect();
    Ok(Dataset { size: cfg.size, samples })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Writes images, masks, and `manifest.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, config: Option<&DatasetConfig>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let image = format!("images/{}.ppm", s.id);
            pnm::write_rgb(dir.join(&image), &s.image)?;
            let mut objects = Vec::new();
            for m in &s.masks {
                let mask = format!("masks/{}_obj{}.pgm", s.id, m.object_id);
                pnm::write_mask(dir.join(&mask), &m.mask)?;
                objects.push(ObjectEntry {
                    object_id: m.object_id,
                    mask,
                });
            }
            entries.push(ManifestEntry {
                id: s.id.clone(),
                split: s.split,
                image,
                objects,
            });
        }
        let manifest = DatasetManifest {
            format: MANIFEST_FORMAT.into(),
            size: self.size,
            config: config.cloned(),
            entries,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a dataset from its manifest; relative paths resolve against the
    /// manifest's directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
        let path = manifest_path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!("unsupported dataset format `{}`", manifest.format)));
        }
        let root = path.parent().unwrap_or(Path::new("."));
        let mut ids = BTreeSet::new();
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            if !ids.insert(e.id.clone()) {
                return Err(Error::Usage(format!("duplicate image id `{}` in {}", e.id, path.display())));
            }
            let image = pnm::read_rgb(root.join(&e.image))?;
            if image.shape()[2] != manifest.size || image.shape()[3] != manifest.size {
                return Err(Error::Format(format!("{} is not {}x{}", e.image, manifest.size, manifest.size)));
            }
            let masks = e
                .objects
                .iter()
                .map(|o| {
                    let mask = pnm::read_gray(root.join(&o.mask))?;
                    if mask.shape()[2..] != image.shape()[2..] {
                        return Err(Error::Format(format!("mask {} does not match its image", o.mask)));
                    }
                    Ok(ObjectMask {
                        object_id: o.object_id,
                        mask,
                    })
                })
                .collect::<Result<_>>()?;
            samples.push(Sample {
                id: e.id.clone(),
                split: e.split,
                image,
                masks,
            });
        }
        Ok(Dataset {
            size: manifest.size,
            samples,
        })
    }
}
