#![allow(dead_code)]

use gazeforge::fixation::FixationRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Gaussian blob truncated to a `size x size` image, evaluated at pixel
/// centres and normalized.
pub fn blob_density(center: (f64, f64), sigma: f64, size: usize) -> Vec<f64> {
    let mut d: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            let r2 = (x - center.0).powi(2) + (y - center.1).powi(2);
            (-r2 / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let t: f64 = d.iter().sum();
    d.iter_mut().for_each(|v| *v /= t);
    d
}

/// Fixations drawn from the truncated blob by rejection, `per` per subject.
pub fn blob_fixations(seed: u64, image: &str, center: (f64, f64), sigma: f64, subjects: usize, per: usize, size: usize) -> Vec<FixationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = Normal::new(center.0, sigma).unwrap();
    let ny = Normal::new(center.1, sigma).unwrap();
    let mut out = Vec::new();
    for s in 0..subjects {
        for k in 0..per {
            let (x, y) = loop {
                let (x, y) = (nx.sample(&mut rng), ny.sample(&mut rng));
                if (0.0..size as f64).contains(&x) && (0.0..size as f64).contains(&y) {
                    break (x, y);
                }
            };
            out.push(FixationRecord {
                subject: format!("s{s:02}"),
                image: image.to_string(),
                block: 1 + (k % 3) as u32,
                fix_index: 1 + (k / 3) as u32,
                x,
                y,
                duration_ms: Some(rng.random_range(100.0..400.0)),
            });
        }
    }
    out
}

/// `sum p ln(p / q)` over cells with `p > 0`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}
