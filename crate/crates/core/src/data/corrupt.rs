use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::ImageSample;
use crate::error::{Error, Result};
use crate::rng::{derive, rng};

pub const MAX_SEVERITY: u8 = 5;

const GAUSSIAN_SIGMA: [f64; 6] = [0.0, 0.04, 0.08, 0.12, 0.18, 0.26];
const IMPULSE_FRACTION: [f64; 6] = [0.0, 0.01, 0.03, 0.06, 0.10, 0.17];
// index 0 (λ = ∞) is never used: severity 0 short-circuits to identity
const SHOT_LAMBDA: [f64; 6] = [f64::INFINITY, 500.0, 250.0, 125.0, 60.0, 25.0];
const DEFOCUS_RADIUS: [usize; 6] = [0, 1, 2, 3, 5, 7];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    ShotNoise,
    DefocusBlur,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::DefocusBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        check_severity(severity)?;
        Ok(Corruption { kind, severity })
    }

    /// Every kind at severities 1..=5.
    pub fn grid() -> Vec<Corruption> {
        CorruptionKind::ALL
            .iter()
            .flat_map(|&kind| (1..=MAX_SEVERITY).map(move |severity| Corruption { kind, severity }))
            .collect()
    }
}

fn check_severity(s: u8) -> Result<()> {
    if s > MAX_SEVERITY {
        return Err(Error::Argument(format!("severity {s} outside 0..={MAX_SEVERITY}")));
    }
    Ok(())
}

/// Applies `c` with noise drawn from `seed`; severity 0 returns the input unchanged.
pub fn apply_corruption(img: &ImageSample, c: Corruption, seed: u64) -> Result<ImageSample> {
    check_severity(c.severity)?;
    let s = c.severity as usize;
    if s == 0 {
        return Ok(img.clone());
    }
    let mut r = rng(derive(seed, (c.kind as u64) << 8 | s as u64));
    let src: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    let out: Vec<f64> = match c.kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, GAUSSIAN_SIGMA[s]).unwrap();
            src.iter().map(|x| x + n.sample(&mut r)).collect()
        }
        CorruptionKind::ImpulseNoise => {
            let p = IMPULSE_FRACTION[s];
            src.iter()
                .map(|&x| {
                    if r.random::<f64>() < p {
                        if r.random::<bool>() { 1.0 } else { 0.0 }
                    } else {
                        x
                    }
                })
                .collect()
        }
        CorruptionKind::ShotNoise => {
            let lambda = SHOT_LAMBDA[s];
            src.iter()
                .map(|&x| poisson_inverse(x * lambda, r.random::<f64>()) as f64 / lambda)
                .collect()
        }
        CorruptionKind::DefocusBlur => disk_blur(&src, img.height, img.width, DEFOCUS_RADIUS[s]),
    };
    Ok(ImageSample {
        pixels: out.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        ..img.clone()
    })
}

/// Inverse-transform Poisson draw: the smallest `k` with CDF(k) ≥ `u`.
fn poisson_inverse(mean: f64, u: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0u64;
    // rounding can leave the running CDF just short of 1
    let cap = (mean + 40.0 * mean.sqrt() + 40.0) as u64;
    while u > cdf && k < cap {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Convolution with a normalised disk of the given radius, reflect padding.
fn disk_blur(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let taps: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let n = taps.len() as f64;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for &(dx, dy) in &taps {
                    let yy = reflect(y as isize + dy, h);
                    let xx = reflect(x as isize + dx, w);
                    acc += src[(yy * w + xx) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc / n;
            }
        }
    }
    out
}
