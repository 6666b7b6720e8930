//! Objective metrics: global variance, mel-cepstral distortion with DTW
//! alignment, and modulation spectral distance.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::FEATURE_DIM;

const D: usize = FEATURE_DIM;

/// Per-dimension variance averaged over utterances, and its mean over
/// dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GvProfile {
    pub per_dim: Vec<f64>,
    pub average: f64,
}

/// Population variance over frames per dimension, averaged over utterances.
pub fn global_variance<'a>(utterances: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<GvProfile> {
    let mut acc = vec![0.0; D];
    let mut n = 0usize;
    for u in utterances {
        let t = u.frames() as f64;
        let mut mean = [0.0f64; D];
        for f in 0..u.frames() {
            for (m, &v) in mean.iter_mut().zip(u.frame(f)) {
                *m += v as f64;
            }
        }
        for m in &mut mean {
            *m /= t;
        }
        let mut var = [0.0f64; D];
        for f in 0..u.frames() {
            for (d, &v) in u.frame(f).iter().enumerate() {
                let e = v as f64 - mean[d];
                var[d] += e * e;
            }
        }
        for (a, v) in acc.iter_mut().zip(var) {
            *a += v / t;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty);
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    let average = acc.iter().sum::<f64>() / D as f64;
    Ok(GvProfile { per_dim: acc, average })
}

/// `10 / ln 10`, the dB scale of mel-cepstral distortion.
pub const MCD_SCALE: f64 = 4.342_944_819_032_518;

fn frame_mcd(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    MCD_SCALE * libm::sqrt(2.0 * s)
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    libm::sqrt(s)
}

/// Frame pairs of the alignment used by [`mcd`] and [`msd`]: the identity
/// pairing for equal lengths, otherwise the DTW path.
pub fn aligned_pairs(a: &FeatureSequence, b: &FeatureSequence) -> Vec<(usize, usize)> {
    if a.frames() == b.frames() {
        (0..a.frames()).map(|i| (i, i)).collect()
    } else {
        dtw_align(a, b).pairs
    }
}

/// Mean mel-cepstral distortion in dB over aligned frame pairs, using all
/// stored coefficients.
pub fn mcd(a: &FeatureSequence, b: &FeatureSequence) -> f64 {
    let pairs = aligned_pairs(a, b);
    let total: f64 = pairs.iter().map(|&(i, j)| frame_mcd(a.frame(i), b.frame(j))).sum();
    total / pairs.len() as f64
}

/// Monotone alignment from `(0, 0)` to `(T_a - 1, T_b - 1)` and its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimum-cost DTW path under Euclidean frame distance.
pub fn dtw_align(a: &FeatureSequence, b: &FeatureSequence) -> AlignmentPath {
    dtw_align_with(a.frames(), b.frames(), |i, j| euclid(a.frame(i), b.frame(j)))
}

/// DTW over an arbitrary frame distance with steps `(1,0)`, `(0,1)` and
/// `(1,1)`. Ties prefer the diagonal step, then `(1,0)`.
///
/// # Panics
/// If either length is zero.
pub fn dtw_align_with(n: usize, m: usize, dist: impl Fn(usize, usize) -> f64) -> AlignmentPath {
    assert!(n > 0 && m > 0, "dtw needs non-empty sequences");
    let mut acc = vec![f64::INFINITY; n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[at(i - 1, j - 1)] } else { f64::INFINITY };
                let up = if i > 0 { acc[at(i - 1, j)] } else { f64::INFINITY };
                let left = if j > 0 { acc[at(i, j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[at(i, j)] = best + dist(i, j);
        }
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[at(i - 1, j - 1)] } else { f64::INFINITY };
        let up = if i > 0 { acc[at(i - 1, j)] } else { f64::INFINITY };
        let left = if j > 0 { acc[at(i, j - 1)] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    AlignmentPath {
        pairs,
        cost: acc[at(n - 1, m - 1)],
    }
}

/// Segmenting parameters of the modulation spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsdConfig {
    pub segment: usize,
    pub hop: usize,
}

impl Default for MsdConfig {
    fn default() -> Self {
        Self { segment: 64, hop: 32 }
    }
}

/// Guards the log against exactly-zero power.
const LOG_FLOOR: f64 = 1e-30;

/// Log modulation power spectrum, `D` rows of `segment / 2 + 1` bins: per
/// dimension, Hann-windowed segments are transformed and their power
/// averaged before the natural log.
pub fn modulation_spectrum(frames: &[&[f32]], cfg: MsdConfig) -> Result<Vec<f64>> {
    let n = cfg.segment;
    if n == 0 || cfg.hop == 0 {
        return Err(Error::Config("segment and hop must be positive".into()));
    }
    if frames.len() < n {
        return Err(Error::TooShort {
            frames: frames.len(),
            segment: n,
        });
    }
    let bins = n / 2 + 1;
    let tau = 2.0 * core::f64::consts::PI;
    let window: Vec<f64> = (0..n).map(|k| 0.5 - 0.5 * libm::cos(tau * k as f64 / n as f64)).collect();
    let cos: Vec<f64> = (0..n).map(|k| libm::cos(tau * k as f64 / n as f64)).collect();
    let sin: Vec<f64> = (0..n).map(|k| libm::sin(tau * k as f64 / n as f64)).collect();
    let starts: Vec<usize> = (0..=frames.len() - n).step_by(cfg.hop).collect();
    let mut out = vec![0.0; D * bins];
    let mut seg = vec![0.0; n];
    for d in 0..D {
        let row = &mut out[d * bins..(d + 1) * bins];
        for &s in &starts {
            for k in 0..n {
                seg[k] = window[k] * frames[s + k][d] as f64;
            }
            for (f, p) in row.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for (k, &x) in seg.iter().enumerate() {
                    let idx = (f * k) % n;
                    re += x * cos[idx];
                    im -= x * sin[idx];
                }
                *p += re * re + im * im;
            }
        }
        for p in row.iter_mut() {
            *p = libm::log(*p / starts.len() as f64 + LOG_FLOOR);
        }
    }
    Ok(out)
}

/// Root-mean-square difference of the log modulation spectra of `a` and `b`
/// over all (dimension, bin) cells, after alignment.
pub fn msd(a: &FeatureSequence, b: &FeatureSequence) -> Result<f64> {
    msd_with(a, b, MsdConfig::default())
}

pub fn msd_with(a: &FeatureSequence, b: &FeatureSequence, cfg: MsdConfig) -> Result<f64> {
    let pairs = aligned_pairs(a, b);
    let fa: Vec<&[f32]> = pairs.iter().map(|&(i, _)| a.frame(i)).collect();
    let fb: Vec<&[f32]> = pairs.iter().map(|&(_, j)| b.frame(j)).collect();
    let sa = modulation_spectrum(&fa, cfg)?;
    let sb = modulation_spectrum(&fb, cfg)?;
    let ss: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(libm::sqrt(ss / sa.len() as f64))
}
