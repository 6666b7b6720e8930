//! Synthetic multi-speaker cepstral corpus, batching and feature
//! normalization.
//!
//! Each speaker renders a shared kind of content trajectory `c(t)` through an
//! affine map `A_s c(t) + b_s` plus white noise. Training utterances carry
//! different content per speaker and utterance; evaluation utterances with
//! the same id share one content trajectory across speakers, so they form
//! exactly parallel pairs with a closed-form conversion
//! `A_t A_s^-1 (x - b_s) + b_t`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::FEATURE_DIM;

const D: usize = FEATURE_DIM;

/// One utterance: `frames` rows of [`FEATURE_DIM`] coefficients, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub speaker: usize,
    frames: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, speaker: usize, data: Vec<f32>) -> Result<Self> {
        if data.is_empty() || !data.len().is_multiple_of(D) {
            return Err(Error::FeatureDim {
                expected: D,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature sequence"));
        }
        Ok(Self {
            id: id.into(),
            speaker,
            frames: data.len() / D,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * D..(t + 1) * D]
    }

    /// `[1, D, T]` tensor (channels first).
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let t = self.frames;
        let mut out = vec![T::ZERO; D * t];
        for (f, row) in self.data.chunks_exact(D).enumerate() {
            for (d, &v) in row.iter().enumerate() {
                out[d * t + f] = T::from_f64(v as f64);
            }
        }
        Tensor::from_parts(vec![1, D, t], out)
    }

    /// Inverse of [`to_tensor`](Self::to_tensor) for a `[1, D, T]` tensor.
    pub fn from_tensor<T: Real>(id: impl Into<String>, speaker: usize, x: &Tensor<T>) -> Result<Self> {
        let s = x.shape();
        if s.len() != 3 || s[0] != 1 || s[1] != D {
            return Err(Error::FeatureDim {
                expected: D,
                got: s.get(1).copied().unwrap_or(0),
            });
        }
        let t = s[2];
        let src = x.data();
        let mut data = vec![0.0f32; D * t];
        for f in 0..t {
            for d in 0..D {
                data[f * D + d] = src[d * t + f].to_f64() as f32;
            }
        }
        Self::new(id, speaker, data)
    }
}

/// Rendering map of one synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub name: String,
    pub group: String,
    /// Row-major `D x D` mixing matrix.
    pub mixing: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise: f64,
}

impl SpeakerSpec {
    pub fn identity(name: impl Into<String>, group: impl Into<String>) -> Self {
        let mut mixing = vec![0.0; D * D];
        for i in 0..D {
            mixing[i * D + i] = 1.0;
        }
        Self {
            name: name.into(),
            group: group.into(),
            mixing,
            bias: vec![0.0; D],
            noise: 0.0,
        }
    }

    /// Renders a frame-major content trajectory; noise is drawn from `rng`
    /// only when the noise level is positive.
    pub fn render(&self, content: &[f64], rng: &mut dyn RngCore) -> Vec<f32> {
        let mut out = Vec::with_capacity(content.len());
        for c in content.chunks_exact(D) {
            for i in 0..D {
                let row = &self.mixing[i * D..(i + 1) * D];
                let mut v = self.bias[i];
                for (a, x) in row.iter().zip(c) {
                    v += a * x;
                }
                if self.noise > 0.0 {
                    let e: f64 = StandardNormal.sample(rng);
                    v += self.noise * e;
                }
                out.push(v as f32);
            }
        }
        out
    }
}

/// Speakers with their training and evaluation utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub speakers: Vec<SpeakerSpec>,
    pub train: Vec<Vec<FeatureSequence>>,
    pub eval: Vec<Vec<FeatureSequence>>,
}

impl Corpus {
    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speaker_index(&self, name: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSpeakerName(name.into()))
    }

    /// Checks structural consistency: one train/eval list per speaker,
    /// speaker indices in range, and parallel eval ids of equal length.
    pub fn validate(&self) -> Result<()> {
        let n = self.speakers.len();
        if n == 0 {
            return Err(Error::EmptySpeakerSet);
        }
        if self.train.len() != n || self.eval.len() != n {
            return Err(Error::Corpus(format!(
                "{n} speakers but {} train and {} eval lists",
                self.train.len(),
                self.eval.len()
            )));
        }
        for (s, utts) in self.train.iter().chain(&self.eval).enumerate() {
            let s = s % n;
            if let Some(u) = utts.iter().find(|u| u.speaker != s) {
                return Err(Error::Corpus(format!(
                    "utterance {} filed under speaker {s} claims speaker {}",
                    u.id, u.speaker
                )));
            }
        }
        for a in &self.eval[0] {
            for list in &self.eval[1..] {
                if let Some(b) = list.iter().find(|b| b.id == a.id) {
                    if b.frames != a.frames {
                        return Err(Error::Corpus(format!(
                            "parallel utterance {} has {} and {} frames",
                            a.id, a.frames, b.frames
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Minimum utterance length; lengths vary up to 25% above it.
    pub frames: usize,
    pub seed: u64,
    pub noise: f64,
}

impl CorpusSpec {
    pub const DEFAULT_NOISE: f64 = 0.02;

    pub fn new(n_speakers: usize, n_train: usize, n_eval: usize, frames: usize, seed: u64) -> Self {
        Self {
            n_speakers,
            n_train,
            n_eval,
            frames,
            seed,
            noise: Self::DEFAULT_NOISE,
        }
    }
}

const TAG_GROUP: u64 = 1;
const TAG_SPEAKER: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_EVAL: u64 = 4;
const TAG_NOISE_TRAIN: u64 = 5;
const TAG_NOISE_EVAL: u64 = 6;
const TAG_LENGTH: u64 = 7;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent random stream keyed by `(seed, tag, a, b)`.
pub fn keyed_stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let k = splitmix(splitmix(splitmix(splitmix(seed) ^ tag) ^ a) ^ b);
    ChaCha8Rng::seed_from_u64(k)
}

/// Group label of speaker `s` out of `n`: the first half is "F", the rest "M".
pub fn group_of(s: usize, n: usize) -> &'static str {
    if s < n.div_ceil(2) {
        "F"
    } else {
        "M"
    }
}

fn speaker_name(s: usize, n: usize) -> String {
    let half = n.div_ceil(2);
    if s < half {
        format!("SF{}", s + 1)
    } else {
        format!("SM{}", s - half + 1)
    }
}

/// Amplitude envelope of cepstral index `d`, decaying like real cepstra.
fn envelope(d: usize) -> f64 {
    libm::pow(0.88, d as f64)
}

/// Smooth `frames x D` content: per dimension, 8 random-phase sinusoids with
/// periods in `[20, 200]` frames and amplitudes scaled by the cepstral
/// envelope.
pub fn content_trajectory(frames: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    const TERMS: usize = 8;
    let mut out = vec![0.0; frames * D];
    let tau = 2.0 * core::f64::consts::PI;
    for d in 0..D {
        let env = envelope(d);
        for _ in 0..TERMS {
            let period: f64 = rng.random_range(20.0..=200.0);
            let phase: f64 = rng.random_range(0.0..tau);
            let amp: f64 = env * rng.random_range(0.3..1.0) / libm::sqrt(TERMS as f64 / 2.0);
            let w = tau / period;
            for t in 0..frames {
                out[t * D + d] += amp * libm::sin(w * t as f64 + phase);
            }
        }
    }
    out
}

/// Rotation angles between adjacent dimensions and per-dimension scales.
struct MapParams {
    angles: Vec<f64>,
    scales: Vec<f64>,
    bias: Vec<f64>,
}

fn group_params(seed: u64, g: u64) -> MapParams {
    let mut rng = keyed_stream(seed, TAG_GROUP, g, 0);
    MapParams {
        angles: (0..D - 1).map(|_| rng.random_range(-0.6..0.6)).collect(),
        scales: (0..D).map(|_| rng.random_range(0.85..1.18)).collect(),
        bias: (0..D).map(|d| envelope(d) * rng.random_range(-1.0..1.0)).collect(),
    }
}

fn speaker_spec(seed: u64, s: usize, n: usize, noise: f64) -> SpeakerSpec {
    let group = group_of(s, n);
    let base = group_params(seed, (group == "M") as u64);
    let mut rng = keyed_stream(seed, TAG_SPEAKER, s as u64, 0);
    let angles: Vec<f64> = base.angles.iter().map(|a| a + rng.random_range(-0.25..0.25)).collect();
    let scales: Vec<f64> = base
        .scales
        .iter()
        .map(|c| (c * rng.random_range(0.92..1.08)).clamp(0.75, 1.3))
        .collect();
    let bias: Vec<f64> = base
        .bias
        .iter()
        .enumerate()
        .map(|(d, b)| b + 0.5 * envelope(d) * rng.random_range(-1.0..1.0))
        .collect();
    // A = G_{D-2} ... G_0 diag(scales); every factor but the diagonal is
    // orthogonal, so cond(A) = max(scale) / min(scale).
    let mut a = vec![0.0; D * D];
    for i in 0..D {
        a[i * D + i] = scales[i];
    }
    for (k, &th) in angles.iter().enumerate() {
        let (s, c) = (libm::sin(th), libm::cos(th));
        for j in 0..D {
            let (x, y) = (a[k * D + j], a[(k + 1) * D + j]);
            a[k * D + j] = c * x - s * y;
            a[(k + 1) * D + j] = s * x + c * y;
        }
    }
    SpeakerSpec {
        name: speaker_name(s, n),
        group: group.into(),
        mixing: a,
        bias,
        noise,
    }
}

fn utterance_length(seed: u64, tag: u64, a: u64, b: u64, frames: usize) -> usize {
    let extra = frames / 4;
    frames + keyed_stream(seed, TAG_LENGTH ^ (tag << 8), a, b).random_range(0..=extra)
}

/// Generates a corpus with default noise; see [`generate_corpus_with`].
pub fn generate_corpus(n_speakers: usize, n_train: usize, n_eval: usize, frames: usize, seed: u64) -> Result<Corpus> {
    generate_corpus_with(&CorpusSpec::new(n_speakers, n_train, n_eval, frames, seed))
}

/// Every utterance is a pure function of `(seed, speaker, utterance id)`, so
/// the result does not depend on generation order.
pub fn generate_corpus_with(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.n_speakers == 0 {
        return Err(Error::Config("at least one speaker is required".into()));
    }
    if spec.n_train == 0 || spec.n_eval == 0 || spec.frames < 2 {
        return Err(Error::Config(format!(
            "invalid corpus sizes: train {}, eval {}, frames {}",
            spec.n_train, spec.n_eval, spec.frames
        )));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::Config(format!("invalid noise level {}", spec.noise)));
    }
    let n = spec.n_speakers;
    let seed = spec.seed;
    let speakers: Vec<SpeakerSpec> = (0..n).map(|s| speaker_spec(seed, s, n, spec.noise)).collect();
    let mut train = Vec::with_capacity(n);
    let mut eval = Vec::with_capacity(n);
    let eval_content: Vec<Vec<f64>> = (0..spec.n_eval as u64)
        .map(|u| {
            let t = utterance_length(seed, TAG_EVAL, 0, u, spec.frames);
            content_trajectory(t, &mut keyed_stream(seed, TAG_EVAL, 0, u))
        })
        .collect();
    for (s, sp) in speakers.iter().enumerate() {
        let mut tr = Vec::with_capacity(spec.n_train);
        for u in 0..spec.n_train as u64 {
            let t = utterance_length(seed, TAG_TRAIN, s as u64, u, spec.frames);
            let c = content_trajectory(t, &mut keyed_stream(seed, TAG_TRAIN, s as u64, u));
            let data = sp.render(&c, &mut keyed_stream(seed, TAG_NOISE_TRAIN, s as u64, u));
            tr.push(FeatureSequence::new(format!("t{u:05}"), s, data)?);
        }
        let mut ev = Vec::with_capacity(spec.n_eval);
        for (u, c) in eval_content.iter().enumerate() {
            let data = sp.render(c, &mut keyed_stream(seed, TAG_NOISE_EVAL, s as u64, u as u64));
            ev.push(FeatureSequence::new(format!("e{u:05}"), s, data)?);
        }
        train.push(tr);
        eval.push(ev);
    }
    Ok(Corpus { speakers, train, eval })
}

/// A training batch plus the `(utterance index, crop offset)` of each item.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub features: Tensor<T>,
    pub picks: Vec<(usize, usize)>,
}

/// Draws `batch_size` training utterances of `speaker` uniformly with
/// replacement and a uniform crop of `crop` frames from each.
pub fn next_batch<T: Real>(
    corpus: &Corpus,
    speaker: usize,
    batch_size: usize,
    crop: usize,
    rng: &mut dyn RngCore,
) -> Result<Batch<T>> {
    let utts = corpus.train.get(speaker).ok_or(Error::UnknownSpeaker(speaker))?;
    if utts.is_empty() || batch_size == 0 || crop == 0 {
        return Err(Error::Corpus(format!(
            "cannot draw a batch of {batch_size}x{crop} from {} utterances",
            utts.len()
        )));
    }
    let mut data = vec![T::ZERO; batch_size * D * crop];
    let mut picks = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        let ui = rng.random_range(0..utts.len());
        let u = &utts[ui];
        if u.frames < crop {
            return Err(Error::UtteranceTooShort {
                utt: u.id.clone(),
                frames: u.frames,
                crop,
            });
        }
        let off = rng.random_range(0..=u.frames - crop);
        for t in 0..crop {
            for (d, &v) in u.frame(off + t).iter().enumerate() {
                data[(b * D + d) * crop + t] = T::from_f64(v as f64);
            }
        }
        picks.push((ui, off));
    }
    Ok(Batch {
        features: Tensor::from_parts(vec![batch_size, D, crop], data),
        picks,
    })
}

/// Per-dimension z-normalization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation over every training frame.
    pub fn fit(corpus: &Corpus) -> Result<Self> {
        Self::fit_sequences(corpus.train.iter().flatten())
    }

    pub fn fit_sequences<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence> + Clone) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = vec![0.0; D];
        for s in seqs.clone() {
            for row in s.data.chunks_exact(D) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v as f64;
                }
            }
            n += s.frames;
        }
        if n < 2 {
            return Err(Error::Corpus(format!("{n} frames are too few for statistics")));
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; D];
        for s in seqs {
            for row in s.data.chunks_exact(D) {
                for d in 0..D {
                    let e = row[d] as f64 - mean[d];
                    var[d] += e * e;
                }
            }
        }
        let mut std = Vec::with_capacity(D);
        for (d, v) in var.iter().enumerate() {
            let v = v / n as f64;
            if v.is_nan() || v <= 0.0 {
                return Err(Error::ZeroVariance(d));
            }
            std.push(libm::sqrt(v));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, seq: &FeatureSequence) -> FeatureSequence {
        self.map(seq, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, seq: &FeatureSequence) -> FeatureSequence {
        self.map(seq, |v, m, s| v * s + m)
    }

    fn map(&self, seq: &FeatureSequence, f: impl Fn(f64, f64, f64) -> f64) -> FeatureSequence {
        let mut out = seq.clone();
        for row in out.data.chunks_exact_mut(D) {
            for (d, v) in row.iter_mut().enumerate() {
                *v = f(*v as f64, self.mean[d], self.std[d]) as f32;
            }
        }
        out
    }

    /// Copy of `corpus` with every utterance normalized.
    pub fn apply_corpus(&self, corpus: &Corpus) -> Corpus {
        let map = |lists: &Vec<Vec<FeatureSequence>>| {
            lists
                .iter()
                .map(|l| l.iter().map(|s| self.apply(s)).collect())
                .collect()
        };
        Corpus {
            speakers: corpus.speakers.clone(),
            train: map(&corpus.train),
            eval: map(&corpus.eval),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: &[[f32; 2]]) -> FeatureSequence {
        let mut data = Vec::new();
        for f in frames {
            let mut row = [1.0f32; D];
            row[0] = f[0];
            row[1] = f[1];
            for (d, r) in row.iter_mut().enumerate().skip(2) {
                *r = d as f32;
            }
            data.extend_from_slice(&row);
        }
        FeatureSequence::new("u", 0, data).unwrap()
    }

    #[test]
    fn hand_checked_statistics() {
        // dim 0: {1, 2, 6} -> mean 3, var (4 + 1 + 9) / 3 = 14/3
        // dim 1: {0, 0, 3} -> mean 1, var (1 + 1 + 4) / 3 = 2
        let a = seq(&[[1.0, 0.0], [2.0, 0.0]]);
        let b = seq(&[[6.0, 3.0]]);
        let mut with_var = [a, b];
        for s in &mut with_var {
            for (t, row) in s.data.chunks_exact_mut(D).enumerate() {
                for v in row.iter_mut().skip(2) {
                    *v += t as f32;
                }
            }
        }
        let n = Normalizer::fit_sequences(with_var.iter()).unwrap();
        assert!((n.mean[0] - 3.0).abs() < 1e-12);
        assert!((n.std[0] * n.std[0] - 14.0 / 3.0).abs() < 1e-12);
        assert!((n.mean[1] - 1.0).abs() < 1e-12);
        assert!((n.std[1] * n.std[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_names_the_dimension() {
        let a = seq(&[[1.0, 5.0], [2.0, 5.0]]);
        let err = Normalizer::fit_sequences([&a]).unwrap_err();
        // dim 1 is constant; dims >= 2 are constant as well but 1 comes first
        assert_eq!(err, Error::ZeroVariance(1));
        let one = seq(&[[1.0, 5.0]]);
        assert!(Normalizer::fit_sequences([&one]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let data: Vec<f32> = (0..3 * D).map(|i| i as f32 * 0.5).collect();
        let s = FeatureSequence::new("x", 1, data).unwrap();
        let t = s.to_tensor::<f32>();
        assert_eq!(t.shape(), &[1, D, 3]);
        assert_eq!(t.data()[1], s.frame(1)[0]);
        assert_eq!(FeatureSequence::from_tensor("x", 1, &t).unwrap(), s);
        assert!(FeatureSequence::new("bad", 0, vec![0.0; D + 1]).is_err());
        assert!(FeatureSequence::new("bad", 0, vec![f32::NAN; D]).is_err());
    }

    #[test]
    fn names_and_groups() {
        let c = generate_corpus(4, 1, 1, 16, 0).unwrap();
        let names: Vec<_> = c.speakers.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["SF1", "SF2", "SM1", "SM2"]);
        assert_eq!(c.speakers[1].group, "F");
        assert_eq!(c.speakers[2].group, "M");
        assert!(c.validate().is_ok());
    }
}
