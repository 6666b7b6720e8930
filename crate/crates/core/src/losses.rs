//! Loss functionals of the VAE, VAEWGAN, CycleVAE and CycleVAEWGAN variants.
//!
//! Every function records onto the session's tape and returns the total as a
//! differentiable [`Var`] plus a [`LossReport`] of its parts. Per-frame terms
//! are averaged over batch and frames and summed over feature or latent
//! dimensions. The decoder likelihood is a unit-variance Gaussian with its
//! additive constant dropped, so the reconstruction term is half the squared
//! error.
//!
//! Functions taking a [`LatentCode`] reuse that single posterior sample of
//! `z ~ q(z|x)` for the self-reconstruction, conversion and adversarial paths.

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netblocks::{LatentCode, Model};
use crate::params::Session;
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Weights of the adversarial (`wgan`) and cycle-consistency (`cycle`) terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub wgan: f64,
    pub cycle: f64,
}

impl LossWeights {
    pub const CYCLEVAE: LossWeights = LossWeights {
        wgan: 0.0,
        cycle: 1.0,
    };
    pub const CYCLEVAEWGAN: LossWeights = LossWeights {
        wgan: 1.0,
        cycle: 1.0,
    };

    pub fn new(wgan: f64, cycle: f64) -> Result<Self> {
        let w = Self { wgan, cycle };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.wgan) && ok(self.cycle) {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!(
                "loss weights must be finite and non-negative, got wgan={} cycle={}",
                self.wgan,
                self.cycle
            )))
        }
    }
}

/// Diagnostic breakdown of one loss evaluation. Component fields already
/// include their multiplicity in summed objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub kl: f64,
    pub recon: f64,
    pub cycle_kl: f64,
    pub cycle_recon: f64,
    /// Adversarial term per speaker critic (unweighted).
    pub wgan: Vec<f64>,
    pub weights: LossWeights,
}

impl LossReport {
    fn new(n_speakers: usize, weights: LossWeights) -> Self {
        Self {
            total: 0.0,
            kl: 0.0,
            recon: 0.0,
            cycle_kl: 0.0,
            cycle_recon: 0.0,
            wgan: vec![0.0; n_speakers],
            weights,
        }
    }

    /// Weighted sum of the recorded parts.
    pub fn parts_total(&self) -> f64 {
        self.kl
            + self.recon
            + self.weights.cycle * (self.cycle_kl + self.cycle_recon)
            + self.weights.wgan * self.wgan.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: Var,
    pub report: LossReport,
}

fn frames_and_batch(tape: &Tape<impl Real>, v: Var, op: &'static str) -> Result<usize> {
    let s = tape.shape(v);
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0],
        });
    }
    Ok(s[0] * s[2])
}

/// `KL(q(z|x) || N(0, I))` for a diagonal Gaussian posterior.
pub fn kl_to_standard_normal<T: Real>(tape: &mut Tape<T>, code: &LatentCode) -> Result<Var> {
    let n = frames_and_batch(tape, code.mu, "kl_to_standard_normal")?;
    let mu2 = tape.square(code.mu)?;
    let var = tape.exp(code.logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, code.logvar)?;
    let c = tape.add_scalar(b, -T::ONE)?;
    let s = tape.sum_all(c)?;
    tape.scale(s, T::from_f64(0.5 / n as f64))
}

/// Negative Gaussian log-likelihood up to a constant: half the squared error.
pub fn recon_nll<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_hat) {
        return Err(Error::ShapeMismatch {
            op: "recon_nll",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(x_hat).to_vec(),
        });
    }
    let n = frames_and_batch(tape, x, "recon_nll")?;
    let d = tape.sub(x, x_hat)?;
    let sq = tape.square(d)?;
    let s = tape.sum_all(sq)?;
    tape.scale(s, T::from_f64(0.5 / n as f64))
}

fn scalar<T: Real>(sess: &Session<'_, T>, v: Var) -> f64 {
    sess.value(v).data()[0].to_f64()
}

struct SelfPath {
    kl: Var,
    recon: Var,
    x_hat: Var,
}

fn self_path<T: Real>(
    model: &Model,
    sess: &mut Session<'_, T>,
    x: Var,
    code: &LatentCode,
    source: usize,
) -> Result<SelfPath> {
    let x_hat = model.decode(sess, code.z, source)?;
    let kl = kl_to_standard_normal(&mut sess.tape, code)?;
    let recon = recon_nll(&mut sess.tape, x, x_hat)?;
    Ok(SelfPath { kl, recon, x_hat })
}

struct CyclePath {
    converted: Var,
    kl: Var,
    recon: Var,
}

fn cycle_path<T: Real>(
    model: &Model,
    sess: &mut Session<'_, T>,
    x: Var,
    code: &LatentCode,
    source: usize,
    target: usize,
    rng: &mut dyn RngCore,
) -> Result<CyclePath> {
    let converted = model.decode(sess, code.z, target)?;
    let back_code = model.encode(sess, converted, Some(rng))?;
    let back = model.decode(sess, back_code.z, source)?;
    let kl = kl_to_standard_normal(&mut sess.tape, &back_code)?;
    let recon = recon_nll(&mut sess.tape, x, back)?;
    Ok(CyclePath { converted, kl, recon })
}

/// Self-reconstruction VAE loss for a batch of speaker `source`.
///
/// Shared-decoder models condition on the source identity vector;
/// multi-decoder models route through the source speaker's decoder.
pub fn vae_loss<T: Real>(
    model: &Model,
    sess: &mut Session<'_, T>,
    x: Var,
    code: &LatentCode,
    source: usize,
) -> Result<LossOutput> {
    let p = self_path(model, sess, x, code, source)?;
    let total = sess.tape.add(p.kl, p.recon)?;
    let mut report = LossReport::new(model.n_speakers(), LossWeights::new(0.0, 0.0)?);
    report.kl = scalar(sess, p.kl);
    report.recon = scalar(sess, p.recon);
    report.total = scalar(sess, total);
    Ok(LossOutput { total, report })
}

/// `E[D(real)] - E[D(fake)]` under the critic of `speaker`. Critics ascend
/// this value and generators descend it.
///
/// Real and fake batches go through the critic as one joint batch, so
/// train-mode batch normalization sees both and cannot erase a shift between
/// them.
pub fn wgan_loss<T: Real>(
    model: &Model,
    sess: &mut Session<'_, T>,
    real: Var,
    fake: Var,
    speaker: usize,
) -> Result<Var> {
    let nr = sess.tape.shape(real).first().copied().unwrap_or(0);
    let nf = sess.tape.shape(fake).first().copied().unwrap_or(0);
    let joint = sess.tape.concat(&[real, fake], 0)?;
    let scores = model.criticize(sess, joint, speaker)?;
    let r = sess.tape.narrow(scores, 0, 0, nr)?;
    let f = sess.tape.narrow(scores, 0, nr, nf)?;
    let rm = sess.tape.mean_all(r)?;
    let fm = sess.tape.mean_all(f)?;
    sess.tape.sub(rm, fm)
}

/// Cycle-consistency loss: convert `x` to `target`, re-encode the converted
/// features, decode back to `source` and score against `x`. Returns
/// `KL(q(z|x') || p(z)) + recon(x, x'')`, differentiable through the
/// conversion.
pub fn cycle_loss<T: Real>(
    model: &Model,
    sess: &mut Session<'_, T>,
    x: Var,
    code: &LatentCode,
    source: usize,
    target: usize,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let c = cycle_path(model, sess, x, code, source, target, rng)?;
    sess.tape.add(c.kl, c.recon)
}

/// Accumulates terms into a total with their weights and multiplicities.
struct Accumulator<T: Real> {
    total: Option<Var>,
    report: LossReport,
    _marker: core::marker::PhantomData<T>,
}

impl<T: Real> Accumulator<T> {
    fn new(n_speakers: usize, weights: LossWeights) -> Self {
        Self {
            total: None,
            report: LossReport::new(n_speakers, weights),
            _marker: core::marker::PhantomData,
        }
    }

    fn push(&mut self, sess: &mut Session<'_, T>, term: Var, weight: f64) -> Result<()> {
        let scaled = if weight == 1.0 {
            term
        } else {
            sess.tape.scale(term, T::from_f64(weight))?
        };
        self.total = Some(match self.total {
            None => scaled,
            Some(t) => sess.tape.add(t, scaled)?,
        });
        Ok(())
    }

    fn self_terms(&mut self, sess: &mut Session<'_, T>, p: &SelfPath, count: usize) -> Result<()> {
        let c = count as f64;
        self.push(sess, p.kl, c)?;
        self.push(sess, p.recon, c)?;
        self.report.kl += c * scalar(sess, p.kl);
        self.report.recon += c * scalar(sess, p.recon);
        Ok(())
    }

    fn cycle_terms(&mut self, sess: &mut Session<'_, T>, c: &CyclePath) -> Result<()> {
        let w = self.report.weights.cycle;
        if w != 0.0 {
            self.push(sess, c.kl, w)?;
            self.push(sess, c.recon, w)?;
        }
        self.report.cycle_kl += scalar(sess, c.kl);
        self.report.cycle_recon += scalar(sess, c.recon);
        Ok(())
    }

    fn wgan_term(&mut self, sess: &mut Session<'_, T>, term: Var, speaker: usize, count: usize) -> Result<()> {
        let w = self.report.weights.wgan * count as f64;
        if w != 0.0 {
            self.push(sess, term, w)?;
        }
        self.report.wgan[speaker] += count as f64 * scalar(sess, term);
        Ok(())
    }

    fn finish(mut self, sess: &Session<'_, T>) -> Result<LossOutput> {
        let total = self.total.ok_or(Error::Empty)?;
        self.report.total = scalar(sess, total);
        Ok(LossOutput {
            total,
            report: self.report,
        })
    }
}

/// Cycle-consistent VAE loss for one speaker pair: the self-reconstruction
/// VAE loss plus `weights.cycle` times the cycle loss toward `target`.
#[allow(clippy::too_many_arguments)]
pub fn cyclevae_loss<T: Real>(
    model: &Model,
    sess: &mut Session<'_, T>,
    x: Var,
    code: &LatentCode,
    source: usize,
    target: usize,
    weights: LossWeights,
    rng: &mut dyn RngCore,
) -> Result<LossOutput> {
    cyclevae_total(model, sess, x, code, source, &[source, target], weights, rng)
}

fn targets_of(source: usize, speakers: &[usize]) -> Result<Vec<usize>> {
    if speakers.is_empty() {
        return Err(Error::EmptySpeakerSet);
    }
    if !speakers.contains(&source) {
        return Err(Error::UnknownSpeaker(source));
    }
    let mut out: Vec<usize> = speakers.iter().copied().filter(|&s| s != source).collect();
    out.dedup();
    Ok(out)
}

/// Sum of pairwise cycle-consistent VAE losses over every target `Y != X` in
/// `speakers`. With no other speaker the self-reconstruction term remains.
#[allow(clippy::too_many_arguments)]
pub fn cyclevae_total<T: Real>(
    model: &Model,
    sess: &mut Session<'_, T>,
    x: Var,
    code: &LatentCode,
    source: usize,
    speakers: &[usize],
    weights: LossWeights,
    rng: &mut dyn RngCore,
) -> Result<LossOutput> {
    weights.validate()?;
    let targets = targets_of(source, speakers)?;
    let mut acc = Accumulator::new(model.n_speakers(), weights);
    let p = self_path(model, sess, x, code, source)?;
    acc.self_terms(sess, &p, targets.len().max(1))?;
    for &y in &targets {
        let c = cycle_path(model, sess, x, code, source, y, rng)?;
        acc.cycle_terms(sess, &c)?;
    }
    acc.finish(sess)
}

/// VAEWGAN loss: shared-decoder VAE loss plus `weights.wgan` times the
/// adversarial term of converting toward `target` under `target`'s critic.
#[allow(clippy::too_many_arguments)]
pub fn vaewgan_loss<T: Real>(
    model: &Model,
    sess: &mut Session<'_, T>,
    x: Var,
    code: &LatentCode,
    source: usize,
    target: usize,
    real_target: Var,
    weights: LossWeights,
) -> Result<LossOutput> {
    weights.validate()?;
    let mut acc = Accumulator::new(model.n_speakers(), weights);
    let p = self_path(model, sess, x, code, source)?;
    acc.self_terms(sess, &p, 1)?;
    let fake = if target == source {
        p.x_hat
    } else {
        model.decode(sess, code.z, target)?
    };
    let w = wgan_loss(model, sess, real_target, fake, target)?;
    acc.wgan_term(sess, w, target, 1)?;
    acc.finish(sess)
}

/// VAEWGAN objective summed over every conversion target `Y != X` (or the
/// self path alone for a single speaker). The VAE term enters once.
#[allow(clippy::too_many_arguments)]
pub fn vaewgan_total<T: Real>(
    model: &Model,
    sess: &mut Session<'_, T>,
    x: Var,
    code: &LatentCode,
    source: usize,
    speakers: &[usize],
    reals: &[Option<Var>],
    weights: LossWeights,
) -> Result<LossOutput> {
    weights.validate()?;
    let mut targets = targets_of(source, speakers)?;
    if targets.is_empty() {
        targets.push(source);
    }
    let mut acc = Accumulator::new(model.n_speakers(), weights);
    let p = self_path(model, sess, x, code, source)?;
    acc.self_terms(sess, &p, 1)?;
    for &y in &targets {
        let real = real_for(reals, y)?;
        let fake = if y == source {
            p.x_hat
        } else {
            model.decode(sess, code.z, y)?
        };
        let w = wgan_loss(model, sess, real, fake, y)?;
        acc.wgan_term(sess, w, y, 1)?;
    }
    acc.finish(sess)
}

fn real_for(reals: &[Option<Var>], speaker: usize) -> Result<Var> {
    reals
        .get(speaker)
        .copied()
        .flatten()
        .ok_or(Error::UnknownSpeaker(speaker))
}

/// Cycle-consistent VAEWGAN loss for one pair: the CycleVAE loss plus the
/// adversarial term twice, once on the self-reconstruction path under the
/// source critic and once on the conversion path under the target critic.
#[allow(clippy::too_many_arguments)]
pub fn cyclevaewgan_loss<T: Real>(
    model: &Model,
    sess: &mut Session<'_, T>,
    x: Var,
    code: &LatentCode,
    source: usize,
    target: usize,
    reals: &[Option<Var>],
    weights: LossWeights,
    rng: &mut dyn RngCore,
) -> Result<LossOutput> {
    cyclevaewgan_total(model, sess, x, code, source, &[source, target], reals, weights, rng)
}

/// Sum of pairwise CycleVAEWGAN losses over every target `Y != X`.
/// `reals[s]` is a batch of real features of speaker `s`.
#[allow(clippy::too_many_arguments)]
pub fn cyclevaewgan_total<T: Real>(
    model: &Model,
    sess: &mut Session<'_, T>,
    x: Var,
    code: &LatentCode,
    source: usize,
    speakers: &[usize],
    reals: &[Option<Var>],
    weights: LossWeights,
    rng: &mut dyn RngCore,
) -> Result<LossOutput> {
    weights.validate()?;
    let targets = targets_of(source, speakers)?;
    let count = targets.len().max(1);
    let mut acc = Accumulator::new(model.n_speakers(), weights);
    let p = self_path(model, sess, x, code, source)?;
    acc.self_terms(sess, &p, count)?;
    let self_adv = wgan_loss(model, sess, real_for(reals, source)?, p.x_hat, source)?;
    acc.wgan_term(sess, self_adv, source, count)?;
    for &y in &targets {
        let c = cycle_path(model, sess, x, code, source, y, rng)?;
        acc.cycle_terms(sess, &c)?;
        let conv_adv = wgan_loss(model, sess, real_for(reals, y)?, c.converted, y)?;
        acc.wgan_term(sess, conv_adv, y, 1)?;
    }
    acc.finish(sess)
}
