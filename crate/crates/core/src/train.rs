//! Training schedules for the six model variants, conversion inference and
//! the in-memory checkpoint.
//!
//! Stage 1 minimizes the non-adversarial objective. Stage 2, for adversarial
//! variants only, alternates `critic_steps_per_gen` critic ascent steps (each
//! followed by weight clipping) with one generator descent step on the full
//! objective. Each step draws one batch from a single source speaker; source
//! speakers cycle round-robin through the training set.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{keyed_stream, next_batch, Corpus, FeatureSequence, Normalizer};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossWeights};
use crate::netblocks::{Architecture, DecoderMode, ModelBundle};
use crate::optim::{clip_weights, AdamConfig};
use crate::params::{Group, GroupFilter, Mode, Optimizer, Session};
use crate::tape::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vae,
    Vaewgan,
    CyclevaeSingle,
    CyclevaewganSingle,
    CyclevaeMulti,
    CyclevaewganMulti,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Vae,
        Variant::Vaewgan,
        Variant::CyclevaeSingle,
        Variant::CyclevaewganSingle,
        Variant::CyclevaeMulti,
        Variant::CyclevaewganMulti,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vae => "vae",
            Variant::Vaewgan => "vaewgan",
            Variant::CyclevaeSingle => "cyclevae-single",
            Variant::CyclevaewganSingle => "cyclevaewgan-single",
            Variant::CyclevaeMulti => "cyclevae-multi",
            Variant::CyclevaewganMulti => "cyclevaewgan-multi",
        }
    }

    pub fn decoder(self) -> DecoderMode {
        match self {
            Variant::CyclevaeMulti | Variant::CyclevaewganMulti => DecoderMode::Multi,
            _ => DecoderMode::Shared,
        }
    }

    pub fn cycle(self) -> bool {
        !matches!(self, Variant::Vae | Variant::Vaewgan)
    }

    pub fn adversarial(self) -> bool {
        matches!(
            self,
            Variant::Vaewgan | Variant::CyclevaewganSingle | Variant::CyclevaewganMulti
        )
    }

    /// `(wgan, cycle)` weights used when the config leaves them unset.
    pub fn default_weights(self) -> LossWeights {
        LossWeights {
            wgan: if self.adversarial() { 1.0 } else { 0.0 },
            cycle: if self.cycle() { 1.0 } else { 0.0 },
        }
    }
}

impl core::fmt::Display for Variant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

pub const DEFAULT_STEPS: u64 = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Adversarial weight; the variant preset when unset.
    pub lambda1: Option<f64>,
    /// Cycle-consistency weight; the variant preset when unset.
    pub lambda2: Option<f64>,
    pub batch_size: usize,
    pub crop_frames: usize,
    pub stage1_steps: u64,
    /// Generator steps of adversarial training; unset means the default for
    /// adversarial variants and 0 otherwise.
    pub stage2_steps: Option<u64>,
    pub critic_steps_per_gen: usize,
    pub clip_c: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Indices of training speakers; empty means every corpus speaker.
    pub speakers: Vec<usize>,
    pub latent_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub blocks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(Variant::Vae)
    }
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            lambda1: None,
            lambda2: None,
            batch_size: 8,
            crop_frames: 128,
            stage1_steps: DEFAULT_STEPS,
            stage2_steps: None,
            critic_steps_per_gen: 5,
            clip_c: 0.01,
            adam: AdamConfig::default(),
            seed: 0,
            speakers: Vec::new(),
            latent_dim: 16,
            hidden: 32,
            kernel: 5,
            blocks: 3,
        }
    }

    pub fn weights(&self) -> LossWeights {
        let preset = self.variant.default_weights();
        LossWeights {
            wgan: self.lambda1.unwrap_or(preset.wgan),
            cycle: self.lambda2.unwrap_or(preset.cycle),
        }
    }

    pub fn stage2(&self) -> u64 {
        match self.stage2_steps {
            Some(s) => s,
            None if self.variant.adversarial() => DEFAULT_STEPS,
            None => 0,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.stage2()
    }

    pub fn architecture(&self, n_speakers: usize) -> Architecture {
        Architecture {
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            kernel: self.kernel,
            blocks: self.blocks,
            ..Architecture::new(self.variant.decoder(), n_speakers, self.variant.adversarial())
        }
    }

    /// Training speaker indices for a corpus of `n` speakers.
    pub fn training_speakers(&self, n: usize) -> Result<Vec<usize>> {
        let set: Vec<usize> = if self.speakers.is_empty() {
            (0..n).collect()
        } else {
            self.speakers.clone()
        };
        for (i, &s) in set.iter().enumerate() {
            if s >= n {
                return Err(Error::UnknownSpeaker(s));
            }
            if set[..i].contains(&s) {
                return Err(Error::Config(format!("speaker {s} listed twice")));
            }
        }
        if set.is_empty() {
            return Err(Error::EmptySpeakerSet);
        }
        Ok(set)
    }

    pub fn validate(&self, n_speakers: usize) -> Result<()> {
        let w = self.weights();
        w.validate()?;
        let v = self.variant;
        if self.batch_size == 0 || self.crop_frames == 0 {
            return Err(Error::Config("batch_size and crop_frames must be positive".into()));
        }
        if !v.cycle() && w.cycle != 0.0 {
            return Err(Error::Config(format!("variant {v} has no cycle term; lambda2 must be 0")));
        }
        if !v.adversarial() {
            if w.wgan != 0.0 {
                return Err(Error::Config(format!("variant {v} has no critic; lambda1 must be 0")));
            }
            if self.stage2() != 0 {
                return Err(Error::Config(format!("variant {v} has no adversarial stage")));
            }
        } else if self.critic_steps_per_gen == 0 || !(self.clip_c.is_finite() && self.clip_c > 0.0) {
            return Err(Error::Config(
                "adversarial training needs critic_steps_per_gen >= 1 and clip_c > 0".into(),
            ));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite() && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0)
        {
            return Err(Error::Config(format!("invalid optimizer settings {a:?}")));
        }
        let speakers = self.training_speakers(n_speakers)?;
        if v.cycle() && speakers.len() < 2 {
            return Err(Error::Config(format!(
                "variant {v} needs at least 2 training speakers, got {}",
                speakers.len()
            )));
        }
        Ok(())
    }
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerInfo {
    pub name: String,
    pub group: String,
}

/// Everything needed to convert with, or resume, a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub speakers: Vec<SpeakerInfo>,
    pub bundle: ModelBundle<f32>,
    pub optimizer: Optimizer<f32>,
    /// Completed steps (stage-1 steps plus stage-2 generator steps).
    pub step: u64,
    pub data_rng: RngState,
    pub noise_rng: RngState,
    pub normalizer: Normalizer,
}

impl Checkpoint {
    pub fn speaker_index(&self, name: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSpeakerName(name.into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u64,
    pub stage: u8,
    pub speaker: usize,
    pub report: LossReport,
    /// Mean critic objective over the critic steps preceding this step.
    pub critic: Option<f64>,
    /// Seconds since the run started; excluded from determinism checks.
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    /// Bit-exact equality of everything except wall-clock times.
    pub fn same_values(&self, other: &LossTrace) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.step == b.step
                    && a.stage == b.stage
                    && a.speaker == b.speaker
                    && a.critic.map(f64::to_bits) == b.critic.map(f64::to_bits)
                    && bits(&a.report) == bits(&b.report)
            })
    }

    pub fn totals(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.report.total)
    }
}

fn bits(r: &LossReport) -> Vec<u64> {
    let mut v = vec![
        r.total.to_bits(),
        r.kl.to_bits(),
        r.recon.to_bits(),
        r.cycle_kl.to_bits(),
        r.cycle_recon.to_bits(),
        r.weights.wgan.to_bits(),
        r.weights.cycle.to_bits(),
    ];
    v.extend(r.wgan.iter().map(|w| w.to_bits()));
    v
}

/// Source of wall-clock time for trace entries.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// A clock that always reads zero.
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Training aborted; the trace holds every completed step.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("training aborted at step {step}: {error}")]
pub struct TrainFailure {
    pub error: Error,
    pub step: u64,
    pub trace: LossTrace,
}

const TAG_INIT: u64 = 101;
const TAG_CRITIC_INIT: u64 = 102;
const TAG_DATA: u64 = 103;
const TAG_NOISE: u64 = 104;

/// Stateful trainer over a fixed corpus.
pub struct Trainer {
    ckpt: Checkpoint,
    corpus: Corpus,
    speakers: Vec<usize>,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh run: fits the normalizer on the training split, initializes the
    /// model from the seed and positions every random stream at its start.
    pub fn new(config: TrainConfig, corpus: &Corpus) -> Result<Self> {
        corpus.validate()?;
        let n = corpus.n_speakers();
        config.validate(n)?;
        let normalizer = Normalizer::fit(corpus)?;
        let bundle = ModelBundle::new(
            config.architecture(n),
            &mut keyed_stream(config.seed, TAG_INIT, 0, 0),
            &mut keyed_stream(config.seed, TAG_CRITIC_INIT, 0, 0),
        )?;
        let optimizer = Optimizer::new(config.adam, bundle.params.len());
        let data_rng = keyed_stream(config.seed, TAG_DATA, 0, 0);
        let noise_rng = keyed_stream(config.seed, TAG_NOISE, 0, 0);
        let ckpt = Checkpoint {
            speakers: corpus
                .speakers
                .iter()
                .map(|s| SpeakerInfo {
                    name: s.name.clone(),
                    group: s.group.clone(),
                })
                .collect(),
            bundle,
            optimizer,
            step: 0,
            data_rng: RngState::capture(&data_rng),
            noise_rng: RngState::capture(&noise_rng),
            normalizer,
            config,
        };
        Self::resume(ckpt, corpus)
    }

    /// Continues from a checkpoint on the same corpus.
    pub fn resume(ckpt: Checkpoint, corpus: &Corpus) -> Result<Self> {
        if ckpt.speakers.len() != corpus.n_speakers() {
            return Err(Error::Config(format!(
                "checkpoint has {} speakers, corpus {}",
                ckpt.speakers.len(),
                corpus.n_speakers()
            )));
        }
        let speakers = ckpt.config.training_speakers(corpus.n_speakers())?;
        Ok(Self {
            corpus: ckpt.normalizer.apply_corpus(corpus),
            speakers,
            data_rng: ckpt.data_rng.restore(),
            noise_rng: ckpt.noise_rng.restore(),
            ckpt,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.ckpt.step
    }

    pub fn finished(&self) -> bool {
        self.ckpt.step >= self.ckpt.config.total_steps()
    }

    pub fn bundle(&self) -> &ModelBundle<f32> {
        &self.ckpt.bundle
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.ckpt.clone();
        c.data_rng = RngState::capture(&self.data_rng);
        c.noise_rng = RngState::capture(&self.noise_rng);
        c
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        let mut c = self.ckpt;
        c.data_rng = RngState::capture(&self.data_rng);
        c.noise_rng = RngState::capture(&self.noise_rng);
        c
    }

    /// Runs one stage-1 step, or one stage-2 round of critic steps plus a
    /// generator step.
    pub fn step(&mut self, clock: &dyn Clock) -> Result<TraceEntry> {
        if self.finished() {
            return Err(Error::Config(format!("all {} steps already done", self.ckpt.step)));
        }
        let cfg = &self.ckpt.config;
        let step = self.ckpt.step;
        let src = self.speakers[(step % self.speakers.len() as u64) as usize];
        let stage1 = step < cfg.stage1_steps;
        let (report, critic) = if stage1 {
            (self.stage1_step(src)?, None)
        } else {
            let c = self.critic_steps(src)?;
            (self.generator_step(src)?, Some(c))
        };
        if !report.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        self.ckpt.step += 1;
        Ok(TraceEntry {
            step,
            stage: if stage1 { 1 } else { 2 },
            speaker: src,
            report,
            critic,
            wall_secs: clock.seconds(),
        })
    }

    /// Runs until the configured number of steps, appending to a trace.
    pub fn run(&mut self, clock: &dyn Clock) -> core::result::Result<LossTrace, TrainFailure> {
        let mut trace = LossTrace::default();
        while !self.finished() {
            match self.step(clock) {
                Ok(e) => trace.entries.push(e),
                Err(error) => {
                    return Err(TrainFailure {
                        error,
                        step: self.ckpt.step,
                        trace,
                    })
                }
            }
        }
        Ok(trace)
    }

    fn batch(&mut self, speaker: usize) -> Result<crate::Tensor<f32>> {
        let cfg = &self.ckpt.config;
        Ok(next_batch(&self.corpus, speaker, cfg.batch_size, cfg.crop_frames, &mut self.data_rng)?.features)
    }

    /// Conversion targets of `src`: every other training speaker, or `src`
    /// itself when it trains alone.
    fn targets(&self, src: usize) -> Vec<usize> {
        let t: Vec<usize> = self.speakers.iter().copied().filter(|&s| s != src).collect();
        if t.is_empty() {
            vec![src]
        } else {
            t
        }
    }

    fn stage1_step(&mut self, src: usize) -> Result<LossReport> {
        let x = self.batch(src)?;
        let cfg = &self.ckpt.config;
        let stage1_weights = LossWeights {
            wgan: 0.0,
            cycle: cfg.weights().cycle,
        };
        let cycle = cfg.variant.cycle();
        let ModelBundle { model, params } = &mut self.ckpt.bundle;
        let mut sess = Session::new(params, Mode::Train, GroupFilter::Generator);
        let xv = sess.constant(x);
        let code = model.encode(&mut sess, xv, Some(&mut self.noise_rng))?;
        let out = if cycle {
            losses::cyclevae_total(model, &mut sess, xv, &code, src, &self.speakers, stage1_weights, &mut self.noise_rng)?
        } else {
            losses::vae_loss(model, &mut sess, xv, &code, src)?
        };
        if !out.report.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = sess.backward(out.total)?;
        self.ckpt.optimizer.apply(params, &grads, GroupFilter::Generator)?;
        Ok(out.report)
    }

    /// Real batches for the adversarial terms: `x` itself for the source
    /// speaker and a fresh batch for every target.
    fn reals(&mut self, src: usize, x: &crate::Tensor<f32>) -> Result<Vec<Option<crate::Tensor<f32>>>> {
        let mut reals = vec![None; self.corpus.n_speakers()];
        reals[src] = Some(x.clone());
        for y in self.targets(src) {
            if y != src {
                reals[y] = Some(self.batch(y)?);
            }
        }
        Ok(reals)
    }

    fn critic_steps(&mut self, src: usize) -> Result<f64> {
        let steps = self.ckpt.config.critic_steps_per_gen;
        let clip = self.ckpt.config.clip_c as f32;
        let variant = self.ckpt.config.variant;
        let targets = self.targets(src);
        let mut objective = 0.0;
        for _ in 0..steps {
            let x = self.batch(src)?;
            let reals = self.reals(src, &x)?;
            let ModelBundle { model, params } = &mut self.ckpt.bundle;
            // Fakes from the current generator, detached from its parameters.
            let fakes: Vec<(usize, crate::Tensor<f32>)> = {
                let mut sess = Session::new(params, Mode::Train, GroupFilter::Nothing);
                let xv = sess.constant(x);
                let code = model.encode(&mut sess, xv, Some(&mut self.noise_rng))?;
                let mut out = Vec::new();
                if variant.cycle() {
                    let v = model.decode(&mut sess, code.z, src)?;
                    out.push((src, sess.value(v).clone()));
                }
                for &y in &targets {
                    let v = model.decode(&mut sess, code.z, y)?;
                    out.push((y, sess.value(v).clone()));
                }
                out
            };
            let mut sess = Session::new(params, Mode::Train, GroupFilter::Critics);
            let mut total: Option<Var> = None;
            for (spk, fake) in fakes {
                let real = sess.constant(reals[spk].clone().ok_or(Error::UnknownSpeaker(spk))?);
                let fake = sess.constant(fake);
                let w = losses::wgan_loss(model, &mut sess, real, fake, spk)?;
                total = Some(match total {
                    None => w,
                    Some(t) => sess.tape.add(t, w)?,
                });
            }
            let total = total.ok_or(Error::Empty)?;
            let value = sess.value(total).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite("critic objective"));
            }
            objective += value;
            // critics ascend the adversarial objective
            let loss = sess.tape.neg(total)?;
            let grads = sess.backward(loss)?;
            self.ckpt.optimizer.apply(params, &grads, GroupFilter::Critics)?;
            // critics of speakers outside the training set are never used
            for (_, p) in params.iter_mut() {
                let active = matches!(p.group, Group::Critic(s) if self.speakers.contains(&s));
                if active && p.trainable {
                    clip_weights(p.value.data_mut(), clip);
                }
            }
        }
        Ok(objective / steps as f64)
    }

    fn generator_step(&mut self, src: usize) -> Result<LossReport> {
        let x = self.batch(src)?;
        let reals = self.reals(src, &x)?;
        let cfg = &self.ckpt.config;
        let weights = cfg.weights();
        let cycle = cfg.variant.cycle();
        let ModelBundle { model, params } = &mut self.ckpt.bundle;
        let mut sess = Session::new(params, Mode::Train, GroupFilter::Generator);
        let xv = sess.constant(x);
        let real_vars: Vec<Option<Var>> = reals
            .into_iter()
            .enumerate()
            .map(|(s, r)| if s == src { Some(xv) } else { r.map(|t| sess.constant(t)) })
            .collect();
        let code = model.encode(&mut sess, xv, Some(&mut self.noise_rng))?;
        let out = if cycle {
            losses::cyclevaewgan_total(
                model,
                &mut sess,
                xv,
                &code,
                src,
                &self.speakers,
                &real_vars,
                weights,
                &mut self.noise_rng,
            )?
        } else {
            losses::vaewgan_total(model, &mut sess, xv, &code, src, &self.speakers, &real_vars, weights)?
        };
        if !out.report.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = sess.backward(out.total)?;
        self.ckpt.optimizer.apply(params, &grads, GroupFilter::Generator)?;
        Ok(out.report)
    }
}

/// Trains `config` on `corpus` from scratch.
pub fn train(
    config: TrainConfig,
    corpus: &Corpus,
    clock: &dyn Clock,
) -> core::result::Result<(Checkpoint, LossTrace), TrainFailure> {
    let mut t = Trainer::new(config, corpus).map_err(|error| TrainFailure {
        error,
        step: 0,
        trace: LossTrace::default(),
    })?;
    let trace = t.run(clock)?;
    Ok((t.into_checkpoint(), trace))
}

/// Converts `x` from `source` to `target` with the posterior mean and
/// running batch-norm statistics. Input and output are unnormalized.
pub fn convert(ckpt: &Checkpoint, x: &FeatureSequence, source: usize, target: usize) -> Result<FeatureSequence> {
    let model = &ckpt.bundle.model;
    model.check_speaker(source)?;
    model.check_speaker(target)?;
    let normed = ckpt.normalizer.apply(x);
    let mut params = ckpt.bundle.params.clone();
    let mut sess = Session::new(&mut params, Mode::Eval, GroupFilter::Nothing);
    let xv = sess.constant(normed.to_tensor::<f32>());
    let code = model.encode(&mut sess, xv, None)?;
    let y = model.decode(&mut sess, code.mu, target)?;
    let out = FeatureSequence::from_tensor(x.id.clone(), target, sess.value(y))?;
    Ok(ckpt.normalizer.invert(&out))
}

/// `convert(convert(x, X, Y), Y, X)`.
pub fn cycle_convert(ckpt: &Checkpoint, x: &FeatureSequence, source: usize, target: usize) -> Result<FeatureSequence> {
    let y = convert(ckpt, x, source, target)?;
    convert(ckpt, &y, target, source)
}
