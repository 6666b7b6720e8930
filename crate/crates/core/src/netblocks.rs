//! Gated convolutional building blocks and the encoder, decoder and critic
//! assemblies.
//!
//! Everything operates on `[batch, channels, frames]` tensors. Convolutions
//! use "same" padding so the frame count is preserved end to end.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore, Session};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::FEATURE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderMode {
    /// One decoder conditioned on a one-hot speaker identity vector.
    Shared,
    /// One decoder per speaker, no identity input.
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub blocks: usize,
    pub batch_norm: bool,
    pub decoder: DecoderMode,
    pub n_speakers: usize,
    /// Width of the identity vector in shared mode. Normally `n_speakers`;
    /// zero disables the identity input entirely.
    pub identity_width: usize,
    pub critics: bool,
}

impl Architecture {
    pub fn new(decoder: DecoderMode, n_speakers: usize, critics: bool) -> Self {
        Self {
            feature_dim: FEATURE_DIM,
            latent_dim: 16,
            hidden: 32,
            kernel: 5,
            blocks: 3,
            batch_norm: true,
            decoder,
            n_speakers,
            identity_width: match decoder {
                DecoderMode::Shared => n_speakers,
                DecoderMode::Multi => 0,
            },
            critics,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 {
            return Err(Error::EmptySpeakerSet);
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel width {} must be odd for same padding",
                self.kernel
            )));
        }
        if self.blocks == 0 || self.hidden == 0 || self.latent_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.decoder == DecoderMode::Multi && self.identity_width != 0 {
            return Err(Error::Config(
                "multi-decoder models take no identity vector".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = sess.param(self.weight);
        let b = sess.param(self.bias);
        sess.tape.conv1d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub group: Group,
    pub eps: f64,
    pub momentum: f64,
}

/// Convolution producing `2C` channels, split into value `A` and gate `B`,
/// returning `A * sigmoid(B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GluBlock {
    pub conv: Conv,
    pub norm: Option<BatchNorm>,
    pub channels: usize,
}

impl GluBlock {
    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.conv.forward(sess, x)?;
        if let Some(bn) = &self.norm {
            h = sess.batch_norm(bn, h)?;
        }
        let value = sess.tape.narrow(h, 1, 0, self.channels)?;
        let gate = sess.tape.narrow(h, 1, self.channels, self.channels)?;
        let gate = sess.tape.sigmoid(gate)?;
        sess.tape.mul(value, gate)
    }
}

/// Builds parameters into a store with uniform fan-in initialization.
struct Builder<'s, T: Real> {
    store: &'s mut ParamStore<T>,
    group: Group,
    prefix: String,
}

impl<T: Real> Builder<'_, T> {
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut dyn RngCore) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        let t = Tensor::new(shape, data).expect("positive shape");
        self.store
            .add(format!("{}.{name}", self.prefix), t, self.group, true)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, rng: &mut dyn RngCore) -> Conv {
        let bound = 1.0 / libm::sqrt((cin * k) as f64);
        Conv {
            weight: self.uniform(&format!("{name}.weight"), &[cout, cin, k], bound, rng),
            bias: self.uniform(&format!("{name}.bias"), &[cout], bound, rng),
            stride: 1,
            padding: k / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> BatchNorm {
        let mut add = |suffix: &str, v: f64, trainable: bool| {
            self.store.add(
                format!("{}.{name}.{suffix}", self.prefix),
                Tensor::full(&[c], T::from_f64(v)),
                self.group,
                trainable,
            )
        };
        BatchNorm {
            gamma: add("gamma", 1.0, true),
            beta: add("beta", 0.0, true),
            running_mean: add("running_mean", 0.0, false),
            running_var: add("running_var", 1.0, false),
            group: self.group,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn glu(&mut self, idx: usize, cin: usize, cout: usize, arch: &Architecture, rng: &mut dyn RngCore) -> GluBlock {
        let name = format!("glu{idx}");
        let conv = self.conv(&format!("{name}.conv"), cin, 2 * cout, arch.kernel, rng);
        let norm = arch
            .batch_norm
            .then(|| self.norm(&format!("{name}.bn"), 2 * cout));
        GluBlock {
            conv,
            norm,
            channels: cout,
        }
    }

    fn stack(&mut self, cin: usize, arch: &Architecture, rng: &mut dyn RngCore) -> Vec<GluBlock> {
        (0..arch.blocks)
            .map(|i| {
                let c = if i == 0 { cin } else { arch.hidden };
                self.glu(i, c, arch.hidden, arch, rng)
            })
            .collect()
    }
}

fn run_stack<T: Real>(blocks: &[GluBlock], sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
    blocks.iter().try_fold(x, |h, b| b.forward(sess, h))
}

/// Per-frame posterior parameters and the sampled latent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentCode {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub blocks: Vec<GluBlock>,
    pub mu_head: Conv,
    pub logvar_head: Conv,
}

impl Encoder {
    /// Encodes `x` of shape `[batch, D, T]`. With `rng` the latent is drawn as
    /// `mu + exp(logvar / 2) * eps`; without it `z` is the posterior mean.
    pub fn encode<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        x: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LatentCode> {
        let h = run_stack(&self.blocks, sess, x)?;
        let mu = self.mu_head.forward(sess, h)?;
        let logvar = self.logvar_head.forward(sess, h)?;
        let z = match rng {
            Some(rng) => {
                let shape = sess.tape.shape(mu).to_vec();
                let eps = sess.standard_normal(&shape, rng);
                let half = sess.tape.scale(logvar, T::from_f64(0.5))?;
                let std = sess.tape.exp(half)?;
                let noise = sess.tape.mul(std, eps)?;
                sess.tape.add(mu, noise)?
            }
            None => mu,
        };
        Ok(LatentCode { mu, logvar, z })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub blocks: Vec<GluBlock>,
    pub out: Conv,
}

impl Decoder {
    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, input: Var) -> Result<Var> {
        let h = run_stack(&self.blocks, sess, input)?;
        self.out.forward(sess, h)
    }
}

/// Wasserstein critic: gated conv stack, global mean pooling, linear score.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub blocks: Vec<GluBlock>,
    pub out: Conv,
}

impl Critic {
    /// Unbounded score per batch item, shape `[batch]`.
    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = run_stack(&self.blocks, sess, x)?;
        // A 1x1 projection commutes with mean pooling over frames.
        let s = self.out.forward(sess, h)?;
        sess.tape.mean(s, &[1, 2])
    }
}

/// Network structure; parameter values live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub encoder: Encoder,
    pub decoders: Vec<Decoder>,
    pub critics: Vec<Critic>,
}

impl Model {
    /// Builds the structure and initializes parameters. Encoder and decoders
    /// draw from `init_rng`; critics draw only from `critic_rng`, so adding
    /// critics never changes the generator initialization.
    pub fn build<T: Real>(
        arch: Architecture,
        init_rng: &mut dyn RngCore,
        critic_rng: &mut dyn RngCore,
    ) -> Result<(Self, ParamStore<T>)> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let encoder = {
            let mut b = Builder {
                store: &mut store,
                group: Group::Encoder,
                prefix: "enc".into(),
            };
            let blocks = b.stack(arch.feature_dim, &arch, init_rng);
            Encoder {
                blocks,
                mu_head: b.conv("mu", arch.hidden, arch.latent_dim, 1, init_rng),
                logvar_head: b.conv("logvar", arch.hidden, arch.latent_dim, 1, init_rng),
            }
        };
        let n_decoders = match arch.decoder {
            DecoderMode::Shared => 1,
            DecoderMode::Multi => arch.n_speakers,
        };
        let decoders = (0..n_decoders)
            .map(|s| {
                let mut b = Builder {
                    store: &mut store,
                    group: Group::Decoder(s),
                    prefix: format!("dec{s}"),
                };
                let blocks = b.stack(arch.latent_dim + arch.identity_width, &arch, init_rng);
                Decoder {
                    blocks,
                    out: b.conv("out", arch.hidden, arch.feature_dim, 1, init_rng),
                }
            })
            .collect();
        let critics = if arch.critics {
            (0..arch.n_speakers)
                .map(|s| {
                    let mut b = Builder {
                        store: &mut store,
                        group: Group::Critic(s),
                        prefix: format!("critic{s}"),
                    };
                    let blocks = b.stack(arch.feature_dim, &arch, critic_rng);
                    Critic {
                        blocks,
                        out: b.conv("out", arch.hidden, 1, 1, critic_rng),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((
            Self {
                arch,
                encoder,
                decoders,
                critics,
            },
            store,
        ))
    }

    pub fn n_speakers(&self) -> usize {
        self.arch.n_speakers
    }

    pub fn check_speaker(&self, s: usize) -> Result<()> {
        if s < self.arch.n_speakers {
            Ok(())
        } else {
            Err(Error::UnknownSpeaker(s))
        }
    }

    pub fn encode<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        x: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LatentCode> {
        let shape = sess.tape.shape(x);
        if shape.len() != 3 || shape[1] != self.arch.feature_dim {
            return Err(Error::FeatureDim {
                expected: self.arch.feature_dim,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        self.encoder.encode(sess, x, rng)
    }

    /// Decodes latent frames toward `target`. Shared mode appends the
    /// one-hot identity of `target` to every frame; multi mode routes to the
    /// target's own decoder.
    pub fn decode<T: Real>(&self, sess: &mut Session<'_, T>, z: Var, target: usize) -> Result<Var> {
        self.check_speaker(target)?;
        match self.arch.decoder {
            DecoderMode::Multi => self.decoders[target].forward(sess, z),
            DecoderMode::Shared => {
                let input = if self.arch.identity_width == 0 {
                    z
                } else {
                    let id = identity_frames(
                        sess.tape.shape(z)[0],
                        self.arch.identity_width,
                        sess.tape.shape(z)[2],
                        target,
                    )?;
                    let id = sess.constant(id);
                    sess.tape.concat(&[z, id], 1)?
                };
                self.decoders[0].forward(sess, input)
            }
        }
    }

    pub fn criticize<T: Real>(&self, sess: &mut Session<'_, T>, x: Var, speaker: usize) -> Result<Var> {
        self.check_speaker(speaker)?;
        let critic = self
            .critics
            .get(speaker)
            .ok_or(Error::MissingCritic(speaker))?;
        critic.forward(sess, x)
    }
}

/// One-hot identity of `speaker` broadcast to `[batch, width, frames]`.
pub fn identity_frames<T: Real>(batch: usize, width: usize, frames: usize, speaker: usize) -> Result<Tensor<T>> {
    if speaker >= width {
        return Err(Error::UnknownSpeaker(speaker));
    }
    let mut t = Tensor::zeros(&[batch, width, frames]);
    for b in 0..batch {
        let off = (b * width + speaker) * frames;
        t.data_mut()[off..off + frames].fill(T::ONE);
    }
    Ok(t)
}

/// Model structure together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub model: Model,
    pub params: ParamStore<T>,
}

impl<T: Real> ModelBundle<T> {
    pub fn new(arch: Architecture, init_rng: &mut dyn RngCore, critic_rng: &mut dyn RngCore) -> Result<Self> {
        let (model, params) = Model::build(arch, init_rng, critic_rng)?;
        Ok(Self { model, params })
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            model: self.model.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{GroupFilter, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(decoder: DecoderMode, n: usize, critics: bool) -> Architecture {
        Architecture {
            latent_dim: 4,
            hidden: 4,
            kernel: 3,
            blocks: 2,
            ..Architecture::new(decoder, n, critics)
        }
    }

    fn bundle(arch: Architecture) -> ModelBundle<f64> {
        ModelBundle::new(
            arch,
            &mut ChaCha8Rng::seed_from_u64(1),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap()
    }

    fn input(batch: usize, frames: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..batch * FEATURE_DIM * frames)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::new(&[batch, FEATURE_DIM, frames], data).unwrap()
    }

    #[test]
    fn glu_gate_values() {
        // Hand-built block: identity conv on 2 channels, no batch norm.
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w".into(), Tensor::from_f64(&[2, 2, 1], &[1.0, 0.0, 0.0, 1.0]).unwrap(), Group::Encoder, true);
        let b = store.add("b".into(), Tensor::zeros(&[2]), Group::Encoder, true);
        let block = GluBlock {
            conv: Conv {
                weight: w,
                bias: b,
                stride: 1,
                padding: 0,
            },
            norm: None,
            channels: 1,
        };
        for (a, g, expect, tol) in [
            (2.0, 0.0, 1.0, 0.0),
            (3.0, 50.0, 3.0, 1e-9),
            (1.0, libm::log(3.0), 0.75, 1e-15),
        ] {
            let mut sess = Session::new(&mut store, Mode::Train, GroupFilter::Nothing);
            let x = sess.constant(Tensor::from_f64(&[1, 2, 1], &[a, g]).unwrap());
            let y = block.forward(&mut sess, x).unwrap();
            assert!((sess.value(y).item().unwrap() - expect).abs() <= tol);
        }
    }

    #[test]
    fn zero_heads_give_standard_normal_latent() {
        let mut b = bundle(tiny(DecoderMode::Multi, 2, false));
        for head in [&b.model.encoder.mu_head, &b.model.encoder.logvar_head] {
            b.params.get_mut(head.weight).data_mut().fill(0.0);
            b.params.get_mut(head.bias).data_mut().fill(0.0);
        }
        let mut sess = Session::new(&mut b.params, Mode::Train, GroupFilter::Nothing);
        let x = sess.constant(input(2, 8, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let code = b.model.encode(&mut sess, x, Some(&mut rng)).unwrap();
        assert!(sess.value(code.mu).data().iter().all(|&v| v == 0.0));
        assert!(sess.value(code.logvar).data().iter().all(|&v| v == 0.0));
        let z = sess.value(code.z).clone();
        let mut sess2 = Session::new(&mut b.params, Mode::Train, GroupFilter::Nothing);
        let eps = sess2.standard_normal(z.shape(), &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(sess2.value(eps), &z);
    }

    #[test]
    fn latent_shape_is_speaker_agnostic() {
        let mut b = bundle(tiny(DecoderMode::Multi, 3, false));
        let mut sess = Session::new(&mut b.params, Mode::Eval, GroupFilter::Nothing);
        let x = sess.constant(input(2, 16, 5));
        let code = b.model.encode(&mut sess, x, None).unwrap();
        assert_eq!(sess.tape.shape(code.mu), &[2, 4, 16]);
        assert_eq!(sess.tape.shape(code.logvar), &[2, 4, 16]);
        assert_eq!(code.z, code.mu);
        for s in 0..3 {
            let y = b.model.decode(&mut sess, code.z, s).unwrap();
            assert_eq!(sess.tape.shape(y), &[2, FEATURE_DIM, 16]);
        }
        assert_eq!(b.model.decode(&mut sess, code.z, 3), Err(Error::UnknownSpeaker(3)));
    }

    #[test]
    fn decoder_routing_is_isolated() {
        let mut b = bundle(tiny(DecoderMode::Multi, 2, false));
        let run = |b: &mut ModelBundle<f64>, target| {
            let mut sess = Session::new(&mut b.params, Mode::Eval, GroupFilter::Nothing);
            let z = sess.constant(input(1, 8, 9).reshape(&[1, 36, 8]).unwrap());
            let z = sess.tape.narrow(z, 1, 0, 4).unwrap();
            let y = b.model.decode(&mut sess, z, target).unwrap();
            sess.value(y).clone()
        };
        let before = run(&mut b, 0);
        let w = b.model.decoders[1].out.weight;
        b.params.get_mut(w).data_mut()[0] += 1.0;
        assert_eq!(run(&mut b, 0), before);
    }

    #[test]
    fn shared_identity_vector_is_one_hot() {
        let id = identity_frames::<f64>(2, 4, 3, 0).unwrap();
        for b in 0..2 {
            for t in 0..3 {
                let col: Vec<f64> = (0..4).map(|c| id.data()[(b * 4 + c) * 3 + t]).collect();
                assert_eq!(col, [1.0, 0.0, 0.0, 0.0]);
            }
        }
        assert!(identity_frames::<f64>(1, 4, 3, 4).is_err());
    }

    #[test]
    fn parameter_set_counts() {
        for n in 1..5 {
            let b = bundle(tiny(DecoderMode::Multi, n, true));
            assert_eq!(b.model.decoders.len(), n);
            assert_eq!(b.model.critics.len(), n);
            let decoder_groups: Vec<_> = (0..n)
                .map(|s| b.params.iter().filter(|(_, p)| p.group == Group::Decoder(s)).count())
                .collect();
            assert!(decoder_groups.iter().all(|&c| c == decoder_groups[0] && c > 0));
        }
        let shared = bundle(tiny(DecoderMode::Shared, 4, false));
        assert_eq!(shared.model.decoders.len(), 1);
        assert!(shared.model.critics.is_empty());
    }

    #[test]
    fn critic_scores() {
        let mut b = bundle(tiny(DecoderMode::Multi, 2, true));
        let score = |b: &mut ModelBundle<f64>, s: usize, seed| {
            let mut sess = Session::new(&mut b.params, Mode::Train, GroupFilter::Nothing);
            let x = sess.constant(input(3, 8, seed).map(|v| v * 10.0));
            let y = b.model.criticize(&mut sess, x, s).unwrap();
            sess.value(y).clone()
        };
        let s1 = score(&mut b, 1, 4);
        assert_eq!(s1.shape(), &[3]);
        assert!(s1.is_finite());
        let w0 = b.model.critics[0].out.weight;
        b.params.get_mut(w0).data_mut().iter_mut().for_each(|v| *v += 0.5);
        assert_eq!(score(&mut b, 1, 4), s1);

        let out = b.model.critics[0].out.clone();
        b.params.get_mut(out.weight).data_mut().fill(0.0);
        b.params.get_mut(out.bias).data_mut().fill(0.0);
        assert!(score(&mut b, 0, 6).data().iter().all(|&v| v == 0.0));

        let mut plain = bundle(tiny(DecoderMode::Multi, 2, false));
        let mut sess = Session::new(&mut plain.params, Mode::Train, GroupFilter::Nothing);
        let x = sess.constant(input(1, 8, 1));
        assert_eq!(plain.model.criticize(&mut sess, x, 0), Err(Error::MissingCritic(0)));
    }

    #[test]
    fn running_stats_follow_the_filter() {
        let mut b = bundle(tiny(DecoderMode::Multi, 2, false));
        let rm = b.model.encoder.blocks[0].norm.as_ref().unwrap().running_mean;
        let before = b.params.get(rm).clone();
        for (filter, changes) in [(GroupFilter::Critics, false), (GroupFilter::Generator, true)] {
            let snapshot = b.params.get(rm).clone();
            let mut sess = Session::new(&mut b.params, Mode::Train, filter);
            let x = sess.constant(input(2, 8, 2).map(|v| v + 3.0));
            b.model.encode(&mut sess, x, None).unwrap();
            drop(sess);
            assert_eq!(b.params.get(rm) != &snapshot, changes);
        }
        assert_ne!(b.params.get(rm), &before);
        let mut sess = Session::new(&mut b.params, Mode::Eval, GroupFilter::All);
        let x = sess.constant(input(2, 8, 2));
        b.model.encode(&mut sess, x, None).unwrap();
    }
}
