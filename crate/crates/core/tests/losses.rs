use mdvc_core::losses::{self, LossOutput, LossWeights};
use mdvc_core::netblocks::{Architecture, DecoderMode, LatentCode, ModelBundle};
use mdvc_core::params::{GroupFilter, Mode, Session};
use mdvc_core::tape::{Tape, Var};
use mdvc_core::{Tensor, FEATURE_DIM};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn tiny(decoder: DecoderMode, n: usize, seed: u64) -> ModelBundle<f64> {
    let arch = Architecture {
        latent_dim: 4,
        hidden: 5,
        kernel: 3,
        blocks: 1,
        ..Architecture::new(decoder, n, true)
    };
    ModelBundle::new(
        arch,
        &mut ChaCha8Rng::seed_from_u64(seed),
        &mut ChaCha8Rng::seed_from_u64(seed + 1000),
    )
    .unwrap()
}

fn features(seed: u64, frames: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..2 * FEATURE_DIM * frames).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[2, FEATURE_DIM, frames], data).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}

fn scalar(sess: &Session<'_, f64>, v: Var) -> f64 {
    sess.value(v).item().unwrap()
}

/// Shared setup: a session with `x`, real batches per speaker and one
/// posterior sample of `x`.
struct Fixture {
    bundle: ModelBundle<f64>,
    x: Tensor<f64>,
    reals: Vec<Tensor<f64>>,
}

impl Fixture {
    fn new(decoder: DecoderMode, n: usize, seed: u64) -> Self {
        Self {
            bundle: tiny(decoder, n, seed),
            x: features(seed + 1, 8),
            reals: (0..n as u64).map(|s| features(seed + 10 + s, 8)).collect(),
        }
    }

    /// Runs `f` inside a fresh train-mode session. `f` gets the x var, the
    /// reals, the code and an rng positioned right after the z sample.
    fn run<R>(
        &mut self,
        f: impl FnOnce(&mdvc_core::netblocks::Model, &mut Session<'_, f64>, Var, &[Option<Var>], &LatentCode, &mut ChaCha8Rng) -> R,
    ) -> R {
        let model = self.bundle.model.clone();
        let mut sess = Session::new(&mut self.bundle.params, Mode::Train, GroupFilter::Nothing);
        let x = sess.constant(self.x.clone());
        let reals: Vec<Option<Var>> = self.reals.iter().map(|t| Some(sess.constant(t.clone()))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let code = model.encode(&mut sess, x, Some(&mut rng)).unwrap();
        f(&model, &mut sess, x, &reals, &code, &mut rng)
    }
}

fn assert_report_consistent(out: &LossOutput) {
    assert!(
        close(out.report.total, out.report.parts_total(), 1e-5),
        "total {} parts {}",
        out.report.total,
        out.report.parts_total()
    );
}

#[test]
fn kl_matches_monte_carlo_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let mu: f64 = rng.random_range(-1.5..1.5);
        let lv: f64 = rng.random_range(-1.0..1.0);
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::from_f64(&[1, 1, 1], &[mu]).unwrap());
        let l = tape.constant(Tensor::from_f64(&[1, 1, 1], &[lv]).unwrap());
        let kl = losses::kl_to_standard_normal(&mut tape, &LatentCode { mu: m, logvar: l, z: m }).unwrap();
        let closed = tape.value(kl).item().unwrap();
        // E_q[log q(z) - log p(z)] with z ~ q, stratified over the
        // quantiles of q (one uniform draw per stratum)
        let sd = (0.5 * lv).exp();
        let n = 10_000;
        let normal = Normal::standard();
        let mut acc = 0.0;
        for i in 0..n {
            let u = (i as f64 + rng.random::<f64>()) / n as f64;
            let e = normal.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
            let z = mu + sd * e;
            acc += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        let mc = acc / n as f64;
        assert!(close(closed, mc, 0.01), "closed {closed} mc {mc}");
    }
}

#[test]
fn wgan_hand_built_first_element_critic() {
    // kernel 1, no batch norm, one block of width 1: value channel reads
    // u[0], gate is sigmoid(0) = 1/2, the head doubles it back.
    let arch = Architecture {
        latent_dim: 2,
        hidden: 1,
        kernel: 1,
        blocks: 1,
        batch_norm: false,
        ..Architecture::new(DecoderMode::Multi, 1, true)
    };
    let mut b = ModelBundle::<f64>::new(arch, &mut ChaCha8Rng::seed_from_u64(0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let crit = b.model.critics[0].clone();
    for (id, p) in b.params.iter_mut() {
        if p.group.is_critic() {
            p.value.data_mut().fill(0.0);
            if id == crit.blocks[0].conv.weight {
                p.value.data_mut()[0] = 1.0;
            }
            if id == crit.out.weight {
                p.value.data_mut()[0] = 2.0;
            }
        }
    }
    let mut real = vec![0.0; 3 * FEATURE_DIM];
    let mut fake = vec![0.0; 3 * FEATURE_DIM];
    let (r0, f0): ([f64; 3], [f64; 3]) = ([0.5, -1.0, 2.0], [1.5, 0.25, -0.75]);
    for i in 0..3 {
        real[i * FEATURE_DIM] = r0[i];
        real[i * FEATURE_DIM + 5] = 9.0;
        fake[i * FEATURE_DIM] = f0[i];
        fake[i * FEATURE_DIM + 7] = -4.0;
    }
    let mut sess = Session::new(&mut b.params, Mode::Train, GroupFilter::Nothing);
    let r = sess.constant(Tensor::new(&[3, FEATURE_DIM, 1], real).unwrap());
    let f = sess.constant(Tensor::new(&[3, FEATURE_DIM, 1], fake).unwrap());
    let w = losses::wgan_loss(&b.model, &mut sess, r, f, 0).unwrap();
    let expected = (0.5 - 1.0 + 2.0) / 3.0 - (1.5 + 0.25 - 0.75) / 3.0;
    assert!((scalar(&sess, w) - expected).abs() < 1e-12);
    let same = losses::wgan_loss(&b.model, &mut sess, r, r, 0).unwrap();
    assert_eq!(scalar(&sess, same), 0.0);
    assert!(losses::wgan_loss(&b.model, &mut sess, r, f, 1).is_err());
}

#[test]
fn constant_critic_gives_zero_wgan() {
    let mut fx = Fixture::new(DecoderMode::Multi, 2, 3);
    let outs: Vec<_> = fx.bundle.model.critics.iter().map(|c| c.out.weight).collect();
    for id in outs {
        fx.bundle.params.get_mut(id).data_mut().fill(0.0);
    }
    fx.run(|m, sess, x, reals, code, rng| {
        let w = losses::wgan_loss(m, sess, x, reals[1].unwrap(), 1).unwrap();
        assert_eq!(scalar(sess, w), 0.0);
        let a = losses::cyclevaewgan_loss(m, sess, x, code, 0, 1, reals, LossWeights::new(3.0, 1.0).unwrap(), &mut rng.clone()).unwrap();
        let b = losses::cyclevae_loss(m, sess, x, code, 0, 1, LossWeights::CYCLEVAE, &mut rng.clone()).unwrap();
        assert!(close(a.report.total, b.report.total, 1e-12));
    });
}

#[test]
fn cycle_loss_matches_manual_composition() {
    for decoder in [DecoderMode::Multi, DecoderMode::Shared] {
        let mut fx = Fixture::new(decoder, 3, 5);
        fx.run(|m, sess, x, _, code, rng| {
            let mut r1 = rng.clone();
            let graph = losses::cycle_loss(m, sess, x, code, 0, 2, &mut r1).unwrap();
            let mut r2 = rng.clone();
            let conv = m.decode(sess, code.z, 2).unwrap();
            let back_code = m.encode(sess, conv, Some(&mut r2)).unwrap();
            let back = m.decode(sess, back_code.z, 0).unwrap();
            let kl = losses::kl_to_standard_normal(&mut sess.tape, &back_code).unwrap();
            let rec = losses::recon_nll(&mut sess.tape, x, back).unwrap();
            let manual = scalar(sess, kl) + scalar(sess, rec);
            let g = scalar(sess, graph);
            assert!(g.is_finite() && g >= 0.0);
            assert!((g - manual).abs() <= 1e-6 * manual.abs().max(1.0));
        });
    }
}

#[test]
fn cycle_recon_vanishes_at_a_perfect_fixed_point() {
    // kernel 1, latent = features, no batch norm: force enc mu = x, logvar
    // head = very negative, decoder = identity. GLU gating halves values so
    // the heads compensate.
    let arch = Architecture {
        latent_dim: FEATURE_DIM,
        hidden: FEATURE_DIM,
        kernel: 1,
        blocks: 1,
        batch_norm: false,
        ..Architecture::new(DecoderMode::Multi, 1, false)
    };
    let mut b = ModelBundle::<f64>::new(arch, &mut ChaCha8Rng::seed_from_u64(0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let enc = b.model.encoder.clone();
    let dec = b.model.decoders[0].clone();
    let d = FEATURE_DIM;
    let eye = |scale: f64, rows: usize| {
        let mut t = vec![0.0; rows * d];
        for i in 0..d {
            t[i * d + i] = scale;
        }
        t
    };
    for (id, p) in b.params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let v = p.value.data_mut();
        v.fill(0.0);
        if id == enc.blocks[0].conv.weight || id == dec.blocks[0].conv.weight {
            // value half identity; gate half zero (gate = 1/2)
            v[..d * d].copy_from_slice(&eye(1.0, d));
        } else if id == enc.mu_head.weight || id == dec.out.weight {
            v.copy_from_slice(&eye(2.0, d));
        } else if id == enc.logvar_head.bias {
            v.fill(-60.0);
        }
    }
    let x = features(9, 6);
    let mut sess = Session::new(&mut b.params, Mode::Train, GroupFilter::Nothing);
    let xv = sess.constant(x);
    let code = b.model.encode(&mut sess, xv, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = losses::cyclevae_loss(&b.model, &mut sess, xv, &code, 0, 0, LossWeights::CYCLEVAE, &mut rng).unwrap();
    assert!(out.report.recon < 1e-20, "{}", out.report.recon);
    assert!(out.report.cycle_recon < 1e-12, "{}", out.report.cycle_recon);
}

#[test]
fn cyclevae_weights_compose_linearly() {
    let mut fx = Fixture::new(DecoderMode::Multi, 2, 7);
    fx.run(|m, sess, x, _, code, rng| {
        let vae = losses::vae_loss(m, sess, x, code, 0).unwrap();
        assert_eq!(vae.report.total, vae.report.kl + vae.report.recon);
        let zero = losses::cyclevae_loss(m, sess, x, code, 0, 1, LossWeights::new(0.0, 0.0).unwrap(), &mut rng.clone()).unwrap();
        assert_eq!(zero.report.total, vae.report.total);
        let one = losses::cyclevae_loss(m, sess, x, code, 0, 1, LossWeights::CYCLEVAE, &mut rng.clone()).unwrap();
        let two = losses::cyclevae_loss(m, sess, x, code, 0, 1, LossWeights::new(0.0, 2.0).unwrap(), &mut rng.clone()).unwrap();
        let cyc = losses::cycle_loss(m, sess, x, code, 0, 1, &mut rng.clone()).unwrap();
        let cyc = scalar(sess, cyc);
        assert!((one.report.total - (vae.report.total + cyc)).abs() < 1e-6);
        assert!((two.report.total - one.report.total - cyc).abs() < 1e-6);
        for o in [&zero, &one, &two] {
            assert_report_consistent(o);
        }
    });
}

#[test]
fn totals_equal_independent_pairwise_sums() {
    for decoder in [DecoderMode::Multi, DecoderMode::Shared] {
        let mut fx = Fixture::new(decoder, 4, 11);
        fx.run(|m, sess, x, reals, code, rng| {
            let all = [0, 1, 2, 3];
            let src = 2;
            let w = LossWeights::CYCLEVAEWGAN;

            let total = losses::cyclevae_total(m, sess, x, code, src, &all, LossWeights::CYCLEVAE, &mut rng.clone()).unwrap();
            let mut r = rng.clone();
            let mut pairwise = 0.0;
            for y in [0, 1, 3] {
                pairwise += losses::cyclevae_loss(m, sess, x, code, src, y, LossWeights::CYCLEVAE, &mut r).unwrap().report.total;
            }
            assert!(close(total.report.total, pairwise, 1e-5));
            assert_report_consistent(&total);

            let total = losses::cyclevaewgan_total(m, sess, x, code, src, &all, reals, w, &mut rng.clone()).unwrap();
            let mut r = rng.clone();
            let mut pairwise = 0.0;
            for y in [0, 1, 3] {
                let l = losses::cyclevaewgan_loss(m, sess, x, code, src, y, reals, w, &mut r).unwrap();
                assert_report_consistent(&l);
                pairwise += l.report.total;
            }
            assert!(close(total.report.total, pairwise, 1e-5));
            assert_report_consistent(&total);

            // two speakers: a single pairwise term
            let two = losses::cyclevaewgan_total(m, sess, x, code, src, &[src, 0], reals, w, &mut rng.clone()).unwrap();
            let one = losses::cyclevaewgan_loss(m, sess, x, code, src, 0, reals, w, &mut rng.clone()).unwrap();
            assert_eq!(two.report.total, one.report.total);

            // lambda_1 = 0 reduces the multi-speaker adversarial total to the CycleVAE sum
            let a = losses::cyclevaewgan_total(m, sess, x, code, src, &all, reals, LossWeights::CYCLEVAE, &mut rng.clone()).unwrap();
            let b = losses::cyclevae_total(m, sess, x, code, src, &all, LossWeights::CYCLEVAE, &mut rng.clone()).unwrap();
            assert_eq!(a.report.total, b.report.total);
        });
    }
}

#[test]
fn adversarial_terms_decompose() {
    let mut fx = Fixture::new(DecoderMode::Multi, 2, 13);
    fx.run(|m, sess, x, reals, code, rng| {
        let w = LossWeights::CYCLEVAEWGAN;
        let full = losses::cyclevaewgan_loss(m, sess, x, code, 0, 1, reals, w, &mut rng.clone()).unwrap();
        let cyc = losses::cyclevae_loss(m, sess, x, code, 0, 1, w, &mut rng.clone()).unwrap();
        let self_fake = m.decode(sess, code.z, 0).unwrap();
        let conv_fake = m.decode(sess, code.z, 1).unwrap();
        // self path under the source critic, conversion path under the target's
        let a = losses::wgan_loss(m, sess, reals[0].unwrap(), self_fake, 0).unwrap();
        let b = losses::wgan_loss(m, sess, reals[1].unwrap(), conv_fake, 1).unwrap();
        let (a, b) = (scalar(sess, a), scalar(sess, b));
        assert!(close(full.report.total, cyc.report.total + a + b, 1e-6));
        assert_eq!(full.report.wgan, vec![a, b]);
        let lam0 = losses::cyclevaewgan_loss(m, sess, x, code, 0, 1, reals, LossWeights::CYCLEVAE, &mut rng.clone()).unwrap();
        assert_eq!(lam0.report.total, cyc.report.total);
    });
}

#[test]
fn vaewgan_decomposes() {
    let mut fx = Fixture::new(DecoderMode::Shared, 2, 17);
    fx.run(|m, sess, x, reals, code, _| {
        let vae = losses::vae_loss(m, sess, x, code, 0).unwrap();
        let w1 = losses::vaewgan_loss(m, sess, x, code, 0, 1, reals[1].unwrap(), LossWeights::new(1.0, 0.0).unwrap()).unwrap();
        let conv = m.decode(sess, code.z, 1).unwrap();
        let adv = losses::wgan_loss(m, sess, reals[1].unwrap(), conv, 1).unwrap();
        assert!(close(w1.report.total, vae.report.total + scalar(sess, adv), 1e-6));
        assert_report_consistent(&w1);
        let w0 = losses::vaewgan_loss(m, sess, x, code, 0, 1, reals[1].unwrap(), LossWeights::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(w0.report.total, vae.report.total);
    });
}

#[test]
fn identity_free_vae_equals_zero_width_shared_vae() {
    let mk = |decoder| {
        let arch = Architecture {
            latent_dim: 4,
            hidden: 5,
            kernel: 3,
            blocks: 1,
            identity_width: 0,
            ..Architecture::new(decoder, 1, false)
        };
        ModelBundle::<f64>::new(arch, &mut ChaCha8Rng::seed_from_u64(21), &mut ChaCha8Rng::seed_from_u64(22)).unwrap()
    };
    let mut shared = mk(DecoderMode::Shared);
    let mut multi = mk(DecoderMode::Multi);
    let values: Vec<_> = shared.params.iter().map(|(_, p)| p.value.clone()).collect();
    for ((_, p), v) in multi.params.iter_mut().zip(values) {
        p.value = v;
    }
    let x = features(23, 8);
    let total = |b: &mut ModelBundle<f64>| {
        let model = b.model.clone();
        let mut sess = Session::new(&mut b.params, Mode::Train, GroupFilter::Nothing);
        let xv = sess.constant(x.clone());
        let code = model.encode(&mut sess, xv, Some(&mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        losses::vae_loss(&model, &mut sess, xv, &code, 0).unwrap().report.total
    };
    let (a, b) = (total(&mut shared), total(&mut multi));
    assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
}

#[test]
fn cycle_weight_zero_cuts_gradient_to_unpaired_path() {
    let mut fx = Fixture::new(DecoderMode::Multi, 2, 29);
    let dec1: Vec<_> = fx
        .bundle
        .params
        .iter()
        .filter(|(_, p)| p.group == mdvc_core::params::Group::Decoder(1) && p.trainable)
        .map(|(id, _)| id)
        .collect();
    let model = fx.bundle.model.clone();
    let grads_for = |fx: &mut Fixture, w: LossWeights| {
        let mut sess = Session::new(&mut fx.bundle.params, Mode::Train, GroupFilter::Nothing);
        let x = sess.constant(fx.x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let code = model.encode(&mut sess, x, Some(&mut rng)).unwrap();
        let out = losses::cyclevae_loss(&model, &mut sess, x, &code, 0, 1, w, &mut rng).unwrap();
        sess.backward(out.total).unwrap()
    };
    let g0 = grads_for(&mut fx, LossWeights::new(0.0, 0.0).unwrap());
    for &id in &dec1 {
        assert!(g0.get(id).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    }
    let g1 = grads_for(&mut fx, LossWeights::CYCLEVAE);
    assert!(dec1.iter().any(|&id| g1.get(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0))));
}

proptest! {
    #[test]
    fn kl_is_non_negative(mu in prop::collection::vec(-3.0f64..3.0, 6), lv in prop::collection::vec(-3.0f64..3.0, 6)) {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::new(&[1, 3, 2], mu.clone()).unwrap());
        let l = tape.constant(Tensor::new(&[1, 3, 2], lv.clone()).unwrap());
        let kl = losses::kl_to_standard_normal(&mut tape, &LatentCode { mu: m, logvar: l, z: m }).unwrap();
        let v = tape.value(kl).item().unwrap();
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn kl_zero_only_at_prior(mu in -1e-3f64..1e-3, lv in -1e-3f64..1e-3) {
        prop_assume!(mu.abs() > 1e-4 || lv.abs() > 1e-4);
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::from_f64(&[1, 1, 1], &[mu]).unwrap());
        let l = tape.constant(Tensor::from_f64(&[1, 1, 1], &[lv]).unwrap());
        let kl = losses::kl_to_standard_normal(&mut tape, &LatentCode { mu: m, logvar: l, z: m }).unwrap();
        prop_assert!(tape.value(kl).item().unwrap() > 0.0);
    }
}
