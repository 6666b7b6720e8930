//! Self-check battery: gradient checks, the KL closed form against a
//! Monte-Carlo estimate, loss-composition identities, metric oracles and
//! DTW against exhaustive path enumeration.

use mdvc_core::corpus::FeatureSequence;
use mdvc_core::gradcheck::{check_fn, check_params};
use mdvc_core::losses::{self, LossWeights};
use mdvc_core::metrics::{dtw_align, global_variance, mcd, msd};
use mdvc_core::netblocks::{Architecture, DecoderMode, LatentCode, Model, ModelBundle};
use mdvc_core::params::{GroupFilter, Mode, Session};
use mdvc_core::tape::{Tape, Var};
use mdvc_core::{Tensor, FEATURE_DIM as D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const ASSEMBLY_TOL: f64 = 1e-3;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<28} {}", self.name, self.detail)
    }
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> mdvc_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, tape.shape(v), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    tape.sum_all(p)
}

type Case<'a> = dyn FnMut(&mut ChaCha8Rng, u64) -> mdvc_core::Result<f64> + 'a;

fn trials(name: &str, n: u64, tol: f64, case: &mut Case<'_>) -> CheckResult {
    let mut worst: f64 = 0.0;
    for t in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(t * 7919 + 17);
        match case(&mut rng, t) {
            Ok(e) if e.is_finite() => worst = worst.max(e),
            Ok(_) => return outcome(name, false, "non-finite error".into()),
            Err(e) => return outcome(name, false, e.to_string()),
        }
    }
    outcome(name, worst <= tol, format!("max rel err {worst:.2e} over {n} trials (tol {tol:.0e})"))
}

fn shape3(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..4), rng.random_range(1..4), rng.random_range(2..6)]
}

type Unary = fn(&mut Tape<f64>, Var) -> mdvc_core::Result<Var>;
type Binary = fn(&mut Tape<f64>, Var, Var) -> mdvc_core::Result<Var>;

fn unary_check(name: &str, n: u64, lo: f64, hi: f64, op: &dyn Fn(&mut Tape<f64>, Var) -> mdvc_core::Result<Var>) -> CheckResult {
    trials(name, n, PRIMITIVE_TOL, &mut |rng, seed| {
        let s = shape3(rng);
        let x = rand_tensor(rng, &s, lo, hi);
        Ok(check_fn(&[x], STEP, |t, v| {
            let y = op(t, v[0])?;
            project(t, y, seed)
        })?
        .max_rel_err)
    })
}

/// Gradient check of a pointwise op given by `forward` and its claimed
/// derivative `derivative(x, y)`.
pub fn check_custom_unary(name: &str, trials: u64, forward: fn(f64) -> f64, derivative: fn(f64, f64) -> f64) -> CheckResult {
    unary_check(name, trials, -2.0, 2.0, &|t, a| t.custom_unary(a, forward, derivative))
}

fn primitive_checks(n: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let binaries: [(&str, Binary); 3] = [
        ("grad/add", |t, a, b| t.add(a, b)),
        ("grad/sub", |t, a, b| t.sub(a, b)),
        ("grad/mul", |t, a, b| t.mul(a, b)),
    ];
    for (name, op) in binaries {
        out.push(trials(name, n, PRIMITIVE_TOL, &mut |rng, seed| {
            let s = shape3(rng);
            let a = rand_tensor(rng, &s, -2.0, 2.0);
            let b = if seed % 4 == 0 {
                Tensor::scalar(rng.random_range(-2.0..2.0))
            } else {
                rand_tensor(rng, &s, -2.0, 2.0)
            };
            Ok(check_fn(&[a, b], STEP, |t, v| {
                let y = op(t, v[0], v[1])?;
                project(t, y, seed)
            })?
            .max_rel_err)
        }));
    }
    let unaries: [(&str, f64, f64, Unary); 8] = [
        ("grad/exp", -2.0, 2.0, |t, a| t.exp(a)),
        ("grad/log", 0.2, 3.0, |t, a| t.log(a)),
        ("grad/sigmoid", -4.0, 4.0, |t, a| t.sigmoid(a)),
        ("grad/square", -2.0, 2.0, |t, a| t.square(a)),
        ("grad/neg", -2.0, 2.0, |t, a| t.neg(a)),
        ("grad/scale", -2.0, 2.0, |t, a| t.scale(a, -1.7)),
        ("grad/add_scalar", -2.0, 2.0, |t, a| t.add_scalar(a, 0.3)),
        ("grad/mean_axes", -2.0, 2.0, |t, a| t.mean(a, &[0, 2])),
    ];
    for (name, lo, hi, op) in unaries {
        out.push(unary_check(name, n, lo, hi, &op));
    }
    out.push(unary_check("grad/sum_axis", n, -2.0, 2.0, &|t, a| t.sum(a, &[1])));
    out.push(check_custom_unary("grad/custom_unary", n, |x| x * x * x, |x, _| 3.0 * x * x));
    out.push(trials("grad/matmul", n, PRIMITIVE_TOL, &mut |rng, seed| {
        let (m, k, p) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let a = rand_tensor(rng, &[m, k], -1.0, 1.0);
        let b = rand_tensor(rng, &[k, p], -1.0, 1.0);
        Ok(check_fn(&[a, b], STEP, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        })?
        .max_rel_err)
    }));
    out.push(trials("grad/conv1d", n, PRIMITIVE_TOL, &mut |rng, seed| {
        let (b, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(1..4);
        let (stride, padding) = (rng.random_range(1..3), rng.random_range(0..3));
        let len = rng.random_range(k..k + 6);
        let x = rand_tensor(rng, &[b, cin, len], -1.0, 1.0);
        let w = rand_tensor(rng, &[cout, cin, k], -1.0, 1.0);
        let bias = rand_tensor(rng, &[cout], -1.0, 1.0);
        Ok(check_fn(&[x, w, bias], STEP, |t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), stride, padding)?;
            project(t, y, seed)
        })?
        .max_rel_err)
    }));
    out.push(trials("grad/narrow_concat", n, PRIMITIVE_TOL, &mut |rng, seed| {
        let axis = (seed % 3) as usize;
        let s = shape3(rng);
        let mut s2 = s.clone();
        s2[axis] = rng.random_range(1..4);
        let a = rand_tensor(rng, &s, -1.0, 1.0);
        let b = rand_tensor(rng, &s2, -1.0, 1.0);
        let len = rng.random_range(1..=s[axis]);
        Ok(check_fn(&[a, b], STEP, |t, v| {
            let c = t.concat(&[v[0], v[1]], axis)?;
            let y = t.narrow(c, axis, 0, len + 1)?;
            project(t, y, seed)
        })?
        .max_rel_err)
    }));
    out.push(trials("grad/batch_norm", n, PRIMITIVE_TOL, &mut |rng, seed| {
        let (b, c, len) = (rng.random_range(2..4), rng.random_range(1..4), rng.random_range(2..6));
        let x = rand_tensor(rng, &[b, c, len], -2.0, 2.0);
        let g = rand_tensor(rng, &[c], 0.5, 1.5);
        let be = rand_tensor(rng, &[c], -0.5, 0.5);
        Ok(check_fn(&[x, g, be], STEP, |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, seed)
        })?
        .max_rel_err)
    }));
    out
}

fn tiny(decoder: DecoderMode, n: usize, seed: u64) -> mdvc_core::Result<ModelBundle<f64>> {
    let arch = Architecture {
        latent_dim: 4,
        hidden: 5,
        kernel: 3,
        blocks: 2,
        ..Architecture::new(decoder, n, true)
    };
    ModelBundle::new(arch, &mut ChaCha8Rng::seed_from_u64(seed), &mut ChaCha8Rng::seed_from_u64(seed + 1))
}

fn features(seed: u64, frames: usize) -> Tensor<f64> {
    rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[2, D, frames], -1.0, 1.0)
}

fn assembly_check(name: &str, decoder: DecoderMode) -> CheckResult {
    let run = || -> mdvc_core::Result<f64> {
        let b = tiny(decoder, 3, 21)?;
        let x = features(1, 12);
        let reals: Vec<Tensor<f64>> = (0..3).map(|s| features(10 + s, 12)).collect();
        let r = check_params(&b.params, GroupFilter::All, 3, STEP, |sess: &mut Session<'_, f64>| {
            let xv = sess.constant(x.clone());
            let rv: Vec<Option<Var>> = reals.iter().map(|t| Some(sess.constant(t.clone()))).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let code = b.model.encode(sess, xv, Some(&mut rng))?;
            let out = losses::cyclevaewgan_total(&b.model, sess, xv, &code, 1, &[0, 1, 2], &rv, LossWeights::CYCLEVAEWGAN, &mut rng)?;
            Ok(out.total)
        })?;
        Ok(r.max_rel_err)
    };
    match run() {
        Ok(e) => outcome(name, e <= ASSEMBLY_TOL, format!("max rel err {e:.2e} (tol {ASSEMBLY_TOL:.0e})")),
        Err(e) => outcome(name, false, e.to_string()),
    }
}

fn kl_value(mu: f64, lv: f64) -> mdvc_core::Result<f64> {
    let mut tape = Tape::<f64>::new();
    let m = tape.constant(Tensor::from_f64(&[1, 1, 1], &[mu])?);
    let l = tape.constant(Tensor::from_f64(&[1, 1, 1], &[lv])?);
    let kl = losses::kl_to_standard_normal(&mut tape, &LatentCode { mu: m, logvar: l, z: m })?;
    Ok(tape.value(kl).data()[0])
}

/// Closed-form KL against a Monte-Carlo estimate stratified over the
/// quantiles of the posterior, plus the `mu = 1, var = 1` anchor.
fn kl_check() -> CheckResult {
    let run = || -> mdvc_core::Result<(f64, f64)> {
        let anchor = kl_value(1.0, 0.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::standard();
        let n = 10_000;
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let mu: f64 = rng.random_range(-1.5..1.5);
            let lv: f64 = rng.random_range(-1.0..1.0);
            let closed = kl_value(mu, lv)?;
            let sd = (0.5 * lv).exp();
            let mut acc = 0.0;
            for i in 0..n {
                let u = (i as f64 + rng.random::<f64>()) / n as f64;
                let e = normal.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
                let z = mu + sd * e;
                acc += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
            }
            let mc = acc / n as f64;
            worst = worst.max((closed - mc).abs() / closed.abs().max(mc.abs()));
        }
        Ok((anchor, worst))
    };
    match run() {
        Ok((anchor, worst)) => outcome(
            "kl/closed_form",
            anchor == 0.5 && worst <= 0.01,
            format!("anchor {anchor}, max rel diff to Monte-Carlo {worst:.2e} (tol 1e-2)"),
        ),
        Err(e) => outcome("kl/closed_form", false, e.to_string()),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn composition_check() -> CheckResult {
    let run = || -> mdvc_core::Result<f64> {
        let mut worst: f64 = 0.0;
        for decoder in [DecoderMode::Multi, DecoderMode::Shared] {
            let mut b = tiny(decoder, 4, 31)?;
            let model: Model = b.model.clone();
            let mut sess = Session::new(&mut b.params, Mode::Train, GroupFilter::Nothing);
            let x = sess.constant(features(2, 8));
            let reals: Vec<Option<Var>> = (0..4).map(|s| Some(sess.constant(features(40 + s, 8)))).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let code = model.encode(&mut sess, x, Some(&mut rng))?;
            let (src, all) = (1, [0, 1, 2, 3]);
            let s = &mut sess;
            let m = &model;
            // summed objectives against independently computed pairwise terms
            let w = LossWeights::CYCLEVAEWGAN;
            let total = losses::cyclevaewgan_total(m, s, x, &code, src, &all, &reals, w, &mut rng.clone())?;
            let mut r = rng.clone();
            let mut pairwise = 0.0;
            for y in [0, 2, 3] {
                pairwise += losses::cyclevaewgan_loss(m, s, x, &code, src, y, &reals, w, &mut r)?.report.total;
            }
            worst = worst.max(rel(total.report.total, pairwise));
            worst = worst.max(rel(total.report.total, total.report.parts_total()));
            let total = losses::cyclevae_total(m, s, x, &code, src, &all, LossWeights::CYCLEVAE, &mut rng.clone())?;
            let mut r = rng.clone();
            let mut pairwise = 0.0;
            for y in [0, 2, 3] {
                pairwise += losses::cyclevae_loss(m, s, x, &code, src, y, LossWeights::CYCLEVAE, &mut r)?.report.total;
            }
            worst = worst.max(rel(total.report.total, pairwise));
            // cycle term and vae term add up to the one-pair objective
            let vae = losses::vae_loss(m, s, x, &code, src)?;
            let one = losses::cyclevae_loss(m, s, x, &code, src, 2, LossWeights::CYCLEVAE, &mut rng.clone())?;
            let cyc = losses::cycle_loss(m, s, x, &code, src, 2, &mut rng.clone())?;
            let cyc = s.value(cyc).data()[0];
            worst = worst.max(rel(one.report.total, vae.report.total + cyc));
            // lambda_2 = 0 leaves the plain VAE objective
            let zero = losses::cyclevae_loss(m, s, x, &code, src, 2, LossWeights::new(0.0, 0.0)?, &mut rng.clone())?;
            worst = worst.max(rel(zero.report.total, vae.report.total));
            // lambda_1 = 0 removes every adversarial term
            let a = losses::cyclevaewgan_total(m, s, x, &code, src, &all, &reals, LossWeights::CYCLEVAE, &mut rng.clone())?;
            let c = losses::cyclevae_total(m, s, x, &code, src, &all, LossWeights::CYCLEVAE, &mut rng.clone())?;
            worst = worst.max(rel(a.report.total, c.report.total));
            if decoder == DecoderMode::Shared {
                let vw = losses::vaewgan_loss(m, s, x, &code, src, 2, reals[2].unwrap(), LossWeights::new(1.0, 0.0)?)?;
                let conv = m.decode(s, code.z, 2)?;
                let adv = losses::wgan_loss(m, s, reals[2].unwrap(), conv, 2)?;
                worst = worst.max(rel(vw.report.total, vae.report.total + s.value(adv).data()[0]));
            }
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => outcome("losses/composition", w <= 1e-5, format!("max rel diff {w:.2e} (tol 1e-5)")),
        Err(e) => outcome("losses/composition", false, e.to_string()),
    }
}

fn seq(frames: usize, mut f: impl FnMut(usize, usize) -> f32) -> FeatureSequence {
    FeatureSequence::new("v", 0, (0..frames * D).map(|i| f(i / D, i % D)).collect()).expect("finite values")
}

fn metric_checks() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = seq(80, |_, _| rng.random_range(-1.0..1.0));
    let mut out = Vec::new();
    out.push(outcome("metrics/mcd_self", mcd(&a, &a) == 0.0, format!("{}", mcd(&a, &a))));
    let m = msd(&a, &a);
    out.push(outcome("metrics/msd_self", m.as_ref().is_ok_and(|&v| v == 0.0), format!("{m:?}")));
    let gv = global_variance([&seq(10, |_, d| d as f32)]);
    let ok = gv.as_ref().is_ok_and(|g| g.per_dim.iter().all(|&v| v == 0.0) && g.average == 0.0);
    out.push(outcome("metrics/gv_constant", ok, format!("{:?}", gv.map(|g| g.average))));
    let unit = mcd(&seq(1, |_, _| 0.0), &seq(1, |_, d| (d == 3) as u8 as f32));
    let expected = 10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2;
    out.push(outcome("metrics/mcd_unit", (unit - expected).abs() <= 1e-6, format!("{unit:.6} vs {expected:.6}")));
    let b = seq(100, |t, d| (0.3 * t as f32 + d as f32).sin() + 0.1);
    let b2 = seq(100, |t, d| 2.0 * b.frame(t)[d]);
    let shift = msd(&b, &b2);
    let ok = shift.as_ref().is_ok_and(|&v| (v - 4f64.ln()).abs() <= 1e-6);
    out.push(outcome("metrics/msd_scaling", ok, format!("{shift:?} vs ln 4")));
    out
}

fn brute_force(n: usize, m: usize, dist: &dyn Fn(usize, usize) -> f64) -> f64 {
    fn go(i: usize, j: usize, n: usize, m: usize, dist: &dyn Fn(usize, usize) -> f64) -> f64 {
        let here = dist(i, j);
        if (i, j) == (n - 1, m - 1) {
            return here;
        }
        let mut best = f64::INFINITY;
        for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
            if i + di < n && j + dj < m {
                best = best.min(go(i + di, j + dj, n, m, dist));
            }
        }
        here + best
    }
    go(0, 0, n, m, dist)
}

fn dtw_check() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let a = seq(n, |_, _| rng.random_range(-1.0..1.0));
        let b = seq(m, |_, _| rng.random_range(-1.0..1.0));
        let dist = |i: usize, j: usize| {
            a.frame(i)
                .iter()
                .zip(b.frame(j))
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        worst = worst.max((dtw_align(&a, &b).cost - brute_force(n, m, &dist)).abs());
    }
    outcome("dtw/brute_force", worst <= 1e-9, format!("max abs diff {worst:.1e} over 50 pairs"))
}

/// Runs every check; `trials` sets the random trials per primitive.
pub fn run_battery(trials: u64) -> Vec<CheckResult> {
    let mut out = primitive_checks(trials);
    out.push(assembly_check("grad/assembly_shared", DecoderMode::Shared));
    out.push(assembly_check("grad/assembly_multi", DecoderMode::Multi));
    out.push(kl_check());
    out.push(composition_check());
    out.extend(metric_checks());
    out.push(dtw_check());
    out
}
