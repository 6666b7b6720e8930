//! Central finite-difference checks of tape gradients, at 64-bit.

use alloc::vec::Vec;

use crate::error::Result;
use crate::params::{GroupFilter, Mode, ParamStore, Session};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coordinates: usize,
}

impl GradCheck {
    fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            coordinates: self.coordinates + other.coordinates,
        }
    }
}

/// Relative error with an absolute floor so vanishing gradients compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Checks `f` (a scalar-valued graph over `inputs`) against central
/// differences on every input coordinate.
pub fn check_fn<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheck {
        max_rel_err: 0.0,
        coordinates: 0,
    };
    let mut work = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report = report.merge(GradCheck {
                max_rel_err: rel_err(grad.data()[i], numeric),
                coordinates: 1,
            });
        }
    }
    Ok(report)
}

fn loss_value<F>(store: &ParamStore<f64>, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Session<'_, f64>) -> Result<Var>,
{
    let mut s = store.clone();
    let mut sess = Session::new(&mut s, Mode::Train, GroupFilter::Nothing);
    let out = f(&mut sess)?;
    Ok(sess.value(out).data()[0])
}

/// Checks gradients of a model loss w.r.t. trainable parameters admitted by
/// `filter`, probing at most `per_param` evenly spaced coordinates of each
/// tensor. `f` must be deterministic (reseed any sampling inside it).
pub fn check_params<F>(
    store: &ParamStore<f64>,
    filter: GroupFilter,
    per_param: usize,
    step: f64,
    mut f: F,
) -> Result<GradCheck>
where
    F: FnMut(&mut Session<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut s = store.clone();
        let mut sess = Session::new(&mut s, Mode::Train, GroupFilter::Nothing);
        let out = f(&mut sess)?;
        sess.backward(out)?
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        coordinates: 0,
    };
    let mut work = store.clone();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable && filter.admits(p.group))
        .map(|(id, p)| (id, p.value.len()))
        .collect();
    for (id, len) in ids {
        let stride = (len / per_param.max(1)).max(1);
        for i in (0..len).step_by(stride).take(per_param) {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let plus = loss_value(&work, &mut f)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let minus = loss_value(&work, &mut f)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report = report.merge(GradCheck {
                max_rel_err: rel_err(analytic, numeric),
                coordinates: 1,
            });
        }
    }
    Ok(report)
}
