//! Parameter storage, per-step binding onto a tape, and optimizer plumbing.

use alloc::string::String;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Encoder,
    Decoder(usize),
    Critic(usize),
}

impl Group {
    pub fn is_critic(self) -> bool {
        matches!(self, Group::Critic(_))
    }
}

/// Selects parameter groups for optimizer steps and running-stat updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupFilter {
    All,
    /// Encoder and decoders.
    Generator,
    Critics,
    Nothing,
}

impl GroupFilter {
    pub fn admits(self, g: Group) -> bool {
        match self {
            GroupFilter::All => true,
            GroupFilter::Generator => !g.is_critic(),
            GroupFilter::Critics => g.is_critic(),
            GroupFilter::Nothing => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: Group,
    /// Batch-norm running statistics are stored here too but never trained.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: String, value: Tensor<T>, group: Group, trainable: bool) -> ParamId {
        self.params.push(Param {
            name,
            value,
            group,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar values in trainable parameters admitted by `filter`.
    pub fn count(&self, filter: GroupFilter) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && filter.admits(p.group))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    group: p.group,
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; gradients recorded.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// One forward/backward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'a, T: Real> {
    pub tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    stats: GroupFilter,
}

impl<'a, T: Real> Session<'a, T> {
    /// `stats` selects whose batch-norm running statistics a train-mode pass
    /// may update.
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode, stats: GroupFilter) -> Self {
        let n = store.len();
        Self {
            tape: Tape::new(),
            store,
            bound: alloc::vec![None; n],
            mode,
            stats,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Batch norm honoring the session mode; updates running statistics of
    /// admitted groups in train mode.
    pub fn batch_norm(&mut self, bn: &crate::netblocks::BatchNorm, x: Var) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let eps = T::from_f64(bn.eps);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, gamma, beta, eps)?;
                if self.stats.admits(bn.group) {
                    let m = T::from_f64(bn.momentum);
                    let keep = T::ONE - m;
                    for (r, &s) in self.store.get_mut(bn.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                        *r = keep * *r + m * s;
                    }
                    for (r, &s) in self
                        .store
                        .get_mut(bn.running_var)
                        .data_mut()
                        .iter_mut()
                        .zip(&stats.var_unbiased)
                    {
                        *r = keep * *r + m * s;
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.get(bn.running_mean).data().to_vec();
                let var = self.store.get(bn.running_var).data().to_vec();
                self.tape.batch_norm_fixed(x, gamma, beta, &mean, &var, eps)
            }
        }
    }

    /// Standard-normal noise tensor drawn from `rng`.
    pub fn standard_normal(&mut self, shape: &[usize], rng: &mut dyn RngCore) -> Var {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::from_f64(v)
            })
            .collect();
        self.tape.constant(Tensor::from_parts(shape.to_vec(), data))
    }

    /// Runs backward from `loss` and collects gradients of bound trainable
    /// parameters. The session (and its tape) is consumed.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        self.tape.backward(loss)?;
        let mut entries = Vec::new();
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = self.tape.grad(*v) {
                    entries.push((ParamId(i), g.clone()));
                }
            }
        }
        Ok(Gradients { entries })
    }
}

/// Gradients of one loss w.r.t. the parameters it touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub entries: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }
}

/// Adam over a [`ParamStore`]; each parameter keeps its own moment state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub config: AdamConfig,
    states: Vec<Option<AdamState<T>>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            states: alloc::vec![None; n_params],
        }
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState<T>> {
        self.states.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn states(&self) -> &[Option<AdamState<T>>] {
        &self.states
    }

    pub fn set_state(&mut self, id: ParamId, state: AdamState<T>) {
        if self.states.len() <= id.0 {
            self.states.resize(id.0 + 1, None);
        }
        self.states[id.0] = Some(state);
    }

    /// Steps every parameter that received a gradient and is admitted by
    /// `filter`. Parameters absent from `grads` are left untouched.
    pub fn apply(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, filter: GroupFilter) -> Result<()> {
        for (id, g) in &grads.entries {
            let p = &mut store.params[id.0];
            if !p.trainable || !filter.admits(p.group) {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
            let st = self.states[id.0].get_or_insert_with(|| AdamState::new(p.value.shape()));
            st.step(&mut p.value, g, &self.config)?;
        }
        Ok(())
    }
}
