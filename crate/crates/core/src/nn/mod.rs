//! Parameterized layers and the residual, squeeze-and-excitation and bridge
//! blocks built from them.
//!
//! Layers do not own tensors. Every weight and running statistic lives in a
//! [`ParamStore`] under a stable dotted name; layers keep [`ParamId`]s into it.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

mod block;
mod layers;
mod se;

pub use block::{BasicBlock, Bridge, SePosition, Shortcut, ShortcutSpec};
pub use layers::{BatchNorm2d, Conv2d, Linear, BN_EPS, BN_MOMENTUM};
pub use se::{se_hidden_width, SeBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics: checkpointed, never trained or counted.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config("parameter name", format!("duplicate `{name}`")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Trainable scalar count; running statistics are excluded.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Two distinct entries borrowed mutably at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        assert_ne!(a, b);
        if a.0 < b.0 {
            let (lo, hi) = self.entries.split_at_mut(b.0);
            (&mut lo[a.0].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.entries.split_at_mut(a.0);
            (&mut hi[0].value, &mut lo[b.0].value)
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.value.zero_grad();
        }
    }

    /// Moves gradients of every parameter registered on `tape` into the store.
    pub fn collect_grads(&mut self, tape: &mut Tape<T>) -> Result<()> {
        let pairs: Vec<(usize, Var)> = tape.keyed_leaves().collect();
        for (key, var) in pairs {
            if let Some(g) = tape.take_grad(var) {
                self.entries[key].value.set_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Forward-pass context: the tape being recorded, the parameter store and
/// the train/eval mode.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
    /// Record parameters as gradient-requiring leaves.
    pub track_grads: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            track_grads: mode == Mode::Train,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = &*self.store;
        let track = self.track_grads;
        self.tape.keyed_leaf(id.0, || {
            let mut t = store.get(id).detach();
            t.set_requires_grad(track);
            t
        })
    }

    pub(crate) fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.tape.push_scope(name);
        let out = f(self);
        self.tape.pop_scope();
        out
    }
}

/// Zero-mean normal samples with standard deviation `sqrt(2 / fan_in)`.
pub fn he_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::config("fan_in", "must be at least 1"));
    }
    let std = he_std(fan_in);
    let normal = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64_lossy(normal.sample(rng)))
        .collect();
    Tensor::new(shape, data)
}

pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
