//! Neural building blocks evaluated on a [`Graph`].
//!
//! Parameters live in a [`ParamStore`] and are addressed by [`ParamId`];
//! layers only hold ids. A [`Ctx`] owns the graph for one forward pass and
//! binds each parameter to a leaf the first time a layer asks for it.

mod layers;
mod store;

pub use layers::{BatchNorm, Dense, Dropout, PreactBlock, Projection, SeparableConv};
pub use store::{Init, Param, ParamId, ParamStore};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{BatchStats, Gradients, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// State of one forward pass: the graph, parameter bindings, the dropout
/// stream and the batch statistics observed by train-mode batch norms.
pub struct Ctx<'a, T> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    record_grad: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<(BatchNorm, BatchStats)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, dropout_seed: u64) -> Self {
        Ctx {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            record_grad: false,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            bn_updates: Vec::new(),
        }
    }

    /// Marks trainable parameters as requiring gradients.
    pub fn with_grad(mut self) -> Self {
        self.record_grad = true;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let p = self.store.param(id);
        let t = p.value.clone().with_requires_grad(self.record_grad && p.trainable);
        let v = self.graph.leaf(t);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    pub(crate) fn dropout_mask(&mut self, len: usize, rate: f64) -> Vec<T> {
        let keep = T::from_f64(1.0 / (1.0 - rate));
        // A unit is dropped when a uniform 32-bit draw falls below this.
        let cut = (rate * 4_294_967_296.0).round() as u64;
        (0..len)
            .map(|_| {
                if u64::from(self.rng.next_u32()) < cut {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    }

    pub(crate) fn record_bn(&mut self, bn: BatchNorm, stats: BatchStats) {
        self.bn_updates.push((bn, stats));
    }

    /// Gradients per parameter id; `None` for parameters the pass never
    /// touched or that are not trainable.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<(BatchNorm, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Folds observed batch statistics into the running estimates.
pub fn apply_bn_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    updates: Vec<(BatchNorm, BatchStats)>,
) {
    for (bn, stats) in updates {
        bn.update_running(store, &stats);
    }
}

/// Evaluates a free-standing dropout on a tensor (see [`Dropout`]).
pub fn dropout<T: Scalar>(input: &Tensor<T>, rate: f64, mode: Mode, seed: u64) -> Result<Tensor<T>> {
    let layer = Dropout::new(rate)?;
    let store = ParamStore::new();
    let mut ctx = Ctx::new(&store, mode, seed);
    let x = ctx.input(input.clone());
    let y = layer.forward(&mut ctx, x)?;
    Ok(ctx.value(y).clone())
}
