use std::collections::BTreeMap;

use avsr_tensor::{BatchStats, Scalar, Tape, Tensor, Var};

use crate::error::{AvsrError, Result};
use crate::params::{group_of, ParamKind, ParamStore, Trainable};

/// One forward pass: a fresh tape plus read-only access to the parameters.
///
/// In train mode, parameters of trainable groups become gradient leaves and
/// their batch-norm layers use batch statistics. Frozen groups behave as in
/// eval mode so that nothing about them changes during a stage.
pub struct Ctx<'a, S: Scalar> {
    pub tape: Tape<S>,
    store: &'a ParamStore<S>,
    train: bool,
    trainable: &'a Trainable,
    leaves: BTreeMap<String, Var>,
    bn_stats: Vec<(String, BatchStats<S>)>,
}

/// What a finished forward pass hands back to the optimiser.
pub struct Recorded<S> {
    pub tape: Tape<S>,
    pub leaves: BTreeMap<String, Var>,
    pub bn_stats: Vec<(String, BatchStats<S>)>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(store: &'a ParamStore<S>, train: bool, trainable: &'a Trainable) -> Self {
        Ctx { tape: Tape::new(), store, train, trainable, leaves: BTreeMap::new(), bn_stats: Vec::new() }
    }

    pub fn eval(store: &'a ParamStore<S>) -> Self {
        static NOTHING: Trainable = Trainable::Nothing;
        Self::new(store, false, &NOTHING)
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn learns(&self, name: &str) -> bool {
        self.train && self.trainable.contains(group_of(name))
    }

    /// Tape leaf for a weight; repeated requests return the same leaf so
    /// gradients from every use accumulate.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name).ok_or_else(|| AvsrError::Missing(format!("parameter {name}")))?;
        let learn = p.kind == ParamKind::Weight && self.learns(name);
        let v = self.tape.leaf(p.tensor.clone(), learn);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor<S>> {
        self.store.tensor(name)
    }

    pub fn record_bn(&mut self, prefix: &str, stats: BatchStats<S>) {
        self.bn_stats.push((prefix.to_string(), stats));
    }

    pub fn finish(self) -> Recorded<S> {
        Recorded { tape: self.tape, leaves: self.leaves, bn_stats: self.bn_stats }
    }
}
