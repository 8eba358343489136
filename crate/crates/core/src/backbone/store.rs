//! Named parameter storage. Parameters live outside the autodiff graph;
//! each forward pass binds them as leaves, and optimizers write updates
//! back through their `ParamId`.

use crate::tensor::Tensor;
use crate::util::{fnv1a64_f64, mix};

/// Which tuning stage owns a parameter.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamGroup {
    /// Frozen backbone weights.
    Backbone,
    /// Adjustable-norm parameters (gamma, beta, gamma0) created by injection.
    Norm,
    /// Visual-adapter parameters created by injection.
    Adapter,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub(crate) fn push(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        group: ParamGroup,
    ) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids()
            .filter(|id| self.params[id.0].group == group)
            .collect()
    }

    /// Total number of scalar values across a set of parameters.
    pub fn scalar_count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.value(*id).len()).sum()
    }

    /// Order-dependent content hash over the given parameters.
    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for id in ids {
            h = mix(h, fnv1a64_f64(self.value(*id).data()));
        }
        h
    }

    pub fn group_checksum(&self, group: ParamGroup) -> u64 {
        self.checksum(&self.ids_in_group(group))
    }
}
