//! Named trainable tensors, each owned by exactly one parameter group.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Which part of a multi-head model a parameter belongs to. Gradient routing and
/// per-group optimizer steps key off this tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    FeatureExtractor,
    ClassHead,
    RndHeads,
}

impl Owner {
    pub const ALL: [Owner; 3] = [Owner::FeatureExtractor, Owner::ClassHead, Owner::RndHeads];

    pub fn tag(self) -> &'static str {
        match self {
            Owner::FeatureExtractor => "feature_extractor",
            Owner::ClassHead => "class_head",
            Owner::RndHeads => "rnd_heads",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Owner::FeatureExtractor => 0,
            Owner::ClassHead => 1,
            Owner::RndHeads => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Owner::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub owner: Owner,
    pub value: Tensor,
    /// Whether weight decay applies. Biases are exempt.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, owner: Owner, value: Tensor, decay: bool) -> ParamId {
        self.params.push(Param { name: name.into(), owner, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_owned_by(&self, owner: Owner) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.owner == owner).map(|(id, _)| id).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count, optionally restricted to one owner.
    pub fn count(&self, owner: Option<Owner>) -> usize {
        self.params
            .iter()
            .filter(|p| owner.is_none_or(|o| p.owner == o))
            .map(|p| p.value.len())
            .sum()
    }

    /// Σ‖θ‖² over one group, or over everything.
    pub fn sum_sq(&self, owner: Option<Owner>) -> f64 {
        self.params.iter().filter(|p| owner.is_none_or(|o| p.owner == o)).map(|p| p.value.sum_sq()).sum()
    }
}
