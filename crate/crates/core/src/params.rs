//! Named parameter collections and their binding onto a tape.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The independently optimized parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    WsiEncoder,
    Classifier,
    OmicsEncoder,
    OmicsDecoder,
    Memory,
}

impl GroupKind {
    pub const ALL: [GroupKind; 5] = [
        GroupKind::WsiEncoder,
        GroupKind::Classifier,
        GroupKind::OmicsEncoder,
        GroupKind::OmicsDecoder,
        GroupKind::Memory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupKind::WsiEncoder => "wsi_encoder",
            GroupKind::Classifier => "classifier",
            GroupKind::OmicsEncoder => "omics_encoder",
            GroupKind::OmicsDecoder => "omics_decoder",
            GroupKind::Memory => "memory",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn is_omics(self) -> bool {
        matches!(self, GroupKind::OmicsEncoder | GroupKind::OmicsDecoder)
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Stable address of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub group: GroupKind,
    pub index: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroup {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamGroup {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Parameter tensors partitioned into disjoint [`GroupKind`]s.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroups {
    groups: BTreeMap<GroupKind, ParamGroup>,
}

impl ParamGroups {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, group: GroupKind, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let g = self.groups.entry(group).or_default();
        g.names.push(name.into());
        g.tensors.push(tensor);
        ParamId {
            group,
            index: g.tensors.len() - 1,
        }
    }

    pub fn group(&self, kind: GroupKind) -> Option<&ParamGroup> {
        self.groups.get(&kind)
    }

    pub fn group_mut(&mut self, kind: GroupKind) -> Option<&mut ParamGroup> {
        self.groups.get_mut(&kind)
    }

    pub fn remove_group(&mut self, kind: GroupKind) -> Option<ParamGroup> {
        self.groups.remove(&kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = GroupKind> + '_ {
        self.groups.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (GroupKind, &ParamGroup)> {
        self.groups.iter().map(|(k, g)| (*k, g))
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor> {
        self.groups
            .get(&id.group)
            .and_then(|g| g.tensors.get(id.index))
            .ok_or_else(|| Error::Config(format!("missing parameter {}[{}]", id.group, id.index)))
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        self.groups
            .get_mut(&id.group)
            .and_then(|g| g.tensors.get_mut(id.index))
            .ok_or_else(|| Error::Config(format!("missing parameter {}[{}]", id.group, id.index)))
    }

    pub fn num_values(&self) -> usize {
        self.groups.values().map(ParamGroup::num_values).sum()
    }

    /// Records every tensor on `tape`; groups in `constant` become non-trainable leaves.
    pub fn bind(&self, tape: &mut Tape, constant: &[GroupKind]) -> Binding {
        let vars = self
            .groups
            .iter()
            .map(|(kind, g)| {
                let frozen = constant.contains(kind);
                let vs = g
                    .tensors
                    .iter()
                    .map(|t| {
                        if frozen {
                            tape.constant(t.clone())
                        } else {
                            tape.leaf(t.clone())
                        }
                    })
                    .collect();
                (*kind, vs)
            })
            .collect();
        Binding { vars }
    }

    /// Zero-valued gradient buffers with this layout.
    pub fn zeros_like(&self) -> GradSet {
        GradSet {
            groups: self
                .groups
                .iter()
                .map(|(k, g)| (*k, g.tensors.iter().map(|t| vec![0.0; t.len()]).collect()))
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ParamGroups`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: BTreeMap<GroupKind, Vec<Var>>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Result<Var> {
        self.vars
            .get(&id.group)
            .and_then(|v| v.get(id.index))
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {}[{}] is not bound", id.group, id.index)))
    }

    /// Accumulated leaf gradients, zeros where nothing flowed.
    pub fn gradients(&self, tape: &Tape) -> GradSet {
        GradSet {
            groups: self
                .vars
                .iter()
                .map(|(k, vs)| (*k, vs.iter().map(|v| tape.grad_or_zeros(*v)).collect()))
                .collect(),
        }
    }
}

/// Gradient buffers laid out like a [`ParamGroups`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    groups: BTreeMap<GroupKind, Vec<Vec<f64>>>,
}

impl GradSet {
    pub fn group(&self, kind: GroupKind) -> Option<&[Vec<f64>]> {
        self.groups.get(&kind).map(Vec::as_slice)
    }

    pub fn group_mut(&mut self, kind: GroupKind) -> Option<&mut Vec<Vec<f64>>> {
        self.groups.get_mut(&kind)
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.groups.get(&id.group).and_then(|g| g.get(id.index)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (GroupKind, &[Vec<f64>])> {
        self.groups.iter().map(|(k, g)| (*k, g.as_slice()))
    }

    pub fn norm(&self, kind: GroupKind) -> f64 {
        self.groups
            .get(&kind)
            .map(|g| g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }

    pub fn is_all_zero(&self, kind: GroupKind) -> bool {
        self.groups
            .get(&kind)
            .is_none_or(|g| g.iter().flatten().all(|&v| v == 0.0))
    }
}
