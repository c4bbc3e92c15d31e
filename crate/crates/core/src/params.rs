use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered, named collection of tensors: model parameters, their gradients,
/// or optimizer moments.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// True when both sets have identical names and shapes, in order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// Records every tensor on `tape`, differentiable or not.
    pub fn on_tape<'t>(&self, tape: &'t Tape, requires_grad: bool) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape, addressable by name.
pub struct BoundParams<'t> {
    vars: Vec<(String, Var<'t>)>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Substitutes the variable bound to `name`.
    pub fn replace(&mut self, name: &str, var: Var<'t>) {
        let slot = self
            .vars
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        slot.1 = var;
    }

    /// Pulls gradients for every bound parameter out of `grads`, filling
    /// zeros for parameters the loss did not touch.
    pub fn collect_grads(&self, grads: &mut Gradients, layout: &ParamSet) -> ParamSet {
        let mut out = ParamSet::new();
        for ((name, var), (_, value)) in self.vars.iter().zip(layout.iter()) {
            let g = grads.take(*var).unwrap_or_else(|| Tensor::zeros(value.shape()));
            out.push(name.clone(), g);
        }
        out
    }
}
