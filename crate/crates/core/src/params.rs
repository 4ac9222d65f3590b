//! Parameter bookkeeping shared by the flow, the networks and the models:
//! named in-order traversal, flat packing for gradient checks, and binding
//! onto a tape as differentiable leaves.
//!
//! Every parameter-bearing type visits its tensors in one canonical order;
//! `bind` implementations push leaves in that same order, which is what lets
//! gradients, optimizer state and checkpoints line up by index.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

pub trait HasParams {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray));
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray));
}

/// Collects tape leaves in traversal order while a model binds itself.
pub struct Binder<'t> {
    pub tape: &'t Tape,
    leaves: Vec<Var>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Self {
            tape,
            leaves: Vec::new(),
        }
    }

    pub fn leaf(&mut self, value: &DenseArray) -> Var {
        let var = self.tape.leaf(value.clone());
        self.leaves.push(var);
        var
    }

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn into_leaves(self) -> Vec<Var> {
        self.leaves
    }
}

/// Named shapes in traversal order.
pub fn param_names_and_shapes(model: &impl HasParams) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    model.for_each_param("", &mut |name, arr| {
        out.push((name.to_string(), arr.shape().to_vec()));
    });
    out
}

pub fn param_count(model: &impl HasParams) -> usize {
    let mut n = 0;
    model.for_each_param("", &mut |_, arr| n += arr.len());
    n
}

/// Concatenate every parameter tensor into one flat vector.
pub fn flatten_params(model: &impl HasParams) -> DenseArray {
    let mut data = Vec::new();
    model.for_each_param("", &mut |_, arr| data.extend_from_slice(arr.data()));
    DenseArray::from_vec(data)
}

/// Write a flat vector back into the parameter tensors, in traversal order.
pub fn load_flat_params(model: &mut impl HasParams, flat: &DenseArray) -> Result<()> {
    let expected = param_count(model);
    if flat.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "flat vector has {} values, model has {expected} parameters",
            flat.len()
        )));
    }
    let mut offset = 0;
    model.for_each_param_mut("", &mut |_, arr| {
        let n = arr.len();
        arr.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
        offset += n;
    });
    Ok(())
}

/// Clone every parameter tensor in traversal order.
pub fn clone_param_tensors(model: &impl HasParams) -> Vec<DenseArray> {
    let mut out = Vec::new();
    model.for_each_param("", &mut |_, arr| out.push(arr.clone()));
    out
}

/// Join a name prefix with a component, skipping the dot at the root.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
