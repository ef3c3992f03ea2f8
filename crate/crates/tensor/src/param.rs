use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// A model parameter: value, gradient accumulator and a trainable flag.
///
/// Frozen parameters (`trainable == false`) never receive gradients and are
/// never touched by an optimizer step.
#[derive(Clone, Debug)]
pub struct Param<F: Scalar> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub trainable: bool,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Tensor<F>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            trainable,
        }
    }
}

/// Shared handle to a parameter. Modules hold these; the store names them.
#[derive(Clone, Debug)]
pub struct ParamRef<F: Scalar>(Rc<RefCell<Param<F>>>);

impl<F: Scalar> ParamRef<F> {
    pub fn new(value: Tensor<F>, trainable: bool) -> Self {
        ParamRef(Rc::new(RefCell::new(Param::new(value, trainable))))
    }

    pub fn borrow(&self) -> Ref<'_, Param<F>> {
        self.0.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Param<F>> {
        self.0.borrow_mut()
    }

    pub fn value(&self) -> Tensor<F> {
        self.0.borrow().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().value.shape().to_vec()
    }

    pub fn trainable(&self) -> bool {
        self.0.borrow().trainable
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.0.borrow_mut().trainable = trainable;
    }

    pub fn set_value(&self, value: Tensor<F>) {
        let mut p = self.0.borrow_mut();
        debug_assert_eq!(p.value.shape(), value.shape());
        p.value = value;
    }

    pub fn zero_grad(&self) {
        let mut p = self.0.borrow_mut();
        p.grad = Tensor::zeros(p.value.shape());
    }

    pub fn accumulate_grad(&self, g: &Tensor<F>) -> Result<()> {
        let mut p = self.0.borrow_mut();
        p.grad = p.grad.add(g)?;
        Ok(())
    }

    /// Identity comparison: do two handles point at the same parameter?
    pub fn ptr_eq(&self, other: &ParamRef<F>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// Named, insertion-ordered registry of parameters.
///
/// Ordering is what makes checkpoints and optimizer traversal deterministic,
/// so iteration never goes through a hash map.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<(String, ParamRef<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, param: ParamRef<F>) -> Result<ParamRef<F>> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::usage(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, param.clone()));
        Ok(param)
    }

    /// Create, register and return a new parameter in one step.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamRef<F> {
        let p = ParamRef::new(value, trainable);
        self.insert(name, p.clone()).expect("parameter name collision");
        p
    }

    pub fn get(&self, name: &str) -> Option<&ParamRef<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamRef<F>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.iter() {
            p.zero_grad();
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.borrow().value.numel()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(_, p)| p.borrow().value.numel())
            .sum()
    }
}
