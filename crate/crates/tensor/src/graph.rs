use crate::error::TensorError;
use crate::param::ParamRef;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

/// Backward function: (out_value, parent_values, grad_out, parent_needs_grad)
/// returns one gradient per parent, `None` where the parent does not need one.
pub(crate) type BackFn<F> =
    Box<dyn Fn(&Tensor<F>, &[Tensor<F>], &Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

pub(crate) struct Node<F: Scalar> {
    pub(crate) value: Tensor<F>,
    pub(crate) parents: Vec<ValueId>,
    pub(crate) backward: Option<BackFn<F>>,
    pub(crate) param: Option<ParamRef<F>>,
    pub(crate) needs_grad: bool,
}

/// Dynamically recorded computation tape.
///
/// One graph per forward pass; values are append-only, so node indices are a
/// valid topological order and backward is a single reverse sweep.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Records values only; `backward` on such a graph is a usage error.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Insert a tensor that does not require gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> ValueId {
        self.push_node(value, Vec::new(), None, None, false)
    }

    /// Insert a parameter leaf. Gradients reaching this node accumulate into
    /// the parameter if it is trainable.
    pub fn param(&mut self, p: &ParamRef<F>) -> ValueId {
        let needs = self.grad_enabled && p.trainable();
        self.push_node(p.value(), Vec::new(), None, Some(p.clone()), needs)
    }

    pub(crate) fn push_node(
        &mut self,
        value: Tensor<F>,
        parents: Vec<ValueId>,
        backward: Option<BackFn<F>>,
        param: Option<ParamRef<F>>,
        needs_grad: bool,
    ) -> ValueId {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            param,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Record an op result. `make_backward` is only invoked when gradients
    /// are wanted, so inference pays nothing for closure setup.
    pub(crate) fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor<F>,
        parents: Vec<ValueId>,
        check_finite: bool,
        make_backward: impl FnOnce() -> BackFn<F>,
    ) -> Result<ValueId> {
        if check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let needs_grad = self.grad_enabled && parents.iter().any(|&p| self.nodes[p.0].needs_grad);
        let backward = if needs_grad { Some(make_backward()) } else { None };
        Ok(self.push_node(value, parents, backward, None, needs_grad))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively into
    /// every trainable parameter reachable from `loss`; frozen parameters are
    /// skipped entirely.
    pub fn backward(&self, loss: ValueId) -> Result<()> {
        if !self.grad_enabled {
            return Err(TensorError::usage("backward() on a no-grad graph"));
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::usage(format!(
                "backward() requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), F::ONE));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Some(p) = &node.param {
                if p.trainable() {
                    p.accumulate_grad(&g)?;
                }
            }
            if let Some(back) = &node.backward {
                let parent_values: Vec<Tensor<F>> = node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p.0].value.clone())
                    .collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p.0].needs_grad)
                    .collect();
                let parent_grads = back(&node.value, &parent_values, &g, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (parent, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    debug_assert_eq!(pg.shape(), self.nodes[parent.0].value.shape());
                    match &mut grads[parent.0] {
                        slot @ None => *slot = Some(pg),
                        Some(acc) => *acc = acc.add(&pg)?,
                    }
                }
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Graph::new()
    }
}
