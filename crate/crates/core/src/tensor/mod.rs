//! Reverse-mode automatic differentiation on dense f32 tensors.
//!
//! Define-by-run: every operation eagerly computes its value and, when
//! gradients are being tracked, records a backward closure plus edges to its
//! inputs. [`Tensor::backward`] walks the resulting DAG in reverse
//! topological order and accumulates gradients into every tensor that
//! requires them. Storage is f32; reductions inside the ops accumulate in
//! f64.
//!
//! Tensors are cheap handles (`Rc`) onto immutable forward values; only the
//! gradient buffer — and, for optimizers, parameter data — is mutated after
//! creation. The engine is single-threaded by contract.

pub mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    /// Gradients in flight during one backward sweep, keyed by node id.
    /// Kept in f64 so fan-in accumulation does not lose bits.
    static SWEEP: RefCell<Option<std::collections::HashMap<u64, Vec<f64>>>> =
        const { RefCell::new(None) };
}

/// Backward rule of one op: receives the output's forward data and incoming
/// gradient, accumulates into the gradients of the captured inputs.
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[f32])>;

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense n-dimensional f32 value, optionally part of an autodiff graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

/// Runs `f` with gradient recording disabled; used for evaluation passes.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite tensor data"
        );
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::new_node(shape, data, false, vec![], None))
    }

    /// Trainable leaf; gradients will be accumulated into it.
    pub fn param(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::new_node(shape, data, true, vec![], None))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_node(shape, vec![0.0; n], false, vec![], None)
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_node(shape, vec![value; n], false, vec![], None)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f32) -> Tensor {
        Tensor::new_node(vec![], vec![value], false, vec![], None)
    }

    /// Op-output constructor: tracks the graph only while gradients are
    /// enabled and some input requires them.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Tensor::new_node(shape, data, true, parents, Some(backward))
        } else {
            Tensor::new_node(shape, data, false, vec![], None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when this tensor is a graph leaf (no recorded inputs).
    pub fn is_leaf(&self) -> bool {
        self.0.parents.is_empty()
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data.borrow()[0]
    }

    /// Copy of the gradient buffer, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the underlying data in place (optimizer updates,
    /// checkpoint restore). Shape must be preserved.
    pub fn set_data(&self, new: &[f32]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    /// Copy of the value detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new_node(self.0.shape.clone(), self.to_vec(), false, vec![], None)
    }

    /// During a backward sweep this deposits into the in-flight gradient of
    /// `self`; leaf gradients are folded into persistent storage when the
    /// sweep reaches them.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        debug_assert_eq!(self.numel(), delta.len());
        let deposited = SWEEP.with(|s| {
            if let Some(map) = s.borrow_mut().as_mut() {
                let g = map
                    .entry(self.0.id)
                    .or_insert_with(|| vec![0.0; self.numel()]);
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
                true
            } else {
                false
            }
        });
        if !deposited {
            self.fold_persistent_grad(delta);
        }
    }

    fn fold_persistent_grad(&self, delta: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = (*gi as f64 + di) as f32;
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients propagate through the graph in f64 and are folded into the
    /// persistent (f32) `grad` of every *leaf* that requires them.
    /// Intermediate gradients are transient. Calling backward again without
    /// zeroing accumulates onto the leaf gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        // Reverse topological order via iterative DFS post-order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                let next = node.0.parents[child].clone();
                stack.push((node, child + 1));
                if next.requires_grad() && visited.insert(next.0.id) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }

        SWEEP.with(|s| {
            *s.borrow_mut() = Some(std::collections::HashMap::new());
        });
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            // In reverse topological order every consumer of `node` has
            // already run, so its in-flight gradient is complete.
            let grad = SWEEP.with(|s| {
                s.borrow_mut()
                    .as_mut()
                    .and_then(|map| map.remove(&node.0.id))
            });
            let Some(grad) = grad else { continue };
            if let Some(backward) = &node.0.backward {
                let g32: Vec<f32> = grad.iter().map(|&v| v as f32).collect();
                backward(&node.0.data.borrow(), &g32);
            }
            if node.is_leaf() && node.requires_grad() {
                node.fold_persistent_grad(&grad);
            }
        }
        SWEEP.with(|s| {
            *s.borrow_mut() = None;
        });
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::ops::*;
    use super::*;

    #[test]
    fn backward_of_weighted_sum_is_the_weights() {
        // loss = sum(w * x) with x fixed => dloss/dw = x.
        let w = Tensor::param(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let x = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let prod = mul(&w, &x).unwrap();
        let loss = scale(&mean_all(&prod), 4.0);
        loss.backward().unwrap();
        let g = w.grad().unwrap();
        for (gi, xi) in g.iter().zip([1.0f32, 2.0, 3.0, 4.0]) {
            assert!((gi - xi).abs() < 1e-6);
        }
    }

    #[test]
    fn disconnected_parameter_keeps_zero_grad() {
        let w = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let other = Tensor::param(vec![2], vec![3.0, 4.0]).unwrap();
        let loss = mean_all(&other);
        loss.backward().unwrap();
        assert!(w.grad().is_none());
        assert!(other.grad().is_some());
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let w = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = scale(&w, 2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let w = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let loss = mean_all(&w);
        loss.backward().unwrap();
        let g1 = w.grad().unwrap();
        loss.backward().unwrap();
        let g2 = w.grad().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn no_grad_suppresses_graph_building() {
        let w = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| scale(&w, 3.0));
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }

    #[test]
    fn shared_subexpression_gets_summed_gradients() {
        // loss = mean(x + x) => dloss/dx_i = 2/n.
        let x = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = mean_all(&add(&x, &x).unwrap());
        loss.backward().unwrap();
        for g in x.grad().unwrap() {
            assert!((g - 2.0 / 3.0).abs() < 1e-6);
        }
    }
}
