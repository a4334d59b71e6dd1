use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::autodiff::TensorError;
use crate::scalar::Scalar;

/// Computes parent gradients from the upstream gradient of a node.
///
/// `needs[i]` tells whether parent `i` wants a gradient; the closure may
/// return `None` for any parent that does not.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

pub(crate) struct GradFn<T: Scalar> {
    pub(crate) name: &'static str,
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) apply: BackwardFn<T>,
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// A dense row-major tensor that records the operation that produced it.
///
/// Cloning is cheap and shares the underlying node. Graphs are freed when
/// the last handle to their output is dropped.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if data.len() <= 16 {
            s.field("data", &*data);
        }
        s.field("requires_grad", &self.0.requires_grad);
        if let Some(g) = &self.0.grad_fn {
            s.field("op", &g.name);
        }
        s.finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<(), TensorError> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(TensorError::DataLength { shape: shape.to_vec(), len });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Constant tensor, never receives gradients.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        check_shape(shape, data.len())?;
        Ok(Self::raw(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        check_shape(shape, data.len())?;
        Ok(Self::raw(shape.to_vec(), data, true, None))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::raw(vec![1], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n]).expect("valid shape")
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n]).expect("valid shape")
    }

    pub fn ones_like(other: &Tensor<T>) -> Self {
        Self::full(other.shape(), T::one())
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn,
        }))
    }

    /// Result of an operation. Records `grad_fn` only when some parent
    /// participates in differentiation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        name: &'static str,
        parents: Vec<Tensor<T>>,
        apply: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn { name, parents, apply });
        Self::raw(shape, data, requires_grad, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the producing operation, `None` for leaves and constants.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values, used by optimizers on leaf parameters.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    /// Gradient, or zeros when none has been accumulated.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.grad().unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Independent copy with the same values and trainability but no history.
    pub fn deep_clone(&self) -> Self {
        Self::raw(self.0.shape.clone(), self.to_vec(), self.0.requires_grad && self.0.grad_fn.is_none(), None)
    }

    /// Constant copy of the values, detached from any graph.
    pub fn detach(&self) -> Self {
        Self::raw(self.0.shape.clone(), self.to_vec(), false, None)
    }

    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Nodes reachable from `self` that participate in differentiation, in
    /// topological order (inputs before outputs).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // (node, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.requires_grad() || !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(g) = &t.0.grad_fn {
                for p in g.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Reverse-mode sweep from a one-element loss.
    ///
    /// Every reachable tensor that requires grad has the gradient of the
    /// loss added to its `grad` buffer.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: std::collections::HashMap<usize, Vec<T>> = std::collections::HashMap::new();
        pending.insert(self.key(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(upstream) = pending.remove(&node.key()) else {
                continue;
            };
            node.accumulate_grad(&upstream);
            let Some(gf) = &node.0.grad_fn else { continue };
            let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
            let mut grads = (gf.apply)(&upstream, &needs);
            if super::fault::is_corrupted(gf.name) {
                let wrong = T::of(1.5);
                grads.iter_mut().flatten().flatten().for_each(|g| *g *= wrong);
            }
            debug_assert_eq!(grads.len(), gf.parents.len(), "{} backward arity", gf.name);
            for ((parent, grad), need) in gf.parents.iter().zip(grads).zip(needs) {
                let (Some(grad), true) = (grad, need) else { continue };
                debug_assert_eq!(grad.len(), parent.numel(), "{} backward shape", gf.name);
                match pending.entry(parent.key()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        e.get_mut().iter_mut().zip(&grad).for_each(|(a, &b)| *a += b)
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(grad);
                    }
                }
            }
        }
        Ok(())
    }
}
