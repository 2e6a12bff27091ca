use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Maps the output gradient to one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A dense row-major tensor. Cloning is cheap and shares the buffer.
#[derive(Clone)]
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    fn check_shape(len: usize, shape: &[usize]) -> Result<()> {
        if shape.contains(&0) {
            return dim_err(format!("shape {shape:?} has a zero extent"));
        }
        let n: usize = shape.iter().product();
        if n != len {
            return dim_err(format!("shape {shape:?} needs {n} elements, buffer has {len}"));
        }
        Ok(())
    }

    /// A constant tensor (no gradient).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(data.len(), shape)?;
        Ok(Self::build(data, shape.to_vec(), false))
    }

    /// A leaf that accumulates gradients.
    pub fn leaf(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(data.len(), shape)?;
        Ok(Self::build(data, shape.to_vec(), true))
    }

    pub fn from_f64(values: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::from_f64_lossy(v)).collect(), shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![v], vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![T::zero(); shape.iter().product()], shape)
    }

    /// Result of an operation. The backward closure is dropped when no parent
    /// needs a gradient, so constant subgraphs record nothing.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, parents: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        if !requires_grad {
            return Self::build(data, shape, false);
        }
        Tensor(Rc::new(Node {
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward: Some(backward),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Self {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return dim_err(format!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.0.data[0])
    }

    fn key(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a one-element loss. Gradients accumulate into
    /// every reachable tensor that requires one; call [`Tensor::zero_grad`]
    /// (or rebuild the graph) between steps.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return dim_err(format!("backward() needs a scalar loss, got shape {:?}", self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else { continue };
            if let Some(bw) = &t.0.backward {
                for (parent, pg) in t.0.parents.iter().zip(bw(&g)) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.len());
                    match pending.get_mut(&parent.key()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                        None => {
                            pending.insert(parent.key(), pg);
                        }
                    }
                }
            }
            let mut slot = t.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Post-order over the requires-grad subgraph (parents before children).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.parents.iter().filter(|p| p.requires_grad()) {
                if !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_buffer() {
        assert!(Tensor::<f64>::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f64>::new(vec![], &[0]).is_err());
        assert!(Tensor::<f64>::new(vec![1.0; 6], &[2, 3]).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert!(x.backward().is_err());
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let x = Tensor::<f64>::leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let x = Tensor::<f64>::leaf(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        let x = Tensor::<f64>::leaf(vec![3.0], &[1]).unwrap();
        let a = x.scale(2.0);
        let b = x.scale(5.0);
        a.add(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn intermediates_get_gradients() {
        let x = Tensor::<f64>::leaf(vec![1.0, -1.0], &[2]).unwrap();
        let y = x.scale(3.0);
        y.sum_all().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn constants_record_nothing() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(2.0).sum_all();
        assert!(!y.requires_grad());
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
