use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Local vector-Jacobian product of one recorded operation.
///
/// Receives the gradient of the operation's output and a mask telling which
/// parents are tracked; returns one gradient per parent (`None` for parents
/// that do not need one).
pub(crate) type Backward = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    parents: Vec<usize>,
    backward: Option<Backward>,
    tracked: bool,
}

/// Wengert list of operations. Nodes are appended in evaluation order, so the
/// node index is already a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked leaf: receives a gradient on [`Tape::backward`].
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.insert(t.shape().to_vec(), Rc::new(t.data().to_vec()), Vec::new(), None, true)
    }

    /// Untracked leaf.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.insert(t.shape().to_vec(), Rc::new(t.data().to_vec()), Vec::new(), None, false)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        Ok(self.insert(shape.to_vec(), Rc::new(data), Vec::new(), None, false))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.insert(vec![1], Rc::new(vec![v]), Vec::new(), None, false)
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Rc<Vec<f64>>,
        parents: &[Var<'_>],
        backward: Backward,
    ) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let tracked = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].tracked)
        };
        if tracked {
            self.insert(shape, value, ids, Some(backward), true)
        } else {
            self.insert(shape, value, Vec::new(), None, false)
        }
    }

    fn insert(
        &self,
        shape: Vec<usize>,
        value: Rc<Vec<f64>>,
        parents: Vec<usize>,
        backward: Option<Backward>,
        tracked: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            parents,
            backward,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    pub(crate) fn is_tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Reverse sweep from a scalar `loss`. Gradients of intermediate nodes are
    /// released once propagated; only leaf gradients are returned.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::shape("backward", &loss_node.shape, &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].tracked).collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Grads { grads, shapes })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: &Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when nothing reached it.
    pub fn tensor(&self, v: &Var<'_>) -> Tensor {
        let shape = &self.shapes[v.id];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape(self.id)
    }

    pub fn numel(&self) -> usize {
        self.value().len()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.is_tracked(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape(), self.value().to_vec()).expect("node shape")
    }

    pub fn item(&self) -> f64 {
        self.value()[0]
    }
}
