//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted node holding its forward value and, when
//! it depends on a tracked leaf, the parents and backward rule that produced
//! it. Untracked computations keep no parents, so intermediate values are
//! freed as soon as they go out of scope.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::Tensor;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Backward rule: given the parents, this node's value and the incoming
/// gradient, return one optional gradient per parent.
pub type BackwardFn = dyn Fn(&[Var], &Tensor, &Tensor) -> Vec<Option<Tensor>>;

struct Node {
    id: usize,
    value: Tensor,
    tracked: bool,
    op: Option<(Vec<Var>, Box<BackwardFn>)>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl core::fmt::Debug for Var {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Var {
    fn make(value: Tensor, tracked: bool, op: Option<(Vec<Var>, Box<BackwardFn>)>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            tracked,
            op,
        }))
    }

    /// A constant: gradients never flow into it.
    pub fn constant(value: Tensor) -> Self {
        Self::make(value, false, None)
    }

    /// A leaf whose gradient is reported by [`Var::backward`].
    pub fn leaf(value: Tensor) -> Self {
        Self::make(value, true, None)
    }

    /// Result of an op. The backward rule is only retained when at least one
    /// parent requires a gradient.
    pub fn from_op(
        value: Tensor,
        parents: &[&Var],
        backward: impl Fn(&[Var], &Tensor, &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            let parents = parents.iter().map(|&p| p.clone()).collect();
            Self::make(value, false, Some((parents, Box::new(backward))))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.tracked || self.0.op.is_some()
    }

    /// Backpropagate from this node, seeding with ones.
    pub fn backward(&self) -> Gradients {
        let seed = Tensor::full(self.shape(), 1.0);
        self.backward_with(seed)
    }

    pub fn backward_with(&self, seed: Tensor) -> Gradients {
        let order = self.topo_order();
        let mut grads: BTreeMap<usize, Tensor> = BTreeMap::new();
        grads.insert(self.id(), seed);
        let mut leaves = BTreeMap::new();
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                Some((parents, rule)) => {
                    let pg = rule(parents, node.value(), &g);
                    debug_assert_eq!(pg.len(), parents.len());
                    for (p, pg) in parents.iter().zip(pg) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), p.shape(), "gradient shape");
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    if node.0.tracked {
                        leaves.insert(node.id(), g);
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }

    /// Nodes reachable from `self` in topological order (parents first).
    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut seen = BTreeMap::new();
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if seen.insert(node.id(), ()).is_some() {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some((parents, _)) = &node.0.op {
                for p in parents {
                    if p.requires_grad() && !seen.contains_key(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradients of tracked leaves, keyed by node id.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: &Var) -> Option<&Tensor> {
        self.grads.get(&leaf.id())
    }

    pub fn remove(&mut self, leaf: &Var) -> Option<Tensor> {
        self.grads.remove(&leaf.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
