use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Computes parent gradients from `(upstream gradient, node output, parents)`.
/// Entries are `None` for parents that do not require gradients.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[Var]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    id: u64,
    op: &'static str,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A tensor participating in a recorded computation.
///
/// Nodes only keep their parents alive while some ancestor requires a
/// gradient, so forward passes over constants free intermediates eagerly.
/// Node ids grow monotonically, which makes descending id order a valid
/// reverse topological order for [`backward`].
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A trainable leaf.
    pub fn leaf(value: Tensor) -> Self {
        Self::make("leaf", value, true, Vec::new(), None)
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Self::make("constant", value, false, Vec::new(), None)
    }

    fn make(
        op: &'static str,
        value: Tensor,
        requires_grad: bool,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
    ) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            value,
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Records an operation. Fails if the forward value is not finite.
    pub(crate) fn record(
        op: &'static str,
        value: Tensor,
        parents: &[&Var],
        backward: BackwardFn,
    ) -> Result<Self> {
        value.ensure_finite(op)?;
        if parents.iter().any(|p| p.requires_grad()) {
            let parents = parents.iter().map(|&p| p.clone()).collect();
            Ok(Self::make(op, value, true, parents, Some(backward)))
        } else {
            Ok(Self::make(op, value, false, Vec::new(), None))
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op(&self) -> &'static str {
        self.0.op
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Same underlying node.
    pub fn ptr_eq(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Value copy cut off from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }
}

/// Leaf gradients produced by [`backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.by_id.get(&var.id())
    }

    /// Gradient of `var`, or zeros when the output did not depend on it.
    pub fn get_or_zero(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Reverse-mode sweep from `root`, seeded with `seed` (same shape as root).
pub fn backward(root: &Var, seed: &Tensor) -> Result<Gradients> {
    if !root.requires_grad() {
        return Err(Error::State(format!(
            "backward from `{}` which is detached from every trainable leaf",
            root.op()
        )));
    }
    seed.expect_shape(root.shape(), "backward seed")?;

    let mut order: BTreeMap<u64, Var> = BTreeMap::new();
    let mut seen = HashSet::new();
    let mut stack = vec![root.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.extend(v.0.parents.iter().cloned());
        order.insert(v.id(), v);
    }

    let mut pending: HashMap<u64, Tensor> = HashMap::new();
    pending.insert(root.id(), seed.clone());
    let mut grads = Gradients::default();
    for (id, node) in order.into_iter().rev() {
        let Some(g) = pending.remove(&id) else { continue };
        let Some(bw) = node.0.backward.as_ref() else {
            grads.by_id.insert(id, g);
            continue;
        };
        let parent_grads = bw(&g, &node.0.value, &node.0.parents)?;
        for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !parent.requires_grad() {
                continue;
            }
            pg.ensure_finite(node.op())?;
            match pending.get_mut(&parent.id()) {
                Some(acc) => acc.add_assign(&pg)?,
                None => {
                    pending.insert(parent.id(), pg);
                }
            }
        }
    }
    Ok(grads)
}
