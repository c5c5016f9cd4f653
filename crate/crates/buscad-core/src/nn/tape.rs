use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

use super::params::{ParamId, ParamStore};

pub type Arr = ArrayD<f32>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct BackOp {
    pub parents: Vec<Var>,
    /// Maps the gradient at this node to gradient contributions for each
    /// parent, in `parents` order.
    pub run: Box<dyn FnOnce(&Arr) -> Vec<Arr>>,
}

struct Node {
    value: Arr,
    param: Option<ParamId>,
    back: Option<BackOp>,
}

/// Gradients keyed by parameter id, produced by [`Tape::backward`].
#[derive(Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Arr>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Arr> {
        self.by_param.get(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Largest absolute gradient component, for divergence diagnostics.
    pub fn max_abs(&self) -> f32 {
        self.by_param
            .values()
            .flat_map(|a| a.iter())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// A dynamically built computation graph. Creation order is a topological
/// order, so the backward pass is a single reverse sweep; gradient
/// accumulation happens in that fixed order.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; ops skip building backward
    /// closures. Used for inference.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-dim node.
    pub fn scalar(&self, v: Var) -> f32 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        a.iter().next().copied().unwrap()
    }

    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, None, None)
    }

    pub fn scalar_constant(&mut self, v: f32) -> Var {
        self.constant(Arr::from_elem(IxDyn(&[]), v))
    }

    /// Bind a parameter as a leaf; its gradient lands in
    /// [`Gradients::get`] under the parameter id.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Some(id), None)
    }

    pub(crate) fn push(&mut self, value: Arr, param: Option<ParamId>, back: Option<BackOp>) -> Var {
        self.nodes.push(Node {
            value,
            param,
            back: if self.grad_enabled { back } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Consumes the tape.
    pub fn backward(mut self, root: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(self.nodes[root.0].value.len(), 1, "root must be scalar");
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));

        let mut out = Gradients::default();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(pid) = self.nodes[i].param {
                out.by_param
                    .entry(pid)
                    .and_modify(|acc| *acc += &g)
                    .or_insert_with(|| g.clone());
            }
            if let Some(back) = self.nodes[i].back.take() {
                let contributions = (back.run)(&g);
                debug_assert_eq!(contributions.len(), back.parents.len());
                for (p, pg) in back.parents.iter().zip(contributions) {
                    debug_assert_eq!(
                        pg.shape(),
                        self.nodes[p.0].value.shape(),
                        "gradient shape mismatch at node {}",
                        p.0
                    );
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
