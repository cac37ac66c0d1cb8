//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied to [`Var`]s that descend from a
//! gradient-requiring leaf. [`Tape::backward`] walks the records in reverse
//! creation order, which is a valid topological order because a node can only
//! reference nodes created before it.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{invalid, Result};
use crate::param::Param;
use crate::tensor::Tensor;

/// Maps the upstream gradient to one optional gradient per parent. The second
/// argument says which parents actually need a gradient, so a kernel can skip
/// work (e.g. the input gradient of the first convolution).
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records operations for a later backward pass.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that only evaluates; nothing is retained for backward.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, parents: Vec<usize>, backward: Option<BackwardFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, backward });
        nodes.len() - 1
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(value),
        }
    }

    /// A free variable whose gradient can be read back after `backward`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.recording.then(|| self.push(Vec::new(), None));
        Var {
            tape: self,
            id,
            value: Rc::new(value),
        }
    }

    /// Registers a model parameter. Buffers (non-trainable state) enter as constants.
    pub fn param(&self, p: &Param) -> Var<'_> {
        if !p.is_trainable() {
            return self.constant(p.value().clone());
        }
        let v = self.leaf(p.value().clone());
        if let Some(id) = v.id {
            self.params.borrow_mut().push((p.name().to_string(), id));
        }
        v
    }

    /// Records an operation. `backward` receives the gradient of the output and
    /// must return one entry per parent, in order.
    pub fn record<'t, F>(&'t self, value: Tensor, parents: &[&Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let needs_grad = self.recording && parents.iter().any(|p| p.id.is_some());
        let id = needs_grad.then(|| {
            let ids = parents.iter().map(|p| p.id.unwrap_or(usize::MAX)).collect();
            self.push(ids, Some(Box::new(backward)))
        });
        Var {
            tape: self,
            id,
            value: Rc::new(value),
        }
    }

    /// Back-propagates from a scalar. The recorded closures are consumed, so a
    /// tape supports a single backward pass.
    pub fn backward(&self, root: &Var<'_>) -> Result<Gradients> {
        if root.value.numel() != 1 {
            return Err(invalid(
                "backward",
                format!("root must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let n = self.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let Some(root_id) = root.id else {
            return Ok(Gradients {
                grads,
                params: self.params.borrow().clone(),
            });
        };
        grads[root_id] = Some(Tensor::ones(root.value.shape()));
        let mut nodes = self.nodes.borrow_mut();
        for id in (0..=root_id).rev() {
            let Some(backward) = nodes[id].backward.take() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parents = std::mem::take(&mut nodes[id].parents);
            let needs: Vec<bool> = parents.iter().map(|&p| p != usize::MAX).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (&p, pg) in parents.iter().zip(parent_grads) {
                if p == usize::MAX {
                    continue;
                }
                let Some(pg) = pg else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf, if it influenced the root.
    pub fn wrt(&self, v: &Var<'_>) -> Option<&Tensor> {
        v.id.and_then(|id| self.grads.get(id)).and_then(Option::as_ref)
    }

    /// Gradients keyed by parameter name. A parameter registered more than
    /// once has its contributions summed. Parameters that did not influence
    /// the root map to zeros.
    pub fn into_param_map(mut self) -> HashMap<String, Tensor> {
        let mut out: HashMap<String, Tensor> = HashMap::new();
        for (name, id) in std::mem::take(&mut self.params) {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            match out.get_mut(&name) {
                Some(acc) => {
                    acc.add_assign(&g).expect("same parameter, same shape");
                }
                None => {
                    out.insert(name, g);
                }
            }
        }
        out
    }
}

/// A tensor value tracked by a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Shared handle to the value, for capture inside backward closures.
    pub fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        Var {
            tape: self.tape,
            id: None,
            value: Rc::clone(&self.value),
        }
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}
