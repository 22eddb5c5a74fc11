//! Dense f64 tensors with reverse-mode differentiation.
//!
//! The engine is define-by-run: every operation allocates a new node holding
//! its output values, handles to its parents, and a closure that propagates
//! the output gradient back to them. Calling [`Tensor::backward`] on a scalar
//! walks the recorded graph in reverse creation order (which is a valid
//! topological order) and accumulates gradients into leaf tensors.
//!
//! Gradient semantics follow the usual convention: intermediate gradients are
//! recomputed per backward pass, leaf gradients accumulate until explicitly
//! cleared. All reductions run in a fixed serial order, so two runs with the
//! same inputs produce bit-identical results.
//!
//! Graphs are single-threaded by construction (`Rc` interior), matching the
//! one-session-per-thread concurrency model. Tensors without graph
//! attachment are plain value buffers and can be cloned across sessions.

mod adam;
mod checkpoint;
mod ops;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_params, save_params, CHECKPOINT_VERSION};
pub use ops::BnMode;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackwardFn = Box<dyn Fn(&[f64])>;

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle to one node of the computation graph.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// A leaf tensor that does not track gradients.
    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::new_inner(shape.to_vec(), data, false, vec![], None))
    }

    /// A leaf tensor that accumulates gradients (a parameter).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_data(shape, data)?;
        // Rc has a single owner here, so this rebuild is cheap and safe.
        Ok(Tensor::new_inner(
            t.inner.shape.clone(),
            t.inner.data.borrow().clone(),
            true,
            vec![],
            None,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_inner(shape.to_vec(), vec![0.0; n], false, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_inner(vec![1], vec![v], false, vec![], None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        if requires_grad {
            Tensor::new_inner(shape, data, true, parents, Some(backward))
        } else {
            Tensor::new_inner(shape, data, false, vec![], None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.parents.is_empty()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Overwrite the value buffer (leaves only; used by the optimizer and
    /// by batch-norm running statistics).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Shape("set_data length mismatch".into()));
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// A new leaf sharing this tensor's current values but cut off from the
    /// graph. Gradients do not flow through a detached tensor.
    pub fn detach(&self) -> Tensor {
        Tensor::new_inner(
            self.inner.shape.clone(),
            self.inner.data.borrow().clone(),
            false,
            vec![],
            None,
        )
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar loss. Populates `grad` on every leaf
    /// tensor (parameter) reachable through recorded operations. Repeated
    /// calls accumulate into leaf gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            // Loss detached from every parameter: nothing to do, grads stay
            // as they are (zero contribution).
            return Ok(());
        }

        // Collect the reachable grad-relevant subgraph.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut order: Vec<Tensor> = Vec::new();
        let mut stack: Vec<Tensor> = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                if p.inner.requires_grad {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
        // Reverse creation order is a topological order: parents always
        // precede children.
        order.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        // Fresh pass for intermediates; leaves keep accumulating.
        for t in &order {
            if !t.is_leaf() {
                *t.inner.grad.borrow_mut() = None;
            }
        }
        self.accumulate_grad(&[1.0]);

        for t in &order {
            if let Some(bwd) = &t.inner.backward {
                let g = t.inner.grad.borrow().clone();
                if let Some(g) = g {
                    bwd(&g);
                }
            }
        }
        Ok(())
    }
}

/// Named collection of parameter tensors for one network: weights, biases,
/// batch-norm scale/shift and running statistics. Iteration order is the
/// lexicographic name order, which keeps every pass deterministic.
#[derive(Default)]
pub struct ParamSet {
    entries: std::collections::BTreeMap<String, ParamEntry>,
}

pub struct ParamEntry {
    pub tensor: Tensor,
    /// Running statistics are carried here too but are not optimized.
    pub trainable: bool,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        debug_assert!(!trainable || tensor.requires_grad());
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn zero_grads(&self) {
        for (_, e) in self.entries.iter() {
            e.tensor.zero_grad();
        }
    }

    /// Total parameter count (trainable entries only).
    pub fn trainable_len(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Deep copy: fresh leaf tensors with the same values and flags.
    pub fn deep_clone(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, e) in self.entries.iter() {
            let t = if e.tensor.requires_grad() {
                Tensor::param(e.tensor.shape(), e.tensor.to_vec()).unwrap()
            } else {
                Tensor::from_data(e.tensor.shape(), e.tensor.to_vec()).unwrap()
            };
            out.insert(name, t, e.trainable);
        }
        out
    }

    /// L2 norm over all trainable gradients; missing gradients count as zero.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for (_, t) in self.trainable() {
            if let Some(g) = t.inner.grad.borrow().as_ref() {
                for v in g {
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }

    /// True if every parameter value is finite.
    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.tensor.data().iter().all(|v| v.is_finite()))
    }

    /// Byte-level fingerprint of all values, for determinism checks.
    pub fn fingerprint(&self) -> Vec<u8> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, e) in self.entries.iter() {
            h.update(name.as_bytes());
            for v in e.tensor.data().iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_params_has_unit_grads() {
        let p = Tensor::param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let loss = p.sum_all();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0; 6]);
        // Repeated backward accumulates.
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![2.0; 6]);
    }

    #[test]
    fn detached_loss_leaves_grads_empty() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = p.detach().sum_all();
        loss.backward().unwrap();
        assert!(p.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = p.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Shape(_))));
    }

    #[test]
    fn from_data_validates_length() {
        assert!(Tensor::from_data(&[2, 2], vec![1.0]).is_err());
    }
}
