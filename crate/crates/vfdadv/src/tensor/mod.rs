//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a row-major buffer plus an optional gradient and, when it
//! was produced by an op with at least one grad-requiring input, a link back
//! to its parents and a closure that maps the output gradient to parent
//! gradients. Calling [`Tensor::backward`] on a scalar walks that graph in
//! reverse topological order, accumulates `d(loss)/d(tensor)` into every
//! grad-requiring tensor, and then detaches the visited nodes so the tape is
//! cleared.
//!
//! Graphs are confined to one thread (`Rc`-based); values move between
//! threads as plain `Vec<S>` after the tape is done with them.

pub mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maps the output gradient to one gradient buffer per parent.
/// An empty buffer means "no contribution for this parent".
type BackwardOp<S> = Box<dyn Fn(&[S]) -> Vec<Vec<S>>>;

struct Inner<S: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<S>>>,
    parents: RefCell<Vec<Tensor<S>>>,
    /// Per-parent grad routing, frozen at op-construction time so later
    /// `requires_grad` flips cannot resurrect pruned branches.
    parent_needs: RefCell<Vec<bool>>,
    backward_op: RefCell<Option<BackwardOp<S>>>,
}

/// Dense n-dimensional array participating in the gradient tape.
///
/// Cloning is cheap (reference-counted handle); two clones alias the same
/// storage and gradient.
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn leaf(data: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                parents: RefCell::new(Vec::new()),
                parent_needs: RefCell::new(Vec::new()),
                backward_op: RefCell::new(None),
            }),
        })
    }

    /// Constant leaf tensor (not tracked by the tape).
    pub fn new(data: Vec<S>, shape: Vec<usize>) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor that accumulates gradients (a parameter or attacked input).
    pub fn param(data: Vec<S>, shape: Vec<usize>) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(vec![S::zero(); numel], shape)
    }

    /// Scalar constant with shape `[1]`.
    pub fn scalar(v: S) -> Self {
        Self::new(vec![v], vec![1]).expect("scalar shape is valid")
    }

    /// Internal constructor for op outputs. Records parents and the backward
    /// closure only when some input requires grad.
    pub(crate) fn from_op(
        data: Vec<S>,
        shape: Vec<usize>,
        parents: Vec<Tensor<S>>,
        backward_op: BackwardOp<S>,
    ) -> Self {
        let tracked = parents.iter().any(|p| p.inner.requires_grad.get());
        let t = Self::leaf(data, shape, tracked).expect("op produced inconsistent shape");
        if tracked {
            *t.inner.parent_needs.borrow_mut() =
                parents.iter().map(|p| p.inner.requires_grad.get()).collect();
            *t.inner.parents.borrow_mut() = parents;
            *t.inner.backward_op.borrow_mut() = Some(backward_op);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Flip gradient tracking on a leaf. Used to freeze teacher parameters
    /// and to take models in and out of inference mode.
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    /// Overwrite the value buffer in place (same length required).
    pub fn set_data(&self, data: Vec<S>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Contract(format!(
                "set_data length {} does not match tensor numel {}",
                data.len(),
                self.numel()
            )));
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// New constant leaf holding a copy of this tensor's current value.
    pub fn detach(&self) -> Tensor<S> {
        Self::leaf(self.to_vec(), self.inner.shape.clone(), false)
            .expect("detach preserves a valid shape")
    }

    fn accumulate_grad(&self, contrib: &[S]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (g, c) in buf.iter_mut().zip(contrib) {
                    *g += *c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Writes `d(loss)/d(t)` into every grad-requiring tensor reachable from
    /// the loss, then detaches the visited subgraph (the tape is cleared).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.inner.shape
            )));
        }
        if !self.inner.requires_grad.get() {
            return Err(Error::Contract(
                "backward on a tensor with an empty tape (nothing requires grad)".into(),
            ));
        }

        // Post-order DFS; parents are visited before the node is emitted, so
        // the reversed order processes each node after all of its consumers.
        let mut topo: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<*const Inner<S>> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.inner));
        while let Some((node, idx)) = stack.pop() {
            let next = {
                let parents = node.inner.parents.borrow();
                parents.get(idx).cloned()
            };
            match next {
                Some(parent) => {
                    stack.push((node, idx + 1));
                    if visited.insert(Rc::as_ptr(&parent.inner)) {
                        stack.push((parent, 0));
                    }
                }
                None => topo.push(node),
            }
        }

        *self.inner.grad.borrow_mut() = Some(vec![S::one()]);
        for node in topo.iter().rev() {
            let op = node.inner.backward_op.borrow_mut().take();
            let parents = std::mem::take(&mut *node.inner.parents.borrow_mut());
            let needs = std::mem::take(&mut *node.inner.parent_needs.borrow_mut());
            let Some(op) = op else { continue };
            let Some(out_grad) = node.inner.grad.borrow().clone() else {
                continue;
            };
            let contribs = op(&out_grad);
            debug_assert_eq!(contribs.len(), parents.len());
            for ((parent, contrib), need) in parents.iter().zip(contribs.iter()).zip(needs) {
                if need && !contrib.is_empty() {
                    parent.accumulate_grad(contrib);
                }
            }
        }
        Ok(())
    }
}

/// Named parameter tensors with a stable iteration order.
pub struct ParameterSet<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
    frozen: bool,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        ParameterSet {
            entries: Vec::new(),
            frozen: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Permanently exclude this set from optimizer updates and gradient
    /// accumulation (the teacher role).
    pub fn freeze(&mut self) {
        self.frozen = true;
        for (_, t) in &self.entries {
            t.set_requires_grad(false);
        }
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Temporarily stops gradient flow into these parameters; flow resumes
    /// when the returned guard drops. Graphs built while paused never route
    /// gradients here, even if backward runs after the guard is gone.
    pub fn pause_grads(&self) -> GradPause<'_, S> {
        let saved: Vec<bool> = self.entries.iter().map(|(_, t)| t.requires_grad()).collect();
        for (_, t) in &self.entries {
            t.set_requires_grad(false);
        }
        GradPause { params: self, saved }
    }

    /// SHA-256 over names, shapes, and exact little-endian value bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.entries {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            let mut bytes = Vec::with_capacity(t.numel() * S::BYTES);
            for &v in t.data().iter() {
                v.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

impl<S: Scalar> Default for ParameterSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// RAII guard restoring parameter gradient tracking on drop.
pub struct GradPause<'a, S: Scalar> {
    params: &'a ParameterSet<S>,
    saved: Vec<bool>,
}

impl<S: Scalar> Drop for GradPause<'_, S> {
    fn drop(&mut self) {
        for ((_, t), &flag) in self.params.entries.iter().zip(&self.saved) {
            t.set_requires_grad(flag);
        }
    }
}

/// SGD hyperparameters. Classical momentum: `v <- m*v + (g + wd*p)`,
/// `p <- p - lr*v`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "momentum and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// SGD optimizer holding per-parameter velocity state.
pub struct Sgd<S: Scalar> {
    cfg: SgdConfig,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd {
            cfg,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// One update step. Requires populated gradients; zeroes them afterwards.
    pub fn step(&mut self, params: &ParameterSet<S>) -> Result<()> {
        if params.is_frozen() {
            return Err(Error::Contract(
                "sgd step on a frozen parameter set".into(),
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|(_, t)| vec![S::zero(); t.numel()])
                .collect();
        }
        let lr = S::from_f64(self.cfg.learning_rate);
        let mom = S::from_f64(self.cfg.momentum);
        let wd = S::from_f64(self.cfg.weight_decay);
        let use_momentum = self.cfg.momentum != 0.0;
        let use_wd = self.cfg.weight_decay != 0.0;

        for (idx, (name, t)) in params.iter().enumerate() {
            let grad = t.grad().ok_or_else(|| {
                Error::Contract(format!("sgd step with missing gradient for {name:?}"))
            })?;
            let mut data = t.inner.data.borrow_mut();
            let vel = &mut self.velocity[idx];
            for i in 0..data.len() {
                let mut g = grad[i];
                if use_wd {
                    g = g + wd * data[i];
                }
                let update = if use_momentum {
                    vel[i] = mom * vel[i] + g;
                    vel[i]
                } else {
                    g
                };
                data[i] = data[i] - lr * update;
            }
        }
        params.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::param(vec![1.0f64, -2.0, 3.0], vec![3]).unwrap();
        let loss = ops::sum(&x);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_dot_is_other_factor() {
        let w = Tensor::new(vec![2.0f64, -1.0, 0.5], vec![3]).unwrap();
        let x = Tensor::param(vec![1.0f64, 4.0, -3.0], vec![3]).unwrap();
        let loss = ops::sum(&ops::mul(&w, &x).unwrap());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -1.0, 0.5]);
        assert!(w.grad().is_none(), "constants accumulate no gradient");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![1.0f64, 2.0], vec![2]).unwrap();
        let y = ops::relu(&x);
        let err = y.backward().unwrap_err();
        assert_eq!(err.category(), "contract");
    }

    #[test]
    fn backward_clears_tape() {
        let x = Tensor::param(vec![2.0f64], vec![1]).unwrap();
        let y = ops::scale(&x, 3.0f64);
        y.backward().unwrap();
        assert!(y.inner.backward_op.borrow().is_none());
        assert!(y.inner.parents.borrow().is_empty());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = x*x via two consumers of x: d/dx = 2x
        let x = Tensor::param(vec![3.0f64], vec![1]).unwrap();
        let y = ops::mul(&x, &x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn sgd_plain_step() {
        let mut params = ParameterSet::new();
        let p = Tensor::param(vec![1.0f64], vec![1]).unwrap();
        params.insert("p", p.clone()).unwrap();
        p.accumulate_grad(&[0.5]);
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        })
        .unwrap();
        opt.step(&params).unwrap();
        assert_eq!(p.item(), 0.95);
        assert!(p.grad().is_none(), "gradients zeroed after step");
    }

    #[test]
    fn sgd_zero_grad_is_fixed_point() {
        let mut params = ParameterSet::new();
        let p = Tensor::param(vec![1.25f64], vec![1]).unwrap();
        params.insert("p", p.clone()).unwrap();
        p.accumulate_grad(&[0.0]);
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        })
        .unwrap();
        opt.step(&params).unwrap();
        assert_eq!(p.item(), 1.25);
    }

    #[test]
    fn sgd_contracts_quadratic() {
        // f(p) = (p-3)^2, grad = 2(p-3); 100 steps at lr 0.1 from p=0.
        let mut params = ParameterSet::new();
        let p = Tensor::param(vec![0.0f64], vec![1]).unwrap();
        params.insert("p", p.clone()).unwrap();
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        })
        .unwrap();
        for _ in 0..100 {
            let shifted = ops::add_scalar(&p, -3.0f64);
            let loss = ops::mul(&shifted, &shifted).unwrap();
            loss.backward().unwrap();
            opt.step(&params).unwrap();
        }
        assert!((p.item() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn sgd_rejects_frozen() {
        let mut params = ParameterSet::new();
        let p = Tensor::param(vec![1.0f64], vec![1]).unwrap();
        params.insert("p", p.clone()).unwrap();
        p.accumulate_grad(&[1.0]);
        params.freeze();
        let mut opt = Sgd::new(SgdConfig::default()).unwrap();
        let err = opt.step(&params).unwrap_err();
        assert_eq!(err.category(), "contract");
    }

    #[test]
    fn frozen_set_receives_no_gradients() {
        let mut params = ParameterSet::new();
        let w = Tensor::param(vec![2.0f64], vec![1]).unwrap();
        params.insert("w", w.clone()).unwrap();
        params.freeze();
        let before = params.checksum();
        let x = Tensor::param(vec![1.0f64], vec![1]).unwrap();
        let loss = ops::mul(&w, &x).unwrap();
        loss.backward().unwrap();
        assert!(w.grad().is_none());
        assert_eq!(params.checksum(), before);
    }

    #[test]
    fn paused_params_get_no_gradient_even_after_resume() {
        let mut params = ParameterSet::new();
        let w = Tensor::param(vec![2.0f64], vec![1]).unwrap();
        params.insert("w", w.clone()).unwrap();
        let x = Tensor::param(vec![3.0f64], vec![1]).unwrap();
        let loss = {
            let _pause = params.pause_grads();
            ops::mul(&w, &x).unwrap()
        };
        assert!(w.requires_grad(), "guard restored the flag");
        loss.backward().unwrap();
        assert!(w.grad().is_none(), "routing was frozen at graph build");
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut a = ParameterSet::new();
        a.insert("w", Tensor::param(vec![1.0f64, 2.0], vec![2]).unwrap())
            .unwrap();
        let c1 = a.checksum();
        a.get("w").unwrap().set_data(vec![1.0, 2.5]).unwrap();
        assert_ne!(a.checksum(), c1);
        a.get("w").unwrap().set_data(vec![1.0, 2.0]).unwrap();
        assert_eq!(a.checksum(), c1);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut params = ParameterSet::<f64>::new();
        params
            .insert("w", Tensor::param(vec![0.0], vec![1]).unwrap())
            .unwrap();
        assert!(params
            .insert("w", Tensor::param(vec![1.0], vec![1]).unwrap())
            .is_err());
    }
}
