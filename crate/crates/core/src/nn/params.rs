//! Parameter storage shared by all networks.
//!
//! A [`ParamSet`] owns named tensors (trainable parameters and non-trainable
//! buffers such as batch-norm statistics). A [`Session`] binds them onto a
//! fresh tape for one forward/backward pass; in eval mode parameters enter
//! the tape as constants so no gradients are tracked.

use std::collections::HashMap;

use crate::autodiff::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(pub(crate) usize);

pub(crate) struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Adam first/second moment accumulators, lazily allocated.
    pub moment1: Option<Vec<f64>>,
    pub moment2: Option<Vec<f64>>,
}

/// Named tensor store for one network.
#[derive(Default)]
pub struct ParamSet {
    pub(crate) entries: Vec<Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamRef {
        self.entries.push(Entry {
            name: name.into(),
            tensor,
            trainable: true,
            moment1: None,
            moment2: None,
        });
        ParamRef(self.entries.len() - 1)
    }

    /// Non-trainable state saved with the parameters (e.g. running stats).
    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamRef {
        self.entries.push(Entry {
            name: name.into(),
            tensor,
            trainable: false,
            moment1: None,
            moment2: None,
        });
        ParamRef(self.entries.len() - 1)
    }

    pub fn get(&self, r: ParamRef) -> &Tensor {
        &self.entries[r.0].tensor
    }

    pub fn set(&mut self, r: ParamRef, t: Tensor) {
        assert_eq!(self.entries[r.0].tensor.shape(), t.shape());
        self.entries[r.0].tensor = t;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor, e.trainable))
    }

    /// Replace tensors by name (checkpoint restore). Every entry must be
    /// present in `named` with a matching shape.
    pub fn load_named(&mut self, named: &HashMap<String, Tensor>) -> crate::error::Result<()> {
        for e in self.entries.iter_mut() {
            let t = named.get(&e.name).ok_or_else(|| {
                crate::CoreError::parse("params", format!("missing tensor `{}`", e.name))
            })?;
            if t.shape() != e.tensor.shape() {
                return Err(crate::CoreError::parse(
                    "params",
                    format!("tensor `{}` shape {:?} != expected {:?}", e.name, t.shape(), e.tensor.shape()),
                ));
            }
            e.tensor = t.clone();
        }
        Ok(())
    }

    /// SHA-256 over the canonical byte serialization of all tensors; used
    /// for freeze contracts.
    pub fn content_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// One forward/backward pass over a parameter set.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p mut ParamSet,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'p> Session<'p> {
    pub fn train(params: &'p mut ParamSet) -> Self {
        let n = params.len();
        Session { tape: Tape::new(), params, bound: vec![None; n], train: true }
    }

    pub fn eval(params: &'p mut ParamSet) -> Self {
        let n = params.len();
        Session { tape: Tape::new(), params, bound: vec![None; n], train: false }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Bind a parameter onto the tape (lazily, once per session).
    pub fn p(&mut self, r: ParamRef) -> Var {
        if let Some(v) = self.bound[r.0] {
            return v;
        }
        let tensor = self.params.entries[r.0].tensor.clone();
        let v = if self.train && self.params.entries[r.0].trainable {
            self.tape.param(tensor)
        } else {
            self.tape.constant(tensor)
        };
        self.bound[r.0] = Some(v);
        v
    }

    /// Raw (untaped) view of a parameter or buffer.
    pub fn raw(&self, r: ParamRef) -> &Tensor {
        &self.params.entries[r.0].tensor
    }

    /// Overwrite a buffer value mid-forward (running statistics).
    pub fn update_buffer(&mut self, r: ParamRef, t: Tensor) {
        assert!(!self.params.entries[r.0].trainable, "update_buffer on trainable param");
        self.params.set(r, t);
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Gradients of all bound trainable parameters, in param order.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamRef, Tensor)> {
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(v) = slot {
                if self.params.entries[i].trainable && self.train {
                    let shape = self.params.entries[i].tensor.shape().to_vec();
                    out.push((ParamRef(i), grads.get_or_zero(*v, &shape)));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_session_binds_constants() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::new(&[2], vec![1.0, 2.0]));
        let mut s = Session::eval(&mut ps);
        let v = s.p(w);
        let loss = s.tape.sum_all(v);
        let grads = s.tape.backward(loss);
        assert!(grads.get(v).is_none());
    }

    #[test]
    fn hash_changes_with_values() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::new(&[2], vec![1.0, 2.0]));
        let h1 = ps.content_hash();
        ps.set(w, Tensor::new(&[2], vec![1.0, 3.0]));
        assert_ne!(h1, ps.content_hash());
    }
}
