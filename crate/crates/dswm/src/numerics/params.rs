//! Named parameter storage, decoupled from any single tape.
//!
//! Parameters persist across training iterations while tapes are rebuilt per
//! iteration. `lease_all` copies every parameter onto a fresh tape as leaves;
//! after backward, `collect_grads` reads the leaf gradients back out in
//! parameter order.

use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Stable index of a parameter within its [`ParamSet`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(usize);

pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Iterate (name, tensor) in insertion order — the canonical checkpoint
    /// order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Overwrite a parameter's values (shape must match). Used by checkpoint
    /// restore.
    pub fn restore(&mut self, name: &str, values: &[f64]) -> bool {
        for (i, n) in self.names.iter().enumerate() {
            if n == name {
                assert_eq!(
                    self.tensors[i].len(),
                    values.len(),
                    "restore {name:?}: length mismatch"
                );
                self.tensors[i].data_mut().copy_from_slice(values);
                return true;
            }
        }
        false
    }

    /// Copy every parameter onto `tape` as a leaf, in insertion order.
    pub fn lease_all(&self, tape: &mut Tape) -> Lease {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.data().to_vec()))
            .collect();
        Lease { vars }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// The tape-side handles for one `lease_all` call.
pub struct Lease {
    vars: Vec<Var>,
}

impl Lease {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Read back the gradient of every leased parameter, in parameter order.
    pub fn collect_grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars.iter().map(|&v| tape.grad(v).to_vec()).collect()
    }

    /// Accumulate this lease's gradients into running buffers (used when a
    /// batch is summed over several tapes or episodes).
    pub fn accumulate_grads(&self, tape: &Tape, into: &mut [Vec<f64>]) {
        assert_eq!(into.len(), self.vars.len());
        for (buf, &v) in into.iter_mut().zip(&self.vars) {
            let g = tape.grad(v);
            assert_eq!(buf.len(), g.len());
            for (b, gv) in buf.iter_mut().zip(g) {
                *b += gv;
            }
        }
    }
}

/// Zeroed gradient buffers matching a parameter set, for cross-tape
/// accumulation.
pub fn zero_grads(params: &ParamSet) -> Vec<Vec<f64>> {
    params.ids().map(|id| vec![0.0; params.tensor(id).len()]).collect()
}
