//! Parameterized layers: dense, 3-layer MLP, and a GRU cell.
//!
//! Layers own parameter ids, not tensors; applying a layer requires the
//! lease that carried its parameters onto the current tape. Initialization
//! draws are made in field declaration order so a seed pins every weight.

use crate::numerics::params::{Lease, ParamId, ParamSet};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use rand::Rng;

fn uniform_tensor<R: Rng>(rng: &mut R, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Fully-connected layer with fan-in uniform initialization (±√(1/in_dim)
/// for both weight and bias).
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Dense {
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = params.add(
            &format!("{name}.w"),
            Tensor::matrix(out_dim, in_dim, uniform_tensor(rng, out_dim * in_dim, bound)),
        );
        let b = params.add(
            &format!("{name}.b"),
            Tensor::vector(uniform_tensor(rng, out_dim, bound)),
        );
        Dense { w, b, in_dim, out_dim }
    }

    pub fn apply(&self, tape: &mut Tape, lease: &Lease, x: Var) -> Var {
        tape.linear(lease.var(self.w), x, lease.var(self.b))
    }
}

/// Three dense layers with swish between them; the output layer is linear
/// (callers add sigmoid where the architecture asks for it).
pub struct Mlp3 {
    pub l1: Dense,
    pub l2: Dense,
    pub l3: Dense,
}

impl Mlp3 {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Mlp3 {
        Mlp3 {
            l1: Dense::new(params, &format!("{name}.l1"), in_dim, hidden, rng),
            l2: Dense::new(params, &format!("{name}.l2"), hidden, hidden, rng),
            l3: Dense::new(params, &format!("{name}.l3"), hidden, out_dim, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, lease: &Lease, x: Var) -> Var {
        let h1 = self.l1.apply(tape, lease, x);
        let a1 = tape.swish(h1);
        let h2 = self.l2.apply(tape, lease, a1);
        let a2 = tape.swish(h2);
        self.l3.apply(tape, lease, a2)
    }
}

/// GRU cell, gate convention:
///   r = σ(W_ir·x + b_ir + W_hr·h + b_hr)
///   z = σ(W_iz·x + b_iz + W_hz·h + b_hz)
///   n = tanh(W_in·x + b_in + r ⊙ (W_hn·h + b_hn))
///   h' = (1 − z) ⊙ n + z ⊙ h
/// Weights get fan-in uniform init; all biases start at zero.
pub struct Gru {
    w_ir: ParamId,
    w_hr: ParamId,
    b_ir: ParamId,
    b_hr: ParamId,
    w_iz: ParamId,
    w_hz: ParamId,
    b_iz: ParamId,
    b_hz: ParamId,
    w_in: ParamId,
    w_hn: ParamId,
    b_in: ParamId,
    b_hn: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Gru {
        let ib = (1.0 / in_dim as f64).sqrt();
        let hb = (1.0 / hidden as f64).sqrt();
        let mat = |params: &mut ParamSet, field: &str, rows: usize, cols: usize, bound: f64, rng: &mut R| {
            params.add(
                &format!("{name}.{field}"),
                Tensor::matrix(rows, cols, uniform_tensor(rng, rows * cols, bound)),
            )
        };
        let w_ir = mat(params, "w_ir", hidden, in_dim, ib, rng);
        let w_hr = mat(params, "w_hr", hidden, hidden, hb, rng);
        let w_iz = mat(params, "w_iz", hidden, in_dim, ib, rng);
        let w_hz = mat(params, "w_hz", hidden, hidden, hb, rng);
        let w_in = mat(params, "w_in", hidden, in_dim, ib, rng);
        let w_hn = mat(params, "w_hn", hidden, hidden, hb, rng);
        let zeros = |params: &mut ParamSet, field: &str| {
            params.add(&format!("{name}.{field}"), Tensor::zeros(vec![hidden]))
        };
        let b_ir = zeros(params, "b_ir");
        let b_hr = zeros(params, "b_hr");
        let b_iz = zeros(params, "b_iz");
        let b_hz = zeros(params, "b_hz");
        let b_in = zeros(params, "b_in");
        let b_hn = zeros(params, "b_hn");
        Gru {
            w_ir, w_hr, b_ir, b_hr,
            w_iz, w_hz, b_iz, b_hz,
            w_in, w_hn, b_in, b_hn,
            in_dim, hidden,
        }
    }

    pub fn apply(&self, tape: &mut Tape, lease: &Lease, x: Var, h_prev: Var) -> Var {
        assert_eq!(tape.value(x).len(), self.in_dim, "gru: input dimension mismatch");
        assert_eq!(tape.value(h_prev).len(), self.hidden, "gru: hidden dimension mismatch");
        let ri = tape.linear(lease.var(self.w_ir), x, lease.var(self.b_ir));
        let rh = tape.linear(lease.var(self.w_hr), h_prev, lease.var(self.b_hr));
        let r_pre = tape.add(ri, rh);
        let r = tape.sigmoid(r_pre);
        let zi = tape.linear(lease.var(self.w_iz), x, lease.var(self.b_iz));
        let zh = tape.linear(lease.var(self.w_hz), h_prev, lease.var(self.b_hz));
        let z_pre = tape.add(zi, zh);
        let z = tape.sigmoid(z_pre);
        let ni = tape.linear(lease.var(self.w_in), x, lease.var(self.b_in));
        let nh = tape.linear(lease.var(self.w_hn), h_prev, lease.var(self.b_hn));
        let gated = tape.mul(r, nh);
        let n_pre = tape.add(ni, gated);
        let n = tape.tanh(n_pre);
        // (1 − z)⊙n + z⊙h  ==  n + z⊙(h − n)
        let diff = tape.sub(h_prev, n);
        let carry = tape.mul(z, diff);
        tape.add(n, carry)
    }

    /// Update-gate bias pair, exposed so tests can saturate the gate.
    pub fn update_gate_biases(&self) -> (ParamId, ParamId) {
        (self.b_iz, self.b_hz)
    }
}
