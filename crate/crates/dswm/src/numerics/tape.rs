//! Reverse-mode gradient tape.
//!
//! The tape is an append-only arena: every operation evaluates eagerly,
//! records its result, and returns a [`Var`] handle. Because handles can only
//! refer to earlier nodes, the arena order is already a topological order and
//! the backward pass is a single reverse sweep.
//!
//! Values and gradients live in separate field-level arenas so the backward
//! sweep can read parent values while accumulating parent gradients.

use crate::numerics::kernels;

/// Norm threshold below which cosine similarity degrades to 0 with zero
/// gradient (the zeroed-reward-vector convention).
pub const COSINE_NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op {
    Leaf,
    /// weight (m*n, row-major) times input (n) plus bias (m).
    Linear { w: Var, x: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Swish { x: Var },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Softmax { x: Var },
    /// softmax((x + noise)/t); the noise is a constant, so backward only
    /// differs from plain softmax by the 1/t factor.
    GumbelSoftmax { x: Var, t: f64 },
    Mse { a: Var, b: Var },
    /// Unnormalized squared distance ‖a − b‖².
    SquaredError { a: Var, b: Var },
    /// KL(softmax(p) || softmax(q)); log-probabilities saved at forward time.
    CategoricalKl { p: Var, q: Var, lp: Vec<f64>, lq: Vec<f64> },
    Entropy { x: Var, lp: Vec<f64> },
    /// Norms saved at forward time; both zero signals the degraded case.
    Cosine { a: Var, b: Var, na: f64, nb: f64 },
    /// Weighted sum of value vectors: out = sum_k weights[k] * values[k].
    Mix { weights: Var, vals: Vec<Var> },
    AddN { parts: Vec<Var> },
}

/// Append-only reverse-mode tape over dense f64 vectors.
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.idx()]
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "item() on node of length {}", val.len());
        val[0]
    }

    /// Gradient accumulated into a node by the last `backward` call.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.idx()]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        assert!(self.ops.len() < u32::MAX as usize, "tape overflow");
        let id = Var(self.ops.len() as u32);
        self.grads.push(vec![0.0; value.len()]);
        self.values.push(value);
        self.ops.push(op);
        id
    }

    /// New input node. Gradients flow into every leaf; callers read back only
    /// the ones they care about.
    pub fn leaf(&mut self, data: Vec<f64>) -> Var {
        assert!(!data.is_empty(), "empty leaf");
        self.push(Op::Leaf, data)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, vec![v])
    }

    /// weight·x + bias, with `w` a row-major (bias.len × x.len) matrix.
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Var {
        let n = self.values[x.idx()].len();
        let m = self.values[b.idx()].len();
        assert_eq!(self.values[w.idx()].len(), m * n, "linear: weight shape mismatch");
        let mut out = vec![0.0; m];
        kernels::matvec(&self.values[w.idx()], m, n, &self.values[x.idx()], &mut out);
        for (o, bv) in out.iter_mut().zip(&self.values[b.idx()]) {
            *o += *bv;
        }
        self.push(Op::Linear { w, x, b }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.idx()], &self.values[b.idx()]);
        assert_eq!(av.len(), bv.len(), "add: length mismatch");
        let out = av.iter().zip(bv).map(|(x, y)| x + y).collect();
        self.push(Op::Add { a, b }, out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.idx()], &self.values[b.idx()]);
        assert_eq!(av.len(), bv.len(), "sub: length mismatch");
        let out = av.iter().zip(bv).map(|(x, y)| x - y).collect();
        self.push(Op::Sub { a, b }, out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.idx()], &self.values[b.idx()]);
        assert_eq!(av.len(), bv.len(), "mul: length mismatch");
        let out = av.iter().zip(bv).map(|(x, y)| x * y).collect();
        self.push(Op::Mul { a, b }, out)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.values[x.idx()].iter().map(|v| v * c).collect();
        self.push(Op::Scale { x, c }, out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.values[x.idx()].iter().map(|&v| kernels::sigmoid(v)).collect();
        self.push(Op::Sigmoid { x }, out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.values[x.idx()].iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh { x }, out)
    }

    /// x · sigmoid(x), elementwise.
    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.values[x.idx()].iter().map(|&v| v * kernels::sigmoid(v)).collect();
        self.push(Op::Swish { x }, out)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no parts");
        let total: usize = parts.iter().map(|p| self.values[p.idx()].len()).sum();
        let mut out = Vec::with_capacity(total);
        for p in parts {
            out.extend_from_slice(&self.values[p.idx()]);
        }
        self.push(Op::Concat { parts: parts.to_vec() }, out)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.values[x.idx()];
        assert!(start + len <= xv.len(), "slice out of bounds");
        let out = xv[start..start + len].to_vec();
        self.push(Op::Slice { x, start }, out)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = vec![0.0; self.values[x.idx()].len()];
        kernels::softmax(&self.values[x.idx()], &mut out);
        self.push(Op::Softmax { x }, out)
    }

    /// softmax((logits + noise)/temperature). The caller supplies the Gumbel
    /// draws so all randomness stays under its seed discipline.
    pub fn gumbel_softmax(&mut self, x: Var, noise: &[f64], temperature: f64) -> Var {
        assert!(temperature > 0.0, "gumbel_softmax: temperature must be positive");
        let xv = &self.values[x.idx()];
        assert_eq!(xv.len(), noise.len(), "gumbel_softmax: noise length mismatch");
        let shifted: Vec<f64> =
            xv.iter().zip(noise).map(|(l, g)| (l + g) / temperature).collect();
        let mut out = vec![0.0; shifted.len()];
        kernels::softmax(&shifted, &mut out);
        self.push(Op::GumbelSoftmax { x, t: temperature }, out)
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.idx()], &self.values[b.idx()]);
        assert_eq!(av.len(), bv.len(), "mse: length mismatch");
        let mut s = 0.0;
        for (x, y) in av.iter().zip(bv) {
            let d = x - y;
            s += d * d;
        }
        let v = s / av.len() as f64;
        self.push(Op::Mse { a, b }, vec![v])
    }

    /// Sum of squared elementwise differences: ‖a − b‖².
    pub fn squared_error(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.idx()], &self.values[b.idx()]);
        assert_eq!(av.len(), bv.len(), "squared_error: length mismatch");
        let mut s = 0.0;
        for (x, y) in av.iter().zip(bv) {
            let d = x - y;
            s += d * d;
        }
        self.push(Op::SquaredError { a, b }, vec![s])
    }

    /// KL(softmax(p_logits) || softmax(q_logits)).
    pub fn categorical_kl(&mut self, p_logits: Var, q_logits: Var) -> Var {
        let (pv, qv) = (&self.values[p_logits.idx()], &self.values[q_logits.idx()]);
        assert_eq!(pv.len(), qv.len(), "categorical_kl: length mismatch");
        let mut lp = vec![0.0; pv.len()];
        let mut lq = vec![0.0; qv.len()];
        kernels::log_softmax(pv, &mut lp);
        kernels::log_softmax(qv, &mut lq);
        let mut kl = 0.0;
        for j in 0..lp.len() {
            kl += lp[j].exp() * (lp[j] - lq[j]);
        }
        self.push(Op::CategoricalKl { p: p_logits, q: q_logits, lp, lq }, vec![kl])
    }

    /// Shannon entropy of softmax(logits), in nats.
    pub fn entropy(&mut self, logits: Var) -> Var {
        let xv = &self.values[logits.idx()];
        let mut lp = vec![0.0; xv.len()];
        kernels::log_softmax(xv, &mut lp);
        let mut h = 0.0;
        for &l in &lp {
            h -= l.exp() * l;
        }
        self.push(Op::Entropy { x: logits, lp }, vec![h])
    }

    /// Cosine similarity a·b / (‖a‖‖b‖). Either norm below
    /// [`COSINE_NORM_EPS`] degrades to value 0 with zero gradient.
    ///
    /// The accumulations run in plain index order; the memory-read contract
    /// depends on this op being reproducible expression-for-expression.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.idx()], &self.values[b.idx()]);
        assert_eq!(av.len(), bv.len(), "cosine: length mismatch");
        let mut num = 0.0;
        let mut na2 = 0.0;
        let mut nb2 = 0.0;
        for j in 0..av.len() {
            num += av[j] * bv[j];
            na2 += av[j] * av[j];
            nb2 += bv[j] * bv[j];
        }
        let na = na2.sqrt();
        let nb = nb2.sqrt();
        if na < COSINE_NORM_EPS || nb < COSINE_NORM_EPS {
            return self.push(Op::Cosine { a, b, na: 0.0, nb: 0.0 }, vec![0.0]);
        }
        let c = num / (na * nb);
        self.push(Op::Cosine { a, b, na, nb }, vec![c])
    }

    /// Weighted sum of equally-sized vectors: Σ_k weights[k]·vals[k].
    /// Accumulates in the order given, which callers treat as significant.
    pub fn mix(&mut self, weights: Var, vals: &[Var]) -> Var {
        let k = self.values[weights.idx()].len();
        assert_eq!(k, vals.len(), "mix: weight/value count mismatch");
        assert!(k > 0, "mix: empty");
        let d = self.values[vals[0].idx()].len();
        let mut out = vec![0.0; d];
        for (kk, v) in vals.iter().enumerate() {
            let vv = &self.values[v.idx()];
            assert_eq!(vv.len(), d, "mix: value length mismatch");
            let w = self.values[weights.idx()][kk];
            for j in 0..d {
                out[j] += w * vv[j];
            }
        }
        self.push(Op::Mix { weights, vals: vals.to_vec() }, out)
    }

    /// Elementwise sum of same-shape nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n: no parts");
        let d = self.values[parts[0].idx()].len();
        let mut out = vec![0.0; d];
        for p in parts {
            let pv = &self.values[p.idx()];
            assert_eq!(pv.len(), d, "add_n: length mismatch");
            for j in 0..d {
                out[j] += pv[j];
            }
        }
        self.push(Op::AddN { parts: parts.to_vec() }, out)
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively into
    /// every node; call once per tape.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.values[root.idx()].len(), 1, "backward root must be scalar");
        self.grads[root.idx()][0] = 1.0;
        for i in (0..self.ops.len()).rev() {
            let (gl, gr) = self.grads.split_at_mut(i);
            let g: &[f64] = &gr[0];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let values = &self.values;
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Linear { w, x, b } => {
                    let xv = &values[x.idx()];
                    let wv = &values[w.idx()];
                    let (m, n) = (g.len(), xv.len());
                    kernels::outer_accum(g, xv, &mut gl[w.idx()]);
                    kernels::matvec_transpose_accum(wv, m, n, g, &mut gl[x.idx()]);
                    kernels::axpy(1.0, g, &mut gl[b.idx()]);
                }
                Op::Add { a, b } => {
                    kernels::axpy(1.0, g, &mut gl[a.idx()]);
                    kernels::axpy(1.0, g, &mut gl[b.idx()]);
                }
                Op::Sub { a, b } => {
                    kernels::axpy(1.0, g, &mut gl[a.idx()]);
                    kernels::axpy(-1.0, g, &mut gl[b.idx()]);
                }
                Op::Mul { a, b } => {
                    let bv = &values[b.idx()];
                    {
                        let ga = &mut gl[a.idx()];
                        for j in 0..g.len() {
                            ga[j] += g[j] * bv[j];
                        }
                    }
                    let av = &values[a.idx()];
                    let gb = &mut gl[b.idx()];
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
                Op::Scale { x, c } => {
                    kernels::axpy(*c, g, &mut gl[x.idx()]);
                }
                Op::Sigmoid { x } => {
                    let y = &values[i];
                    let gx = &mut gl[x.idx()];
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
                Op::Tanh { x } => {
                    let y = &values[i];
                    let gx = &mut gl[x.idx()];
                    for j in 0..g.len() {
                        gx[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                }
                Op::Swish { x } => {
                    let xv = &values[x.idx()];
                    let gx = &mut gl[x.idx()];
                    for j in 0..g.len() {
                        let s = kernels::sigmoid(xv[j]);
                        gx[j] += g[j] * s * (1.0 + xv[j] * (1.0 - s));
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let len = values[p.idx()].len();
                        let gp = &mut gl[p.idx()];
                        for j in 0..len {
                            gp[j] += g[off + j];
                        }
                        off += len;
                    }
                }
                Op::Slice { x, start } => {
                    let gx = &mut gl[x.idx()];
                    for j in 0..g.len() {
                        gx[start + j] += g[j];
                    }
                }
                Op::Softmax { x } => {
                    let y = &values[i];
                    let mut gy = 0.0;
                    for j in 0..g.len() {
                        gy += g[j] * y[j];
                    }
                    let gx = &mut gl[x.idx()];
                    for j in 0..g.len() {
                        gx[j] += y[j] * (g[j] - gy);
                    }
                }
                Op::GumbelSoftmax { x, t } => {
                    let y = &values[i];
                    let mut gy = 0.0;
                    for j in 0..g.len() {
                        gy += g[j] * y[j];
                    }
                    let gx = &mut gl[x.idx()];
                    for j in 0..g.len() {
                        gx[j] += y[j] * (g[j] - gy) / t;
                    }
                }
                Op::Mse { a, b } => {
                    let (av, bv) = (&values[a.idx()], &values[b.idx()]);
                    let c = g[0] * 2.0 / av.len() as f64;
                    {
                        let ga = &mut gl[a.idx()];
                        for j in 0..av.len() {
                            ga[j] += c * (av[j] - bv[j]);
                        }
                    }
                    let gb = &mut gl[b.idx()];
                    for j in 0..av.len() {
                        gb[j] -= c * (av[j] - bv[j]);
                    }
                }
                Op::SquaredError { a, b } => {
                    let (av, bv) = (&values[a.idx()], &values[b.idx()]);
                    let c = g[0] * 2.0;
                    {
                        let ga = &mut gl[a.idx()];
                        for j in 0..av.len() {
                            ga[j] += c * (av[j] - bv[j]);
                        }
                    }
                    let gb = &mut gl[b.idx()];
                    for j in 0..av.len() {
                        gb[j] -= c * (av[j] - bv[j]);
                    }
                }
                Op::CategoricalKl { p, q, lp, lq } => {
                    let kl = self.values[i][0];
                    let g0 = g[0];
                    {
                        let gp = &mut gl[p.idx()];
                        for j in 0..lp.len() {
                            gp[j] += g0 * lp[j].exp() * ((lp[j] - lq[j]) - kl);
                        }
                    }
                    let gq = &mut gl[q.idx()];
                    for j in 0..lq.len() {
                        gq[j] += g0 * (lq[j].exp() - lp[j].exp());
                    }
                }
                Op::Entropy { x, lp } => {
                    let h = self.values[i][0];
                    let g0 = g[0];
                    let gx = &mut gl[x.idx()];
                    for j in 0..lp.len() {
                        gx[j] -= g0 * lp[j].exp() * (lp[j] + h);
                    }
                }
                Op::Cosine { a, b, na, nb } => {
                    if *na == 0.0 || *nb == 0.0 {
                        continue; // degraded case: zero gradient by convention
                    }
                    let c = self.values[i][0];
                    let g0 = g[0];
                    let (av, bv) = (&values[a.idx()], &values[b.idx()]);
                    let inv = 1.0 / (na * nb);
                    {
                        let ga = &mut gl[a.idx()];
                        for j in 0..av.len() {
                            ga[j] += g0 * (bv[j] * inv - c * av[j] / (na * na));
                        }
                    }
                    let gb = &mut gl[b.idx()];
                    for j in 0..bv.len() {
                        gb[j] += g0 * (av[j] * inv - c * bv[j] / (nb * nb));
                    }
                }
                Op::Mix { weights, vals } => {
                    let wv = &values[weights.idx()];
                    {
                        let gw = &mut gl[weights.idx()];
                        for (kk, v) in vals.iter().enumerate() {
                            let vv = &values[v.idx()];
                            let mut s = 0.0;
                            for j in 0..g.len() {
                                s += g[j] * vv[j];
                            }
                            gw[kk] += s;
                        }
                    }
                    for (kk, v) in vals.iter().enumerate() {
                        kernels::axpy(wv[kk], g, &mut gl[v.idx()]);
                    }
                }
                Op::AddN { parts } => {
                    for p in parts {
                        kernels::axpy(1.0, g, &mut gl[p.idx()]);
                    }
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Standard Gumbel(0,1) draws: −ln(−ln(u)), u uniform on (0,1).
pub fn gumbel_noise<R: rand::Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect()
}
