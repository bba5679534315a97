//! Arena-based reverse-mode autodiff tape.
//!
//! Operations append nodes referencing earlier variables, so creation order
//! is already topological; `backward` walks it in reverse, accumulating
//! gradients. Gradients persist across backward calls until `zero_grads`.

use super::tensor::Tensor;
use super::KernelError;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Concat(Var, Var),
    Embed { table: Var, id: usize },
    SoftmaxCe { logits: Var, target: usize },
    AddMany(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-softmax, used by scorers and decoders.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    xs.iter().map(|x| x - lse).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Var {
        let len = value.len();
        self.nodes.push(Node { op, shape, value });
        self.grads.push(vec![0.0; len]);
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf holding a copy of the tensor's data.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> KernelError {
        KernelError::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    /// Matrix product: [m,k]x[k,n] -> [m,n], or matrix-vector [m,k]x[k] -> [m].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ashape, bshape) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        match (ashape.as_slice(), bshape.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let (m, k, n) = (m, k, n);
                let mut out = vec![0.0; m * n];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                for i in 0..m {
                    for kk in 0..k {
                        let aik = av[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        let brow = &bv[kk * n..(kk + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += aik * brow[j];
                        }
                    }
                }
                Ok(self.push(Op::Matmul(a, b), vec![m, n], out))
            }
            (&[m, k], &[k2]) if k == k2 => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let row = &av[i * k..(i + 1) * k];
                    out[i] = row.iter().zip(bv).map(|(x, y)| x * y).sum();
                }
                Ok(self.push(Op::Matmul(a, b), vec![m], out))
            }
            _ => Err(self.mismatch("matmul", a, b)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch("add", a, b));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), value))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch("hadamard", a, b));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Hadamard(a, b), self.nodes[a.0].shape.clone(), value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), self.nodes[a.0].shape.clone(), value)
    }

    /// Elementwise 1 - x (the GRU update-gate complement).
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| 1.0 - x).collect();
        self.push(Op::OneMinus(a), self.nodes[a.0].shape.clone(), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), self.nodes[a.0].shape.clone(), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| stable_sigmoid(x))
            .collect();
        self.push(Op::Sigmoid(a), self.nodes[a.0].shape.clone(), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(a), self.nodes[a.0].shape.clone(), value)
    }

    /// Concatenate two vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ashape, bshape) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ashape.len() != 1 || bshape.len() != 1 {
            return Err(self.mismatch("concat", a, b));
        }
        let mut value = self.nodes[a.0].value.clone();
        value.extend_from_slice(&self.nodes[b.0].value);
        let n = value.len();
        Ok(self.push(Op::Concat(a, b), vec![n], value))
    }

    /// Row lookup into an embedding table [V, d] -> [d].
    pub fn embed(&mut self, table: Var, id: usize) -> Result<Var, KernelError> {
        let shape = &self.nodes[table.0].shape;
        if shape.len() != 2 {
            return Err(KernelError::ShapeMismatch {
                op: "embed",
                lhs: shape.clone(),
                rhs: vec![],
            });
        }
        let (v, d) = (shape[0], shape[1]);
        if id >= v {
            return Err(KernelError::OutOfRange {
                what: "embedding row",
                index: id,
                size: v,
            });
        }
        let value = self.nodes[table.0].value[id * d..(id + 1) * d].to_vec();
        Ok(self.push(Op::Embed { table, id }, vec![d], value))
    }

    /// Softmax cross-entropy of a logit vector against one target class,
    /// returning the scalar loss -log softmax(logits)[target].
    pub fn softmax_ce(&mut self, logits: Var, target: usize) -> Result<Var, KernelError> {
        let shape = &self.nodes[logits.0].shape;
        if shape.len() != 1 {
            return Err(KernelError::ShapeMismatch {
                op: "softmax_ce",
                lhs: shape.clone(),
                rhs: vec![],
            });
        }
        let n = shape[0];
        if target >= n {
            return Err(KernelError::OutOfRange {
                what: "target class",
                index: target,
                size: n,
            });
        }
        let xs = &self.nodes[logits.0].value;
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        let loss = lse - xs[target];
        Ok(self.push(Op::SoftmaxCe { logits, target }, vec![1], vec![loss]))
    }

    /// Sum of same-shaped variables.
    pub fn add_many(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let first = parts.first().ok_or(KernelError::ShapeMismatch {
            op: "add_many",
            lhs: vec![],
            rhs: vec![],
        })?;
        let shape = self.nodes[first.0].shape.clone();
        let mut value = vec![0.0; self.nodes[first.0].value.len()];
        for p in parts {
            if self.nodes[p.0].shape != shape {
                return Err(self.mismatch("add_many", *first, *p));
            }
            for (o, x) in value.iter_mut().zip(&self.nodes[p.0].value) {
                *o += x;
            }
        }
        Ok(self.push(Op::AddMany(parts.to_vec()), shape, value))
    }

    /// Accumulate analytic gradients of a scalar root into every node's
    /// gradient buffer. Calling twice without `zero_grads` doubles them.
    pub fn backward(&mut self, root: Var) -> Result<(), KernelError> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(KernelError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        let mut seed = vec![vec![]; self.nodes.len()];
        seed[root.0] = vec![1.0];
        for idx in (0..=root.0).rev() {
            let out = if seed[idx].is_empty() {
                continue;
            } else {
                std::mem::take(&mut seed[idx])
            };
            for (g, d) in self.grads[idx].iter_mut().zip(&out) {
                *g += d;
            }
            let bump = |slot: &mut Vec<f64>, len: usize, f: &mut dyn FnMut(&mut [f64])| {
                if slot.is_empty() {
                    *slot = vec![0.0; len];
                }
                f(slot);
            };
            match self.nodes[idx].op.clone() {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let ashape = self.nodes[a.0].shape.clone();
                    let bshape = self.nodes[b.0].shape.clone();
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if bshape.len() == 2 {
                        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
                        let (da, db) = {
                            let mut da = vec![0.0; m * k];
                            let mut db = vec![0.0; k * n];
                            for i in 0..m {
                                let drow = &out[i * n..(i + 1) * n];
                                for kk in 0..k {
                                    let brow = &bv[kk * n..(kk + 1) * n];
                                    da[i * k + kk] +=
                                        drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                                    let aik = av[i * k + kk];
                                    if aik != 0.0 {
                                        let dbrow = &mut db[kk * n..(kk + 1) * n];
                                        for j in 0..n {
                                            dbrow[j] += aik * drow[j];
                                        }
                                    }
                                }
                            }
                            (da, db)
                        };
                        bump(&mut seed[a.0], m * k, &mut |s| {
                            for (x, y) in s.iter_mut().zip(&da) {
                                *x += y;
                            }
                        });
                        bump(&mut seed[b.0], k * n, &mut |s| {
                            for (x, y) in s.iter_mut().zip(&db) {
                                *x += y;
                            }
                        });
                    } else {
                        let (m, k) = (ashape[0], ashape[1]);
                        let mut da = vec![0.0; m * k];
                        let mut db = vec![0.0; k];
                        for i in 0..m {
                            let d = out[i];
                            if d == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[i * k + kk] += d * bv[kk];
                                db[kk] += d * av[i * k + kk];
                            }
                        }
                        bump(&mut seed[a.0], m * k, &mut |s| {
                            for (x, y) in s.iter_mut().zip(&da) {
                                *x += y;
                            }
                        });
                        bump(&mut seed[b.0], k, &mut |s| {
                            for (x, y) in s.iter_mut().zip(&db) {
                                *x += y;
                            }
                        });
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        bump(&mut seed[v.0], out.len(), &mut |s| {
                            for (x, y) in s.iter_mut().zip(&out) {
                                *x += y;
                            }
                        });
                    }
                }
                Op::Hadamard(a, b) => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    bump(&mut seed[a.0], out.len(), &mut |s| {
                        for ((x, y), z) in s.iter_mut().zip(&out).zip(&bv) {
                            *x += y * z;
                        }
                    });
                    bump(&mut seed[b.0], out.len(), &mut |s| {
                        for ((x, y), z) in s.iter_mut().zip(&out).zip(&av) {
                            *x += y * z;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    bump(&mut seed[a.0], out.len(), &mut |s| {
                        for (x, y) in s.iter_mut().zip(&out) {
                            *x += y * c;
                        }
                    });
                }
                Op::OneMinus(a) => {
                    bump(&mut seed[a.0], out.len(), &mut |s| {
                        for (x, y) in s.iter_mut().zip(&out) {
                            *x -= y;
                        }
                    });
                }
                Op::Tanh(a) => {
                    let yv = self.nodes[idx].value.clone();
                    bump(&mut seed[a.0], out.len(), &mut |s| {
                        for ((x, d), y) in s.iter_mut().zip(&out).zip(&yv) {
                            *x += d * (1.0 - y * y);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let yv = self.nodes[idx].value.clone();
                    bump(&mut seed[a.0], out.len(), &mut |s| {
                        for ((x, d), y) in s.iter_mut().zip(&out).zip(&yv) {
                            *x += d * y * (1.0 - y);
                        }
                    });
                }
                Op::Relu(a) => {
                    let xv = self.nodes[a.0].value.clone();
                    bump(&mut seed[a.0], out.len(), &mut |s| {
                        for ((g, d), x) in s.iter_mut().zip(&out).zip(&xv) {
                            if *x > 0.0 {
                                *g += d;
                            }
                        }
                    });
                }
                Op::Concat(a, b) => {
                    let alen = self.nodes[a.0].value.len();
                    bump(&mut seed[a.0], alen, &mut |s| {
                        for (x, y) in s.iter_mut().zip(&out[..alen]) {
                            *x += y;
                        }
                    });
                    let blen = self.nodes[b.0].value.len();
                    bump(&mut seed[b.0], blen, &mut |s| {
                        for (x, y) in s.iter_mut().zip(&out[alen..]) {
                            *x += y;
                        }
                    });
                }
                Op::Embed { table, id } => {
                    let d = out.len();
                    let len = self.nodes[table.0].value.len();
                    bump(&mut seed[table.0], len, &mut |s| {
                        for (x, y) in s[id * d..(id + 1) * d].iter_mut().zip(&out) {
                            *x += y;
                        }
                    });
                }
                Op::SoftmaxCe { logits, target } => {
                    let xs = self.nodes[logits.0].value.clone();
                    let d = out[0];
                    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = xs.iter().map(|x| (x - max).exp()).sum();
                    bump(&mut seed[logits.0], xs.len(), &mut |s| {
                        for (i, (g, x)) in s.iter_mut().zip(&xs).enumerate() {
                            let p = (x - max).exp() / denom;
                            let onehot = if i == target { 1.0 } else { 0.0 };
                            *g += d * (p - onehot);
                        }
                    });
                }
                Op::AddMany(parts) => {
                    for p in parts {
                        bump(&mut seed[p.0], out.len(), &mut |s| {
                            for (x, y) in s.iter_mut().zip(&out) {
                                *x += y;
                            }
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// The nine parameters of one GRU cell, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

/// One gated recurrent update:
/// z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br),
/// h~ = tanh(Wh x + Uh (r*h) + bh), h' = (1-z)*h + z*h~.
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, p: &GruParams) -> Result<Var, KernelError> {
    let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, uin: Var| -> Result<Var, KernelError> {
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, uin)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let z = {
        let pre = gate(tape, p.wz, p.uz, p.bz, h)?;
        tape.sigmoid(pre)
    };
    let r = {
        let pre = gate(tape, p.wr, p.ur, p.br, h)?;
        tape.sigmoid(pre)
    };
    let rh = tape.hadamard(r, h)?;
    let cand = {
        let pre = gate(tape, p.wh, p.uh, p.bh, rh)?;
        tape.tanh(pre)
    };
    let keep = {
        let om = tape.one_minus(z);
        tape.hadamard(om, h)?
    };
    let update = tape.hadamard(z, cand)?;
    tape.add(keep, update)
}
