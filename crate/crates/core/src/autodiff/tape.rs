use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{CsrMatrix, Matrix};

/// Inputs to `log` are floored at `e^-50`; inputs to `exp` are clamped to
/// `[-50, 50]`. Clamped positions receive zero gradient.
pub const EXP_CLAMP: f64 = 50.0;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    RowBroadcastMul(Var, Var),
    ScaleRows(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    ColumnL2Norms(Var),
    MaxReduce { input: Var, argmax: usize },
    ProductReduce(Var),
    ScalarMul(Var, f64),
    Transpose(Var),
    Stack(Vec<Var>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        rows: Vec<usize>,
        probs: Matrix,
    },
    PairDot {
        input: Var,
        pairs: Arc<[(usize, usize)]>,
    },
    BceWithLogits {
        logits: Var,
        targets: Arc<[f64]>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Every input of node `k` has index `< k`, so a reverse sweep over the
/// node list is a valid topological order.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    kink_signature: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mix(h: u64, x: u64) -> u64 {
    (h ^ x).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5)
}

fn is_vector(m: &Matrix) -> bool {
    m.rows() == 1 || m.cols() == 1
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            kink_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every branch decision taken so far (relu sign patterns and
    /// max_reduce argmaxes). Two evaluations with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        assert_eq!(v.tape, self.id, "Var used with a foreign tape");
        &self.nodes[v.index()].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        m.item()
            .ok_or_else(|| Error::Contract(format!("expected scalar, got {:?}", m.shape())))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, v: Var) -> Result<&Matrix> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Contract("value belongs to another tape".into()));
        }
        Ok(&self.nodes[v.index()].value)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index()].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.matmul(self.check(b)?)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// Sparse `p · x`; the sparse operand is a constant.
    pub fn spmm(&mut self, p: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let out = p.spmm(self.check(x)?)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SpMM(Arc::clone(p), x), out, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(&Matrix, &Matrix)> {
        let (ma, mb) = (self.check(a)?, self.check(b)?);
        if ma.shape() != mb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ma.shape(), mb.shape())));
        }
        Ok((ma, mb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = self.same_shape("add", a, b)?;
        let out = ma.zip_map(mb, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = self.same_shape("sub", a, b)?;
        let out = ma.zip_map(mb, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = self.same_shape("mul", a, b)?;
        let out = ma.zip_map(mb, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    /// `out[i][j] = x[i][j] * v[j]` for `x` of shape N×k and a length-k vector.
    pub fn row_broadcast_mul(&mut self, x: Var, v: Var) -> Result<Var> {
        let (mx, mv) = (self.check(x)?, self.check(v)?);
        if !is_vector(mv) || mv.len() != mx.cols() {
            return Err(Error::shape(
                "row_broadcast_mul",
                format!("{:?} by vector {:?}", mx.shape(), mv.shape()),
            ));
        }
        let mut out = mx.clone();
        for r in 0..out.rows() {
            for (o, s) in out.row_mut(r).iter_mut().zip(mv.data()) {
                *o *= s;
            }
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(Op::RowBroadcastMul(x, v), out, rg))
    }

    /// `diag(v) · w`: `out[i][j] = w[i][j] * v[i]` for a length-k vector and
    /// `w` of shape k×m.
    pub fn scale_rows(&mut self, w: Var, v: Var) -> Result<Var> {
        let (mw, mv) = (self.check(w)?, self.check(v)?);
        if !is_vector(mv) || mv.len() != mw.rows() {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} by vector {:?}", mw.shape(), mv.shape()),
            ));
        }
        let mut out = mw.clone();
        for (r, &s) in mv.data().iter().enumerate() {
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let rg = self.rg(&[w, v]);
        Ok(self.push(Op::ScaleRows(w, v), out, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mx = self.check(x)?;
        let out = mx.map(|v| v.max(0.0));
        let mut sig = self.kink_signature;
        for (i, v) in mx.data().iter().enumerate() {
            if *v > 0.0 {
                sig = mix(sig, i as u64);
            }
        }
        self.kink_signature = mix(sig, 0x5e1u64);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Relu(x), out, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.map(logistic);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Sigmoid(x), out, rg))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let floor = (-EXP_CLAMP).exp();
        let out = self.check(x)?.map(|v| v.max(floor).ln());
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Log(x), out, rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self
            .check(x)?
            .map(|v| v.clamp(-EXP_CLAMP, EXP_CLAMP).exp());
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Exp(x), out, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.check(x)?.data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Sum(x), Matrix::scalar(s), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let m = self.check(x)?;
        if m.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = m.data().iter().sum::<f64>() / m.len() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Mean(x), Matrix::scalar(s), rg))
    }

    /// ℓ₂ norm of every column: d×k → 1×k.
    pub fn column_l2_norms(&mut self, x: Var) -> Result<Var> {
        let m = self.check(x)?;
        let mut sq = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            for (s, v) in sq.iter_mut().zip(m.row(r)) {
                *s += v * v;
            }
        }
        let out = Matrix::row_vector(sq.into_iter().map(f64::sqrt).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(Op::ColumnL2Norms(x), out, rg))
    }

    /// Maximum of a vector. Ties go to the lowest index, which also receives
    /// the whole subgradient.
    pub fn max_reduce(&mut self, x: Var) -> Result<Var> {
        let m = self.check(x)?;
        if !is_vector(m) || m.is_empty() {
            return Err(Error::shape("max_reduce", format!("{:?}", m.shape())));
        }
        let mut argmax = 0;
        for (i, &v) in m.data().iter().enumerate() {
            if v > m.data()[argmax] {
                argmax = i;
            }
        }
        let out = Matrix::scalar(m.data()[argmax]);
        self.kink_signature = mix(self.kink_signature, argmax as u64 ^ 0xa5a5);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::MaxReduce { input: x, argmax }, out, rg))
    }

    pub fn product_reduce(&mut self, x: Var) -> Result<Var> {
        let m = self.check(x)?;
        if !is_vector(m) {
            return Err(Error::shape("product_reduce", format!("{:?}", m.shape())));
        }
        let p = m.data().iter().product();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::ProductReduce(x), Matrix::scalar(p), rg))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.check(x)?.scale(c);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::ScalarMul(x, c), out, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.transpose();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Transpose(x), out, rg))
    }

    /// Collects 1×1 values into a 1×n row vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut vals = Vec::with_capacity(xs.len());
        for &x in xs {
            let m = self.check(x)?;
            vals.push(m.item().ok_or_else(|| {
                Error::shape("stack", format!("non-scalar input {:?}", m.shape()))
            })?);
        }
        let rg = self.rg(xs);
        Ok(self.push(Op::Stack(xs.to_vec()), Matrix::row_vector(vals), rg))
    }

    /// Mean softmax cross-entropy over the rows selected by `mask`.
    /// Log-sum-exp is max-shifted.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &Arc<[usize]>,
        mask: &[bool],
    ) -> Result<Var> {
        let m = self.check(logits)?;
        if labels.len() != m.rows() || mask.len() != m.rows() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!(
                    "logits {:?}, {} labels, mask {}",
                    m.shape(),
                    labels.len(),
                    mask.len()
                ),
            ));
        }
        let rows: Vec<usize> = (0..m.rows()).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::validation("softmax_cross_entropy over an empty mask"));
        }
        let c = m.cols();
        let mut probs = Matrix::zeros(rows.len(), c);
        let mut total = 0.0;
        for (k, &i) in rows.iter().enumerate() {
            let y = labels[i];
            if y >= c {
                return Err(Error::validation(format!("label {y} with {c} logits")));
            }
            let row = m.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[y];
            for (p, v) in probs.row_mut(k).iter_mut().zip(row) {
                *p = (v - mx).exp() / z;
            }
        }
        let out = Matrix::scalar(total / rows.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: Arc::clone(labels),
                rows,
                probs,
            },
            out,
            rg,
        ))
    }

    /// Inner products `⟨h_u, h_v⟩` for each pair, as a 1×m row.
    pub fn pair_dot(&mut self, h: Var, pairs: &Arc<[(usize, usize)]>) -> Result<Var> {
        let m = self.check(h)?;
        let mut out = Vec::with_capacity(pairs.len());
        for &(u, v) in pairs.iter() {
            if u >= m.rows() || v >= m.rows() {
                return Err(Error::shape("pair_dot", format!("pair ({u}, {v}) for {} rows", m.rows())));
            }
            out.push(m.row(u).iter().zip(m.row(v)).map(|(a, b)| a * b).sum());
        }
        let rg = self.rg(&[h]);
        Ok(self.push(
            Op::PairDot {
                input: h,
                pairs: Arc::clone(pairs),
            },
            Matrix::row_vector(out),
            rg,
        ))
    }

    /// Mean binary cross-entropy of `logistic(logits)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Arc<[f64]>) -> Result<Var> {
        let m = self.check(logits)?;
        if m.len() != targets.len() || m.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} targets", m.len(), targets.len()),
            ));
        }
        let total: f64 = m
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Matrix::scalar(total / m.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                targets: Arc::clone(targets),
            },
            out,
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. Gradients of repeated uses add up.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rm = self.check(root)?;
        if rm.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {:?}",
                rm.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.index() + 1];
        grads[root.index()] = Some(Matrix::scalar(1.0));
        for k in (0..=root.index()).rev() {
            let node = &self.nodes[k];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[k] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.index()].value;
        let needs = |v: Var| self.nodes[v.index()].requires_grad;
        let mut acc = |v: Var, d: Matrix| accumulate(grads, v, d);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_t(val(*b))?);
                }
                if needs(*b) {
                    acc(*b, val(*a).t_matmul(g)?);
                }
            }
            Op::SpMM(p, x) => {
                if needs(*x) {
                    acc(*x, p.t_spmm(g)?);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if needs(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::RowBroadcastMul(x, v) => {
                let (mx, mv) = (val(*x), val(*v));
                if needs(*x) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        for (o, s) in d.row_mut(r).iter_mut().zip(mv.data()) {
                            *o *= s;
                        }
                    }
                    acc(*x, d);
                }
                if needs(*v) {
                    let mut d = vec![0.0; mv.len()];
                    for r in 0..mx.rows() {
                        for ((o, a), b) in d.iter_mut().zip(mx.row(r)).zip(g.row(r)) {
                            *o += a * b;
                        }
                    }
                    acc(*v, Matrix::from_vec(mv.rows(), mv.cols(), d)?);
                }
            }
            Op::ScaleRows(w, v) => {
                let (mw, mv) = (val(*w), val(*v));
                if needs(*w) {
                    let mut d = g.clone();
                    for (r, &s) in mv.data().iter().enumerate() {
                        for o in d.row_mut(r) {
                            *o *= s;
                        }
                    }
                    acc(*w, d);
                }
                if needs(*v) {
                    let d = (0..mw.rows())
                        .map(|r| mw.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*v, Matrix::from_vec(mv.rows(), mv.cols(), d)?);
                }
            }
            Op::Relu(x) => {
                acc(*x, g.zip_map(val(*x), |d, v| if v > 0.0 { d } else { 0.0 }));
            }
            Op::Sigmoid(x) => {
                acc(*x, g.zip_map(&node.value, |d, y| d * y * (1.0 - y)));
            }
            Op::Log(x) => {
                let floor = (-EXP_CLAMP).exp();
                acc(*x, g.zip_map(val(*x), |d, v| if v > floor { d / v } else { 0.0 }));
            }
            Op::Exp(x) => {
                let mut d = g.zip_map(&node.value, |d, y| d * y);
                for (o, v) in d.data_mut().iter_mut().zip(val(*x).data()) {
                    if v.abs() > EXP_CLAMP {
                        *o = 0.0;
                    }
                }
                acc(*x, d);
            }
            Op::Sum(x) => {
                let m = val(*x);
                acc(*x, Matrix::filled(m.rows(), m.cols(), g.data()[0]));
            }
            Op::Mean(x) => {
                let m = val(*x);
                acc(*x, Matrix::filled(m.rows(), m.cols(), g.data()[0] / m.len() as f64));
            }
            Op::ColumnL2Norms(x) => {
                let m = val(*x);
                let norms = node.value.data();
                let mut d = Matrix::zeros(m.rows(), m.cols());
                for r in 0..m.rows() {
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        if norms[c] > 0.0 {
                            *o = g.data()[c] * m.get(r, c) / norms[c];
                        }
                    }
                }
                acc(*x, d);
            }
            Op::MaxReduce { input, argmax } => {
                let m = val(*input);
                let mut d = Matrix::zeros(m.rows(), m.cols());
                d.data_mut()[*argmax] = g.data()[0];
                acc(*input, d);
            }
            Op::ProductReduce(x) => {
                let m = val(*x);
                let v = m.data();
                let n = v.len();
                let mut prefix = vec![1.0; n + 1];
                for i in 0..n {
                    prefix[i + 1] = prefix[i] * v[i];
                }
                let mut d = vec![0.0; n];
                let mut suffix = 1.0;
                for i in (0..n).rev() {
                    d[i] = g.data()[0] * prefix[i] * suffix;
                    suffix *= v[i];
                }
                acc(*x, Matrix::from_vec(m.rows(), m.cols(), d)?);
            }
            Op::ScalarMul(x, c) => acc(*x, g.scale(*c)),
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Stack(xs) => {
                for (i, &x) in xs.iter().enumerate() {
                    if needs(x) {
                        acc(x, Matrix::scalar(g.data()[i]));
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                rows,
                probs,
            } => {
                let m = val(*logits);
                let scale = g.data()[0] / rows.len() as f64;
                let mut d = Matrix::zeros(m.rows(), m.cols());
                for (k, &i) in rows.iter().enumerate() {
                    let out = d.row_mut(i);
                    for (o, p) in out.iter_mut().zip(probs.row(k)) {
                        *o = p * scale;
                    }
                    out[labels[i]] -= scale;
                }
                acc(*logits, d);
            }
            Op::PairDot { input, pairs } => {
                let m = val(*input);
                let mut d = Matrix::zeros(m.rows(), m.cols());
                for (e, &(u, v)) in pairs.iter().enumerate() {
                    let ge = g.data()[e];
                    if ge == 0.0 {
                        continue;
                    }
                    for c in 0..m.cols() {
                        let (hu, hv) = (m.get(u, c), m.get(v, c));
                        d.data_mut()[u * m.cols() + c] += ge * hv;
                        d.data_mut()[v * m.cols() + c] += ge * hu;
                    }
                }
                acc(*input, d);
            }
            Op::BceWithLogits { logits, targets } => {
                let m = val(*logits);
                let scale = g.data()[0] / m.len() as f64;
                let d = m
                    .data()
                    .iter()
                    .zip(targets.iter())
                    .map(|(&z, &t)| (logistic(z) - t) * scale)
                    .collect();
                acc(*logits, Matrix::from_vec(m.rows(), m.cols(), d)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.index()] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `∂root/∂v`, or `None` when `v` does not influence the root or does
    /// not require gradients.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }
}
