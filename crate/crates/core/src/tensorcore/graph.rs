use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{Gradients, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    AddRowBias(Var, Var),
    Bilinear { x: Var, w: Var, y: Var, b: Var },
    Softmax(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    GatherRows { input: Var, rows: Vec<usize> },
    Stack(Vec<Var>),
    MaxPool { input: Var, argmax: Vec<usize> },
    MeanPool(Var),
    Dropout { input: Var, scale: Vec<T> },
    Sum(Var),
    Dot(Var, Var),
    BceWithLogits { logits: Var, targets: Vec<T>, weight: T },
}

#[derive(Debug)]
struct Node<'s, T: Clone> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Cow<'s, [T]>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations. Nodes are stored in creation
/// order, which is a topological order; backward walks it in reverse.
pub struct Graph<'s, T: Scalar> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<'s, T>>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Grads<T> {
    leaves: Vec<Option<Vec<T>>>,
    params: Gradients<T>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &Gradients<T> {
        &self.params
    }

    pub fn into_params(self) -> Gradients<T> {
        self.params
    }
}

impl<T: Scalar> Default for Graph<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<'static, T> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Vec<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn to_f64(&self, v: Var) -> Vec<f64> {
        self.value(v).iter().map(|x| x.as_f64()).collect()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Every argmax chosen by max pooling so far, in tape order. Two
    /// evaluations with different selections lie on different pieces of a
    /// piecewise-smooth function.
    pub fn selections(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::MaxPool { argmax, .. } = &node.op {
                out.extend_from_slice(argmax);
            }
        }
        out
    }

    /// Frozen input; receives no gradient unless the tensor requires it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            op: Op::Constant,
            shape,
            value: Cow::Owned(t.into_data()),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Grads::wrt`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.constant(t.with_requires_grad(true))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    pub fn ones(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::filled(shape, T::one()))
    }

    pub fn vector(&mut self, data: Vec<T>) -> Var {
        self.constant(Tensor::vector(data))
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph built without a parameter store");
        let t = store.tensor(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(Error::shape(op, self.shape(v), &vec![0; rank]));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), self.shape(a).to_vec(), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), self.shape(a).to_vec(), out, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), self.shape(a).to_vec(), out, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        self.push(Op::Scale(a, c), self.shape(a).to_vec(), out, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, &b)| *o = *o + aip * b);
            }
        }
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, &[a, b]))
    }

    /// `A[m,n] · x[n] -> [m]`
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(a), self.shape(x));
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(Error::shape("matvec", sa, sx));
        }
        let (m, n) = (sa[0], sa[1]);
        let (av, xv) = (self.value(a), self.value(x));
        let out = (0..m).map(|i| dot(&av[i * n..(i + 1) * n], xv)).collect();
        Ok(self.push(Op::MatVec(a, x), vec![m], out, &[a, x]))
    }

    /// `x[m] · A[m,n] -> [n]`, i.e. a weighted sum of the rows of `A`.
    pub fn vecmat(&mut self, x: Var, a: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x), self.shape(a));
        if sa.len() != 2 || sx.len() != 1 || sa[0] != sx[0] {
            return Err(Error::shape("vecmat", sx, sa));
        }
        let (m, n) = (sa[0], sa[1]);
        let (xv, av) = (self.value(x), self.value(a));
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            let xi = xv[i];
            out.iter_mut()
                .zip(&av[i * n..(i + 1) * n])
                .for_each(|(o, &v)| *o = *o + xi * v);
        }
        Ok(self.push(Op::VecMat(x, a), vec![n], out, &[x, a]))
    }

    /// Adds `b[d]` to every row of `x[n,d]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("add_row_bias", sx, sb));
        }
        let d = sb[0];
        let bv = self.value(b);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % d])
            .collect();
        Ok(self.push(Op::AddRowBias(x, b), sx.to_vec(), out, &[x, b]))
    }

    /// `out[k] = Σ_i Σ_j x[i]·W[i,k,j]·y[j] + b[k]`
    pub fn bilinear(&mut self, x: Var, w: Var, y: Var, b: Var) -> Result<Var> {
        let (sx, sw, sy, sb) = (self.shape(x), self.shape(w), self.shape(y), self.shape(b));
        if sw.len() != 3 || sx.len() != 1 || sx[0] != sw[0] {
            return Err(Error::shape("bilinear(x, W)", sx, sw));
        }
        if sy.len() != 1 || sy[0] != sw[2] {
            return Err(Error::shape("bilinear(W, y)", sw, sy));
        }
        if sb.len() != 1 || sb[0] != sw[1] {
            return Err(Error::shape("bilinear(W, b)", sw, sb));
        }
        let (p, d, q) = (sw[0], sw[1], sw[2]);
        let (xv, wv, yv) = (self.value(x), self.value(w), self.value(y));
        let mut out = self.value(b).to_vec();
        for i in 0..p {
            let xi = xv[i];
            if xi == T::zero() {
                continue;
            }
            for (k, o) in out.iter_mut().enumerate() {
                let row = &wv[(i * d + k) * q..(i * d + k + 1) * q];
                *o = *o + xi * dot(row, yv);
            }
        }
        Ok(self.push(Op::Bilinear { x, w, y, b }, vec![d], out, &[x, w, y, b]))
    }

    /// Max-stabilized softmax of a vector; masked-out entries are exactly 0.
    pub fn softmax(&mut self, v: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.expect_rank("softmax", v, 1)?;
        let n = self.shape(v)[0];
        if n == 0 {
            return Err(Error::EmptyInput("softmax"));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape("softmax mask", &[n], &[m.len()]));
            }
        }
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        let vals = self.value(v);
        let max = (0..n)
            .filter(|&i| keep(i))
            .map(|i| vals[i])
            .fold(None, |acc: Option<T>, x| Some(acc.map_or(x, |a| a.max(x))))
            .ok_or(Error::EmptySoftmaxSupport)?;
        let mut out: Vec<T> = (0..n)
            .map(|i| if keep(i) { (vals[i] - max).exp() } else { T::zero() })
            .collect();
        let total: T = out.iter().copied().sum();
        out.iter_mut().for_each(|o| *o = *o / total);
        Ok(self.push(Op::Softmax(v), vec![n], out, &[v]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), self.shape(a).to_vec(), out, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let mut out = Vec::new();
        for &p in parts {
            self.expect_rank("concat", p, 1)?;
            out.extend_from_slice(self.value(p));
        }
        let len = out.len();
        Ok(self.push(Op::Concat(parts.to_vec()), vec![len], out, parts))
    }

    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Result<Var> {
        self.expect_rank("slice", v, 1)?;
        let n = self.shape(v)[0];
        if start + len > n {
            return Err(Error::shape("slice", &[n], &[start, start + len]));
        }
        let out = self.value(v)[start..start + len].to_vec();
        Ok(self.push(Op::Slice { input: v, start }, vec![len], out, &[v]))
    }

    /// Selects rows of a matrix (repeats allowed) into a new matrix.
    pub fn gather_rows(&mut self, m: Var, rows: &[usize]) -> Result<Var> {
        self.expect_rank("gather_rows", m, 2)?;
        let (r, c) = (self.shape(m)[0], self.shape(m)[1]);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::shape("gather_rows", &[r, c], &[i]));
            }
            out.extend_from_slice(&self.value(m)[i * c..(i + 1) * c]);
        }
        let op = Op::GatherRows {
            input: m,
            rows: rows.to_vec(),
        };
        Ok(self.push(op, vec![rows.len(), c], out, &[m]))
    }

    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        self.expect_rank("row", m, 2)?;
        let (r, c) = (self.shape(m)[0], self.shape(m)[1]);
        if i >= r {
            return Err(Error::shape("row", &[r, c], &[i]));
        }
        let out = self.value(m)[i * c..(i + 1) * c].to_vec();
        let op = Op::GatherRows {
            input: m,
            rows: vec![i],
        };
        Ok(self.push(op, vec![c], out, &[m]))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(Error::EmptyInput("stack"))?;
        self.expect_rank("stack", first, 1)?;
        let c = self.shape(first)[0];
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if self.shape(r) != [c] {
                return Err(Error::shape("stack", &[c], self.shape(r)));
            }
            out.extend_from_slice(self.value(r));
        }
        Ok(self.push(Op::Stack(rows.to_vec()), vec![rows.len(), c], out, rows))
    }

    /// Columnwise max or mean over the rows of a matrix.
    pub fn pool(&mut self, m: Var, kind: PoolKind) -> Result<Var> {
        self.expect_rank("pool", m, 2)?;
        let (r, c) = (self.shape(m)[0], self.shape(m)[1]);
        if r == 0 {
            return Err(Error::EmptyInput("pool"));
        }
        let vals = self.value(m);
        match kind {
            PoolKind::Max => {
                let mut argmax = vec![0usize; c];
                let mut out = vals[..c].to_vec();
                for i in 1..r {
                    for j in 0..c {
                        // strict comparison: the first maximal row wins ties
                        if vals[i * c + j] > out[j] {
                            out[j] = vals[i * c + j];
                            argmax[j] = i;
                        }
                    }
                }
                Ok(self.push(Op::MaxPool { input: m, argmax }, vec![c], out, &[m]))
            }
            PoolKind::Mean => {
                let mut out = vec![T::zero(); c];
                for i in 0..r {
                    out.iter_mut()
                        .zip(&vals[i * c..(i + 1) * c])
                        .for_each(|(o, &v)| *o = *o + v);
                }
                let n = T::of(r as f64);
                out.iter_mut().for_each(|o| *o = *o / n);
                Ok(self.push(Op::MeanPool(m), vec![c], out, &[m]))
            }
        }
    }

    /// Inverted dropout. `rng: None` is evaluation mode (identity).
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        ratio: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!(
                "dropout ratio must lie in [0, 1), got {ratio}"
            )));
        }
        let Some(rng) = rng else { return Ok(x) };
        if ratio == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - ratio));
        let scale: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < ratio {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&scale)
            .map(|(&v, &s)| v * s)
            .collect();
        Ok(self.push(Op::Dropout { input: x, scale }, self.shape(x).to_vec(), out, &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        self.push(Op::Sum(a), vec![1], vec![s], &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = dot(self.value(a), self.value(b));
        Ok(self.push(Op::Dot(a, b), vec![1], vec![s], &[a, b]))
    }

    /// `weight · Σ_i BCE(sigmoid(z_i), y_i)`, evaluated in the overflow-free
    /// logit form `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], weight: f64) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n {
            return Err(Error::shape("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let weight = T::of(weight);
        let total: T = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
            weight,
        };
        Ok(self.push(op, vec![1], vec![total * weight], &[logits]))
    }

    /// Reverse-mode sweep from a scalar node. Param gradients are returned,
    /// not written to the store, so independent graphs can run in parallel
    /// and be reduced in a fixed order by the caller.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let num_params = self.store.map_or(0, |s| s.len());
        let mut params = Gradients::new(num_params);
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(id) => params.add_into(*id, &g),
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |ga| add_assign(ga, &g));
                    self.acc(&mut grads, *b, |gb| add_assign(gb, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |ga| add_assign(ga, &g));
                    self.acc(&mut grads, *b, |gb| {
                        gb.iter_mut().zip(&g).for_each(|(x, &y)| *x = *x - y)
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, |ga| {
                        for k in 0..ga.len() {
                            ga[k] = ga[k] + g[k] * bv[k];
                        }
                    });
                    self.acc(&mut grads, *b, |gb| {
                        for k in 0..gb.len() {
                            gb[k] = gb[k] + g[k] * av[k];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    self.acc(&mut grads, *a, |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x = *x + *c * y)
                    });
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, |ga| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                ga[i * k + p] = ga[i * k + p] + dot(grow, &bv[p * n..(p + 1) * n]);
                            }
                        }
                    });
                    self.acc(&mut grads, *b, |gb| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == T::zero() {
                                    continue;
                                }
                                gb[p * n..(p + 1) * n]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(x, &y)| *x = *x + aip * y);
                            }
                        }
                    });
                }
                Op::MatVec(a, x) => {
                    let n = self.shape(*a)[1];
                    let (av, xv) = (self.value(*a), self.value(*x));
                    self.acc(&mut grads, *a, |ga| {
                        for (i, &gi) in g.iter().enumerate() {
                            ga[i * n..(i + 1) * n]
                                .iter_mut()
                                .zip(xv)
                                .for_each(|(o, &xj)| *o = *o + gi * xj);
                        }
                    });
                    self.acc(&mut grads, *x, |gx| {
                        for (i, &gi) in g.iter().enumerate() {
                            gx.iter_mut()
                                .zip(&av[i * n..(i + 1) * n])
                                .for_each(|(o, &aij)| *o = *o + gi * aij);
                        }
                    });
                }
                Op::VecMat(x, a) => {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let (xv, av) = (self.value(*x), self.value(*a));
                    self.acc(&mut grads, *x, |gx| {
                        for i in 0..m {
                            gx[i] = gx[i] + dot(&av[i * n..(i + 1) * n], &g);
                        }
                    });
                    self.acc(&mut grads, *a, |ga| {
                        for i in 0..m {
                            let xi = xv[i];
                            ga[i * n..(i + 1) * n]
                                .iter_mut()
                                .zip(&g)
                                .for_each(|(o, &gj)| *o = *o + xi * gj);
                        }
                    });
                }
                Op::AddRowBias(x, b) => {
                    let d = self.shape(*b)[0];
                    self.acc(&mut grads, *x, |gx| add_assign(gx, &g));
                    self.acc(&mut grads, *b, |gb| {
                        for (k, &v) in g.iter().enumerate() {
                            gb[k % d] = gb[k % d] + v;
                        }
                    });
                }
                Op::Bilinear { x, w, y, b } => self.bilinear_backward(&mut grads, &g, *x, *w, *y, *b),
                Op::Softmax(v) => {
                    let out = &node.value;
                    let inner: T = g.iter().zip(out.iter()).map(|(&a, &b)| a * b).sum();
                    self.acc(&mut grads, *v, |gv| {
                        for k in 0..gv.len() {
                            gv[k] = gv[k] + out[k] * (g[k] - inner);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let out = &node.value;
                    self.acc(&mut grads, *a, |ga| {
                        for k in 0..ga.len() {
                            ga[k] = ga[k] + g[k] * out[k] * (T::one() - out[k]);
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        self.acc(&mut grads, p, |gp| add_assign(gp, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::Slice { input, start } => {
                    let len = g.len();
                    self.acc(&mut grads, *input, |gi| {
                        add_assign(&mut gi[*start..*start + len], &g)
                    });
                }
                Op::GatherRows { input, rows } => {
                    let c = self.shape(*input)[1];
                    self.acc(&mut grads, *input, |gi| {
                        for (k, &r) in rows.iter().enumerate() {
                            add_assign(&mut gi[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                        }
                    });
                }
                Op::Stack(rows) => {
                    let c = g.len() / rows.len();
                    for (k, &r) in rows.iter().enumerate() {
                        self.acc(&mut grads, r, |gr| add_assign(gr, &g[k * c..(k + 1) * c]));
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let c = g.len();
                    self.acc(&mut grads, *input, |gi| {
                        for (j, &r) in argmax.iter().enumerate() {
                            gi[r * c + j] = gi[r * c + j] + g[j];
                        }
                    });
                }
                Op::MeanPool(input) => {
                    let c = g.len();
                    let r = self.shape(*input)[0];
                    let inv = T::one() / T::of(r as f64);
                    self.acc(&mut grads, *input, |gi| {
                        for i in 0..r {
                            gi[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(&g)
                                .for_each(|(o, &v)| *o = *o + v * inv);
                        }
                    });
                }
                Op::Dropout { input, scale } => {
                    self.acc(&mut grads, *input, |gi| {
                        for k in 0..gi.len() {
                            gi[k] = gi[k] + g[k] * scale[k];
                        }
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    self.acc(&mut grads, *a, |ga| ga.iter_mut().for_each(|x| *x = *x + g0));
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, |ga| {
                        ga.iter_mut().zip(bv).for_each(|(x, &y)| *x = *x + g0 * y)
                    });
                    self.acc(&mut grads, *b, |gb| {
                        gb.iter_mut().zip(av).for_each(|(x, &y)| *x = *x + g0 * y)
                    });
                }
                Op::BceWithLogits {
                    logits,
                    targets,
                    weight,
                } => {
                    let g0 = g[0] * *weight;
                    let zv = self.value(*logits);
                    self.acc(&mut grads, *logits, |gz| {
                        for k in 0..gz.len() {
                            gz[k] = gz[k] + g0 * (sigmoid(zv[k]) - targets[k]);
                        }
                    });
                }
            }
        }

        // only leaves keep their gradient; intermediate slots were taken above
        Ok(Grads {
            leaves: grads,
            params,
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
        f(slot);
    }

    fn bilinear_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        x: Var,
        w: Var,
        y: Var,
        b: Var,
    ) {
        let sw = self.shape(w);
        let (p, d, q) = (sw[0], sw[1], sw[2]);
        let (xv, wv, yv) = (self.value(x), self.value(w), self.value(y));
        self.acc(grads, b, |gb| add_assign(gb, g));
        self.acc(grads, x, |gx| {
            for i in 0..p {
                let mut s = T::zero();
                for (k, &gk) in g.iter().enumerate() {
                    s = s + gk * dot(&wv[(i * d + k) * q..(i * d + k + 1) * q], yv);
                }
                gx[i] = gx[i] + s;
            }
        });
        self.acc(grads, y, |gy| {
            for i in 0..p {
                for (k, &gk) in g.iter().enumerate() {
                    let coef = xv[i] * gk;
                    if coef == T::zero() {
                        continue;
                    }
                    gy.iter_mut()
                        .zip(&wv[(i * d + k) * q..(i * d + k + 1) * q])
                        .for_each(|(o, &wv)| *o = *o + coef * wv);
                }
            }
        });
        self.acc(grads, w, |gw| {
            for i in 0..p {
                for (k, &gk) in g.iter().enumerate() {
                    let coef = xv[i] * gk;
                    if coef == T::zero() {
                        continue;
                    }
                    gw[(i * d + k) * q..(i * d + k + 1) * q]
                        .iter_mut()
                        .zip(yv)
                        .for_each(|(o, &yj)| *o = *o + coef * yj);
                }
            }
        });
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    // keep saturated outputs strictly inside (0, 1)
    let two = T::one() + T::one();
    y.max(T::min_positive_value()).min(T::one() - T::epsilon() / two)
}
