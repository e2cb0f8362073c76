//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation executed on it in order. Values are
//! computed eagerly; [`Graph::backward`] walks the record in reverse and
//! accumulates gradients into every node that requires them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{broadcast_index_map, broadcast_shape, strides, Scalar, Tensor};
use super::TensorError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: F },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    Relu { a: Var },
    Dropout { a: Var, mask: Vec<F> },
    Sum { a: Var },
    L2Normalize { a: Var, norms: Vec<F> },
    CrossEntropy { logits: Var, dlogits: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Execution record of differentiable operations.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// `out[m,n] += op(a)[m,k] · op(b)[k,n]`, where `ta`/`tb` mean the operand
/// is stored transposed.
fn gemm<F: Scalar>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    (m, k, n): (usize, usize, usize),
    ta: bool,
    tb: bool,
) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = F::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        acc = acc + x * y;
                    }
                    out[i * n + j] = out[i * n + j] + acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = F::zero();
                    for p in 0..k {
                        acc = acc + a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] = out[i * n + j] + acc;
                }
            }
        }
    }
}

/// Layout of a matmul: `batch` independent `[m,k]·[k,n]` products, with
/// `b_shared` when the right operand is a single 2-D matrix.
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatMulDims, Vec<usize>), TensorError> {
    if a.is_empty() || b.len() < 2 {
        return Err(shape_err("matmul", a, b));
    }
    let k = *a.last().unwrap();
    if b.len() == 2 {
        if b[0] != k {
            return Err(shape_err("matmul", a, b));
        }
        let rows: usize = a[..a.len() - 1].iter().product();
        let mut out = a[..a.len() - 1].to_vec();
        out.push(b[1]);
        return Ok((
            MatMulDims {
                batch: 1,
                m: rows,
                k,
                n: b[1],
                b_shared: true,
            },
            out,
        ));
    }
    let nd = a.len();
    if nd != b.len() || a[..nd - 2] != b[..nd - 2] || b[nd - 2] != k {
        return Err(shape_err("matmul", a, b));
    }
    let batch = a[..nd - 2].iter().product();
    let mut out = a[..nd - 1].to_vec();
    out.push(b[nd - 1]);
    Ok((
        MatMulDims {
            batch,
            m: a[nd - 2],
            k,
            n: b[nd - 1],
            b_shared: false,
        },
        out,
    ))
}

/// Source flat index for every flat index of the permuted tensor.
fn permute_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = strides(shape);
    let eff: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let total: usize = shape.iter().product();
    let n = axes.len();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    (map, out_shape)
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Scalar> Graph<F> {
    /// A graph that records operations for backpropagation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A forward-only graph: nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs: bool) -> Var {
        let requires_grad = needs && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (dims, out_shape) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![F::zero(); out_shape.iter().product()];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (m, k, n) = (dims.m, dims.k, dims.n);
            for t in 0..dims.batch {
                let bs = if dims.b_shared { 0 } else { t * k * n };
                gemm(
                    &av[t * m * k..(t + 1) * m * k],
                    &bv[bs..bs + k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    (m, k, n),
                    false,
                    false,
                );
            }
        }
        let needs = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul { a, b }, needs))
    }

    fn broadcast_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Tensor<F>, bool), TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<F> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let out = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(op, &sa, &sb))?;
            let ma = broadcast_index_map(&sa, &out);
            let mb = broadcast_index_map(&sb, &out);
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(av[i], bv[j])).collect();
            return Ok((Tensor::new(&out, data)?, self.rg(a) || self.rg(b)));
        };
        Ok((Tensor::new(&sa, data)?, self.rg(a) || self.rg(b)))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, needs) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, needs) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, needs))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, needs) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let t = self.value(a).map(|v| v * c);
        let needs = self.rg(a);
        self.push(t, Op::Scale { a, c }, needs)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(invalid("permute", format!("axes {axes:?} invalid for shape {shape:?}")));
        }
        let (map, out_shape) = permute_map(&shape, axes);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let needs = self.rg(a);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            needs,
        ))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var, TensorError> {
        let nd = self.shape(a).len();
        if d0 >= nd || d1 >= nd {
            return Err(invalid("transpose", format!("axes ({d0}, {d1}) out of range for {nd}-d tensor")));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(d0, d1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let t = self.value(a).reshaped(shape)?;
        let needs = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(shape_err("concat", &base, s));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_layout(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let s = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * s..(o + 1) * s]);
            }
        }
        let needs = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Gathers rows of `table` (`[vocab, dim]`) for `ids`; the result has
    /// shape `ids_shape ++ [dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var, TensorError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(invalid("embedding", format!("table must be 2-d, got {ts:?}")));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(invalid("embedding", format!("{} ids do not fill shape {ids_shape:?}", ids.len())));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid("embedding", format!("id {bad} out of range for vocabulary of {v}")));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let needs = self.rg(table);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_layout(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![F::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let mut mx = F::neg_infinity();
                for i in 0..n {
                    mx = mx.max(x[at(i)]);
                }
                let mut s = F::zero();
                for i in 0..n {
                    let e = (x[at(i)] - mx).exp();
                    y[at(i)] = e;
                    s = s + e;
                }
                for i in 0..n {
                    y[at(i)] = y[at(i)] / s;
                }
            }
        }
        let needs = self.rg(a);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Softmax { a, axis }, needs))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / d;
        let df = F::from_usize(d).unwrap();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut y = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                y[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let needs = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| if v > F::zero() { v } else { F::zero() });
        let needs = self.rg(a);
        self.push(t, Op::Relu { a }, needs)
    }

    /// Inverted dropout. The keep mask is a pure function of `seed`; with
    /// `p == 0` or `training == false` this is the identity.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64, training: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if p == 0.0 || !training {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(src.shape(), data)?;
        let needs = self.rg(a);
        Ok(self.push(t, Op::Dropout { a, mask }, needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        let needs = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::from_usize(self.value(a).len().max(1)).unwrap();
        let s = self.sum(a);
        self.scale(s, F::one() / n)
    }

    /// Divides each row (last axis) by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| invalid("l2_normalize", "scalar input"))?;
        let x = self.value(a).data();
        let tiny = F::of(1e-12);
        let mut norms = Vec::with_capacity(x.len() / d.max(1));
        let mut y = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(tiny);
            norms.push(n);
            y.extend(row.iter().map(|&v| v / n));
        }
        let needs = self.rg(a);
        Ok(self.push(Tensor::new(&shape, y)?, Op::L2Normalize { a, norms }, needs))
    }

    /// Mean token-level cross entropy over non-pad targets.
    ///
    /// `logits` has shape `[.., vocab]` and one target id per row. With
    /// `label_smoothing = ε` the target distribution puts `1 − ε` on the
    /// reference token and spreads `ε` uniformly over the non-pad vocabulary.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_id: usize,
        label_smoothing: f64,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().ok_or_else(|| invalid("cross_entropy", "scalar logits"))?;
        let rows = self.value(logits).len() / v.max(1);
        if rows != targets.len() {
            return Err(invalid(
                "cross_entropy",
                format!("{} targets for logits of shape {shape:?}", targets.len()),
            ));
        }
        if v < 2 {
            return Err(invalid("cross_entropy", "vocabulary must have at least 2 entries"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(invalid("cross_entropy", format!("target {bad} out of range for vocabulary of {v}")));
        }
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(TensorError::AllPad);
        }
        let eps = label_smoothing;
        let off = if eps > 0.0 {
            let others = if pad_id < v { v - 1 } else { v };
            eps / others as f64
        } else {
            0.0
        };
        let nf = F::from_usize(count).unwrap();
        let x = self.value(logits).data();
        let mut dlogits = vec![F::zero(); x.len()];
        let mut loss = F::zero();
        let mut q = vec![F::zero(); v];
        for (r, &t) in targets.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            let row = &x[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&z| (z - mx).exp()).sum::<F>().ln() + mx;
            for (k, qk) in q.iter_mut().enumerate() {
                *qk = if k == pad_id { F::zero() } else { F::of(off) };
            }
            q[t] = q[t] + F::of(1.0 - eps);
            for k in 0..v {
                let logp = row[k] - lse;
                if q[k] != F::zero() {
                    loss = loss - q[k] * logp;
                }
                dlogits[r * v + k] = (logp.exp() - q[k]) / nf;
            }
        }
        let needs = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / nf),
            Op::CrossEntropy { logits, dlogits },
            needs,
        ))
    }

    /// Backpropagates from the scalar `loss`, filling the gradient of every
    /// node that requires one. Gradients accumulate across multiple uses of
    /// a node. Fails if called again before [`Graph::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let ls = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(ls));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (Var(j), gj) in contributions {
                let node = &mut self.nodes[j];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(gj) {
                            *a = *a + b;
                        }
                    }
                    None => node.grad = Some(gj),
                }
            }
        }
        Ok(())
    }

    /// Clears all gradients so backward can run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn input_grads(&self, i: usize, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        let mut emit = |v: Var, grad: Vec<F>| {
            if self.nodes[v.0].requires_grad {
                out.push((v, grad));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (dims, _) = matmul_dims(self.shape(*a), self.shape(*b)).expect("recorded shapes");
                let (m, k, n) = (dims.m, dims.k, dims.n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let mut ga = vec![F::zero(); av.len()];
                    for t in 0..dims.batch {
                        let bs = if dims.b_shared { 0 } else { t * k * n };
                        gemm(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[bs..bs + k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            (m, n, k),
                            false,
                            true,
                        );
                    }
                    emit(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![F::zero(); bv.len()];
                    for t in 0..dims.batch {
                        let bs = if dims.b_shared { 0 } else { t * k * n };
                        gemm(
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[bs..bs + k * n],
                            (k, m, n),
                            true,
                            false,
                        );
                    }
                    emit(*b, gb);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                let out_shape = node.value.shape();
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let ma = broadcast_index_map(sa, out_shape);
                let mb = broadcast_index_map(sb, out_shape);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let mut ga = vec![F::zero(); av.len()];
                    for (idx, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                        let d = match node.op {
                            Op::Mul { .. } => g[idx] * bv[ib],
                            _ => g[idx],
                        };
                        ga[ia] = ga[ia] + d;
                    }
                    emit(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![F::zero(); bv.len()];
                    for (idx, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                        let d = match node.op {
                            Op::Mul { .. } => g[idx] * av[ia],
                            Op::Sub { .. } => -g[idx],
                            _ => g[idx],
                        };
                        gb[ib] = gb[ib] + d;
                    }
                    emit(*b, gb);
                }
            }
            Op::Scale { a, c } => emit(*a, g.iter().map(|&v| v * *c).collect()),
            Op::Permute { a, axes } => {
                let (map, _) = permute_map(self.shape(*a), axes);
                let mut ga = vec![F::zero(); g.len()];
                for (idx, &src) in map.iter().enumerate() {
                    ga[src] = g[idx];
                }
                emit(*a, ga);
            }
            Op::Reshape { a } => emit(*a, g.to_vec()),
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, _, inner) = axis_layout(out_shape, *axis);
                let mut grads: Vec<Vec<F>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(self.value(*p).len()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (pi, p) in parts.iter().enumerate() {
                        let s = self.shape(*p)[*axis] * inner;
                        grads[pi].extend_from_slice(&g[pos..pos + s]);
                        pos += s;
                    }
                }
                for (p, gp) in parts.iter().zip(grads) {
                    emit(*p, gp);
                }
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut gt = vec![F::zero(); ts[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] = gt[id * d + c] + g[r * d + c];
                    }
                }
                emit(*table, gt);
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = axis_layout(node.value.shape(), *axis);
                let y = node.value.data();
                let mut ga = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * n * inner + i * inner + j;
                        let dot: F = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..n {
                            ga[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                emit(*a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                let rows = xhat.len() / d;
                let df = F::from_usize(d).unwrap();
                if self.rg(*x) {
                    let mut gx = vec![F::zero(); xhat.len()];
                    for r in 0..rows {
                        let mut mean_g = F::zero();
                        let mut mean_gx = F::zero();
                        for c in 0..d {
                            let gh = g[r * d + c] * gv[c];
                            mean_g = mean_g + gh;
                            mean_gx = mean_gx + gh * xhat[r * d + c];
                        }
                        mean_g = mean_g / df;
                        mean_gx = mean_gx / df;
                        for c in 0..d {
                            let gh = g[r * d + c] * gv[c];
                            gx[r * d + c] = inv_std[r] * (gh - mean_g - xhat[r * d + c] * mean_gx);
                        }
                    }
                    emit(*x, gx);
                }
                if self.rg(*gain) {
                    let mut gg = vec![F::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] = gg[c] + g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    emit(*gain, gg);
                }
                if self.rg(*bias) {
                    let mut gb = vec![F::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] = gb[c] + g[r * d + c];
                        }
                    }
                    emit(*bias, gb);
                }
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                emit(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                        .collect(),
                );
            }
            Op::Dropout { a, mask } => emit(*a, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect()),
            Op::Sum { a } => emit(*a, vec![g[0]; self.value(*a).len()]),
            Op::L2Normalize { a, norms } => {
                let y = node.value.data();
                let d = y.len() / norms.len().max(1);
                let mut ga = vec![F::zero(); y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let s = r * d;
                    let dot: F = (0..d).map(|c| g[s + c] * y[s + c]).sum();
                    for c in 0..d {
                        ga[s + c] = (g[s + c] - y[s + c] * dot) / n;
                    }
                }
                emit(*a, ga);
            }
            Op::CrossEntropy { logits, dlogits } => {
                emit(*logits, dlogits.iter().map(|&v| v * g[0]).collect())
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        let bad = g.constant(Tensor::zeros(&[4, 4]));
        let err = g.matmul(a, bad).unwrap_err();
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 4]"));
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1., 2., 3.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn square_gradient_accumulates_over_uses() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_twice_is_rejected_until_reset() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::BackwardTwice)));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1.]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., -1., 0., 100.]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..2 {
            let s: f32 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[4]));
        assert_eq!(g.dropout(x, 0.0, 7, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, 7, false).unwrap(), x);
        let d = g.dropout(x, 0.5, 7, true).unwrap();
        assert_ne!(d, x);
        assert!(g.dropout(x, 1.0, 7, true).is_err());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 4], &[1., 2., 3., 4., -3., 0., 8., 1.]));
        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[1, 2, 7]));
        let l = g.cross_entropy(x, &[3, 5], 0, 0.0).unwrap();
        assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);
        let l = g.cross_entropy(x, &[3, 5], 0, 0.1).unwrap();
        assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_two_class_fixture() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2], &[0.0, 3f64.ln()]));
        let l = g.cross_entropy(x, &[1], 99, 0.0).unwrap();
        assert!((g.value(l).item() - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_margin_goes_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 3], &[0.0, 60.0, 0.0]));
        let l = g.cross_entropy(x, &[1], 0, 0.0).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn cross_entropy_all_pad_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 4]));
        assert!(matches!(g.cross_entropy(x, &[0, 0], 0, 0.0), Err(TensorError::AllPad)));
    }

    #[test]
    fn inference_graph_has_no_grads() {
        let mut g = Graph::<f64>::inference();
        let x = g.param(t(&[2], &[1., 2.]));
        let s = g.sum(x);
        assert!(!g.requires_grad(s));
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }
}
