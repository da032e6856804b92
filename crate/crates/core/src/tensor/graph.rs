use std::sync::Arc;

use super::attention::{attention_backward, attention_forward, Visibility};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Additive mask value for hidden attention logits.
pub const MASK_VALUE: f64 = -1e9;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    Add(Var, Var, Option<Vec<usize>>, Option<Vec<usize>>),
    Sub(Var, Var, Option<Vec<usize>>, Option<Vec<usize>>),
    Mul(Var, Var, Option<Vec<usize>>, Option<Vec<usize>>),
    AddScalar(Var),
    MulScalar(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<T>,
    },
    Embedding(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    SumLast(Var),
    Transpose(Var),
    Reshape(Var),
    Attention {
        qkv: Var,
        heads: usize,
        vis: Arc<Visibility>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in creation order, which is a valid topological order;
/// `backward` replays the tape in exact reverse.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch(op, a, b)),
        };
    }
    Ok(out)
}

/// Flat input index for every flat output index, or `None` when shapes agree.
fn index_map(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    if out == input {
        return None;
    }
    let numel: usize = out.iter().product();
    let inel: usize = input.iter().product();
    // fast path: input is a suffix of the output (bias-style broadcast)
    if out.ends_with(input) {
        return Some((0..numel).map(|o| o % inel.max(1)).collect());
    }
    let n = out.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        let oi = i + n - input.len();
        strides[oi] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; n];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..n).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Some(map)
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_rows<T: Real>(x: &[T], c: usize, log: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if c == 0 {
        return out;
    }
    for (row, o) in x.chunks(c).zip(out.chunks_mut(c)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            sum += *oi;
        }
        if log {
            let lse = sum.ln();
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = xi - max - lse;
            }
        } else {
            for oi in o.iter_mut() {
                *oi = *oi / sum;
            }
        }
    }
    out
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward rules (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    /// Stops gradient flow: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Option<Vec<usize>>, Option<Vec<usize>>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let ma = index_map(&out_shape, &sa);
        let mb = index_map(&out_shape, &sb);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let numel: usize = out_shape.iter().product();
        let data = (0..numel)
            .map(|o| {
                let x = va[ma.as_ref().map_or(o, |m| m[o])];
                let y = vb[mb.as_ref().map_or(o, |m| m[o])];
                f(x, y)
            })
            .collect();
        Ok((Tensor::new(out_shape, data)?, ma, mb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b, ma, mb), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b, ma, mb), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b, ma, mb), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| x + s).collect(),
        };
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| x * s).collect(),
        };
        self.push(t, Op::MulScalar(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -T::one())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, T::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.unary(a, T::ln);
        self.push(t, Op::Log(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.unary(a, gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// `[.., m, k] @ [k, n]` or batched `[b, m, k] @ [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let b_batched = sb.len() > 2;
        if k != kb || (b_batched && sb[..sb.len() - 2] != *lead) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            if !b_batched {
                // fold leading dims into rows
                T::gemm(batch * m, k, n, T::one(), va, (k, 1), vb, (n, 1), T::zero(), &mut out, (n, 1));
            } else {
                for i in 0..batch {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        &va[i * m * k..(i + 1) * m * k],
                        (k, 1),
                        &vb[i * k * n..(i + 1) * k * n],
                        (n, 1),
                        T::zero(),
                        &mut out[i * m * n..(i + 1) * m * n],
                        (n, 1),
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch,
                b_batched,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape.clone(),
            data: softmax_rows(&v.data, v.last_dim(), false),
        };
        self.push(t, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape.clone(),
            data: softmax_rows(&v.data, v.last_dim(), true),
        };
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::lit(eps);
        let inv_c = T::lit(1.0 / c as f64);
        let (vx, vg, vb) = (self.value(x), self.value(gamma).data(), self.value(beta).data());
        let rows = vx.numel() / c.max(1);
        let mut out = vec![T::zero(); vx.numel()];
        let mut stats = Vec::with_capacity(2 * rows);
        for (row, o) in vx.data.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = T::one() / (var + eps).sqrt();
            for i in 0..c {
                o[i] = (row[i] - mean) * rstd * vg[i] + vb[i];
            }
            stats.push(mean);
            stats.push(rstd);
        }
        let t = Tensor::new(vx.shape.clone(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(invalid("embedding", format!("table must be 2-D, got {st:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(invalid("embedding", format!("id {bad} outside table of {} rows", st[0])));
        }
        let d = st[1];
        let vt = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&vt[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(t, Op::Embedding(table, ids.to_vec()), &[table]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} invalid for {s:?}"),
            ));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let vx = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&vx[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Slice { x, axis, start }, &[x]))
    }

    /// Selects rows along axis 0.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(invalid("gather_rows", "scalar input"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(invalid("gather_rows", format!("row {bad} outside {} rows", s[0])));
        }
        let inner: usize = s[1..].iter().product();
        let vx = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&vx[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// `out[r] = x[r, idx[r]]` for `x` viewed as `[rows, last_dim]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let c = v.last_dim();
        let rows = v.numel() / c.max(1);
        if idx.len() != rows {
            return Err(invalid("pick", format!("{} indices for {rows} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(invalid("pick", format!("index {bad} outside last axis {c}")));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| v.data[r * c + i]).collect();
        let shape = v.shape[..v.shape.len().saturating_sub(1)].to_vec();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Pick(x, idx.to_vec()), &[x]))
    }

    /// Adds `MASK_VALUE` wherever `visible` is false. `mask_shape` must be a
    /// suffix of the input shape; the mask broadcasts over leading axes.
    pub fn masked_fill(&mut self, x: Var, visible: &[bool], mask_shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if !s.ends_with(mask_shape) || visible.len() != mask_shape.iter().product::<usize>() {
            return Err(mismatch("masked_fill", &s, mask_shape));
        }
        let fill = T::lit(MASK_VALUE);
        let m = visible.len().max(1);
        let vx = self.value(x).data();
        let data = vx
            .iter()
            .enumerate()
            .map(|(i, &v)| if visible[i % m] { v } else { v + fill })
            .collect();
        let t = Tensor::new(s, data)?;
        Ok(self.push(t, Op::AddScalar(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.mul_scalar(s, T::lit(1.0 / n as f64))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.last_dim();
        let data = if c == 0 {
            vec![T::zero(); 0]
        } else {
            v.data.chunks(c).map(|r| r.iter().copied().sum()).collect()
        };
        let shape = v.shape[..v.shape.len().saturating_sub(1)].to_vec();
        let t = Tensor { shape, data };
        self.push(t, Op::SumLast(x), &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(invalid("transpose", format!("needs 2+ axes, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let vx = self.value(x).data();
        let mut data = vec![T::zero(); vx.len()];
        for (b, (src, dst)) in vx.chunks(r * c).zip(data.chunks_mut(r * c)).enumerate() {
            let _ = b;
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s;
        let len = shape.len();
        shape.swap(len - 1, len - 2);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(mismatch("reshape", &v.shape, shape));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Fused multi-head attention over a `[p, 3d]` q/k/v projection where
    /// query `i` attends only to the keys listed in `vis.row(i)`.
    pub fn attention(&mut self, qkv: Var, heads: usize, vis: Arc<Visibility>) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 2 || s[1] % 3 != 0 || (s[1] / 3) % heads != 0 {
            return Err(invalid("attention", format!("bad qkv shape {s:?} for {heads} heads")));
        }
        if vis.len() != s[0] {
            return Err(invalid(
                "attention",
                format!("visibility covers {} positions, sequence has {}", vis.len(), s[0]),
            ));
        }
        let (p, d) = (s[0], s[1] / 3);
        let (out, probs) = attention_forward(self.value(qkv).data(), p, d, heads, &vis);
        let t = Tensor::new(vec![p, d], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                qkv,
                heads,
                vis,
                probs,
            },
            &[qkv],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::NoGraph);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        // accumulate into an input's gradient buffer, created on first use
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, ma, mb) | Op::Sub(a, b, ma, mb) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                acc(*a, &mut |ga| scatter(ga, g, ma.as_deref(), |_, x| x));
                acc(*b, &mut |gb| scatter(gb, g, mb.as_deref(), |_, x| sign * x));
            }
            Op::Mul(a, b, ma, mb) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let at = |m: &Option<Vec<usize>>, o: usize| m.as_ref().map_or(o, |m| m[o]);
                acc(*a, &mut |ga| scatter(ga, g, ma.as_deref(), |o, x| x * vb[at(mb, o)]));
                acc(*b, &mut |gb| scatter(gb, g, mb.as_deref(), |o, x| x * va[at(ma, o)]));
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::MulScalar(a, s) => acc(*a, &mut |ga| {
                for (gi, &x) in ga.iter_mut().zip(g) {
                    *gi += x * *s;
                }
            }),
            Op::MatMul {
                a,
                b,
                batch,
                b_batched,
                m,
                k,
                n,
            } => {
                let (m, k, n, batch) = (*m, *k, *n, *batch);
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if *b_batched {
                    acc(*a, &mut |ga| {
                        for i in 0..batch {
                            T::gemm(m, n, k, T::one(), &g[i * m * n..], (n, 1), &vb[i * k * n..], (1, n), T::one(), &mut ga[i * m * k..], (k, 1));
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..batch {
                            T::gemm(k, m, n, T::one(), &va[i * m * k..], (1, k), &g[i * m * n..], (n, 1), T::one(), &mut gb[i * k * n..], (n, 1));
                        }
                    });
                } else {
                    let rows = batch * m;
                    acc(*a, &mut |ga| T::gemm(rows, n, k, T::one(), g, (n, 1), vb, (1, n), T::one(), ga, (k, 1)));
                    acc(*b, &mut |gb| T::gemm(k, rows, n, T::one(), va, (1, k), g, (n, 1), T::one(), gb, (n, 1)));
                }
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((gi, &x), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *gi += x * y;
                }
            }),
            Op::Log(a) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for ((gi, &x), &v) in ga.iter_mut().zip(g).zip(va) {
                        *gi += x / v;
                    }
                })
            }
            Op::Gelu(a) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for ((gi, &x), &v) in ga.iter_mut().zip(g).zip(va) {
                        *gi += x * gelu_grad(v);
                    }
                })
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((gi, &x), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *gi += x * y * (T::one() - y);
                }
            }),
            Op::Softmax(a) => {
                let c = out.last_dim();
                acc(*a, &mut |ga| {
                    for ((gr, yr), gir) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                        for ((gi, &x), &y) in gir.iter_mut().zip(gr).zip(yr) {
                            *gi += y * (x - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let c = out.last_dim();
                acc(*a, &mut |ga| {
                    for ((gr, yr), gir) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let total: T = gr.iter().copied().sum();
                        for ((gi, &x), &y) in gir.iter_mut().zip(gr).zip(yr) {
                            *gi += x - y.exp() * total;
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let c = out.last_dim();
                let vx = nodes[x.0].value.data();
                let vg = nodes[gamma.0].value.data();
                let inv_c = T::lit(1.0 / c as f64);
                let xhat = |r: usize, i: usize| (vx[r * c + i] - stats[2 * r]) * stats[2 * r + 1];
                let rows = vx.len() / c.max(1);
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for i in 0..c {
                            gg[i] += g[r * c + i] * xhat(r, i);
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..rows {
                        for i in 0..c {
                            gb[i] += g[r * c + i];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let rstd = stats[2 * r + 1];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for i in 0..c {
                            let d = g[r * c + i] * vg[i];
                            sum_d += d;
                            sum_dx += d * xhat(r, i);
                        }
                        for i in 0..c {
                            let d = g[r * c + i] * vg[i];
                            gx[r * c + i] += rstd * (d - inv_c * sum_d - xhat(r, i) * inv_c * sum_dx);
                        }
                    }
                });
            }
            Op::Embedding(table, ids) => {
                let d = out.last_dim();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                })
            }
            Op::Concat(inputs, axis) => {
                let (outer, inner) = outer_inner(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let width = nodes[v.0].value.shape()[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + width) * inner];
                            add_into(&mut gv[o * width * inner..(o + 1) * width * inner], src);
                        }
                    });
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = nodes[x.0].value.shape();
                let (outer, inner) = outer_inner(s, *axis);
                let width = out.shape()[*axis];
                let full = s[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        add_into(&mut gx[dst..dst + width * inner], &g[o * width * inner..(o + 1) * width * inner]);
                    }
                })
            }
            Op::GatherRows(x, idx) => {
                let inner = out.numel() / idx.len().max(1);
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * inner..(i + 1) * inner], &g[r * inner..(r + 1) * inner]);
                    }
                })
            }
            Op::Pick(x, idx) => {
                let c = nodes[x.0].value.last_dim();
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * c + i] += g[r];
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for gi in gx.iter_mut() {
                    *gi += g[0];
                }
            }),
            Op::SumLast(x) => {
                let c = nodes[x.0].value.last_dim();
                acc(*x, &mut |gx| {
                    for (r, row) in gx.chunks_mut(c.max(1)).enumerate() {
                        for gi in row.iter_mut() {
                            *gi += g[r];
                        }
                    }
                })
            }
            Op::Transpose(x) => {
                let s = out.shape();
                // out is [.., c, r]; input is [.., r, c]
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                acc(*x, &mut |gx| {
                    for (src, dst) in g.chunks(r * c).zip(gx.chunks_mut(r * c)) {
                        for i in 0..r {
                            for j in 0..c {
                                dst[i * c + j] += src[j * r + i];
                            }
                        }
                    }
                })
            }
            Op::Attention {
                qkv,
                heads,
                vis,
                probs,
            } => {
                let s = nodes[qkv.0].value.shape();
                let (p, d) = (s[0], s[1] / 3);
                let vq = nodes[qkv.0].value.data();
                let gq = attention_backward(vq, probs, g, p, d, *heads, vis);
                acc(*qkv, &mut |gx| add_into(gx, &gq));
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn scatter<T: Real>(dst: &mut [T], g: &[T], map: Option<&[usize]>, f: impl Fn(usize, T) -> T) {
    match map {
        None => {
            for (o, (d, &x)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(o, x);
            }
        }
        Some(m) => {
            for (o, &x) in g.iter().enumerate() {
                dst[m[o]] += f(o, x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_softmax_singleton_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(vec![3.7]));
        let y = g.log_softmax(x);
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn masked_softmax_is_one_hot_on_visible() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[2.0, -1.0, 5.0, 0.3]));
        let m = g.masked_fill(x, &[false, true, false, false], &[4]).unwrap();
        let y = g.softmax(m);
        let v = g.value(y).data();
        assert_eq!(v[1], 1.0);
        assert!(v[0] < 1e-9 && v[2] < 1e-9 && v[3] < 1e-9);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_on_constant_fails() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(3.0));
        assert_eq!(g.backward(c), Err(TensorError::NoGraph));
    }

    #[test]
    fn backward_on_non_scalar_fails() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let w = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let z = g.mul(y, w).unwrap();
        let l = g.sum(z);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn broadcast_bias_and_column() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let col = g.constant(t(&[2, 1], &[1.0, -1.0]));
        let y = g.add(x, b).unwrap();
        let z = g.mul(y, col).unwrap();
        assert_eq!(g.value(z).data(), &[11.0, 22.0, 33.0, -14.0, -25.0, -36.0]);
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut g = Graph::<f32>::no_grad();
        let x = g.param(Tensor::from_vec(vec![1.0]));
        let y = g.exp(x);
        assert!(!g.requires_grad(y));
    }
}
