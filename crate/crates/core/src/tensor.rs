//! A small dense-array engine with tape-based reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; every operation appends a node recording its
//! inputs, and [`Tape::backward`] walks the tape in reverse to accumulate
//! gradients. A tape serves exactly one forward/backward step. Inference uses
//! a tape whose leaves do not require gradients, so nothing is propagated.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(Var, Var),
    AddBroadcast {
        a: Var,
        b: Var,
        b_strides: Vec<usize>,
        /// `b`'s shape equals `a`'s trailing dims, so `b` repeats as a block.
        tiled: bool,
    },
    Scale(Var, f64),
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Select {
        a: Var,
        axis: usize,
        index: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    rng: ChaCha8Rng,
    consumed: bool,
    record: bool,
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Calls `f(flat_out, flat_in)` for each element of an array of `shape`, where
/// `flat_in` is computed with `in_strides`.
fn for_each_strided(shape: &[usize], in_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let inner_stride = in_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut out = 0usize;
    loop {
        for i in 0..inner {
            f(out + i, base + i * inner_stride);
        }
        out += inner;
        // advance the odometer over the outer dims
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += in_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= in_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// `c = a·b (+ c)` for row-major operands, optionally reading either operand
/// transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: lengths checked above; strides describe in-bounds row-major views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl<'a> Tape<'a> {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            consumed: false,
            record: true,
        }
    }

    /// A tape whose leaves never require gradients.
    pub fn inference(seed: u64) -> Self {
        Self {
            record: false,
            ..Self::new(seed)
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Places an owned tensor on the tape.
    pub fn leaf(&mut self, t: DenseTensor) -> Var {
        let needs = t.requires_grad && self.record;
        self.push(t.shape, t.data, Op::Leaf, needs)
    }

    /// Places a borrowed tensor on the tape without copying it.
    pub fn leaf_ref(&mut self, t: &'a DenseTensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Cow::Borrowed(&t.data),
            op: Op::Leaf,
            needs_grad: t.requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = DenseTensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn to_tensor(&self, v: Var) -> DenseTensor {
        let node = &self.nodes[v.0];
        DenseTensor {
            shape: node.shape.clone(),
            data: node.value.to_vec(),
            requires_grad: node.needs_grad,
            grad: self.grad(v).map(|g| g.to_vec()),
        }
    }

    /// Batched matrix product. `a` is `[..., m, k]`; `b` is either `[..., k, n]`
    /// with the same leading dims or a shared `[k, n]` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && lead != &sb[..sb.len() - 2] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            if shared_rhs {
                gemm(batch * m, k, n, av, false, bv, false, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), needs))
    }

    /// `a + b` where `b` broadcasts to `a`'s shape (right-aligned; each of
    /// `b`'s dims is 1 or equal to `a`'s).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() {
            return Err(shape_err("add_broadcast", &sa, &sb));
        }
        let offset = sa.len() - sb.len();
        let own = strides_of(&sb);
        let mut b_strides = vec![0; sa.len()];
        for (i, &d) in sb.iter().enumerate() {
            if d == sa[offset + i] {
                b_strides[offset + i] = own[i];
            } else if d != 1 {
                return Err(shape_err("add_broadcast", &sa, &sb));
            }
        }
        let tiled = sa[offset..] == sb[..];
        let mut out = self.value(a).to_vec();
        {
            let bv = self.value(b);
            if tiled && !bv.is_empty() {
                for block in out.chunks_mut(bv.len()) {
                    block.iter_mut().zip(bv).for_each(|(o, x)| *o += x);
                }
            } else {
                for_each_strided(&sa, &b_strides, |o, i| out[o] += bv[i]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa, out, Op::AddBroadcast { a, b, b_strides, tiled }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor), needs)
    }

    /// General axis permutation: output dim `i` is input dim `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("axes {axes:?} do not permute shape {sa:?}"),
            });
        }
        let in_strides = strides_of(&sa);
        let out_shape: Vec<usize> = axes.iter().map(|&x| sa[x]).collect();
        let gather: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
        let mut out = vec![0.0; sa.iter().product()];
        {
            let av = self.value(a);
            for_each_strided(&out_shape, &gather, |o, i| out[o] = av[i]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            out_shape,
            out,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            needs,
        ))
    }

    pub fn transpose_last_two(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::Invalid {
                op: "transpose_last_two",
                msg: format!("needs rank >= 2, got {:?}", self.shape(a)),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Rows of a `[vocab, dim]` table for zero-based `ids`; result `[ids, dim]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                msg: format!("table must be 2-D, got {st:?}"),
            });
        }
        let (vocab, dim) = (st[0], st[1]);
        if let Some(pos) = ids.iter().position(|&i| i >= vocab) {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                msg: format!("id {} at index {pos} outside vocabulary of {vocab}", ids[pos]),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn softmax_last_dim(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let needs = self.needs(a);
        self.push(shape, out, Op::Softmax(a), needs)
    }

    /// Normalizes each row of the last dim, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        let xv = self.value(x);
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * g[i % d] + b[i % d])
            .collect();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            shape,
            out,
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

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), needs)
    }

    /// Inverted dropout. Identity when `training` is false or `p` is 0.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let cut = (p * 4_294_967_296.0) as u64;
        let mask: Vec<f64> = (0..n)
            .map(|_| if (self.rng.random::<u32>() as u64) < cut { 0.0 } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let needs = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Dropout { a, mask }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            })?)
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Slice at `index` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || index >= sa[axis] {
            return Err(TensorError::Invalid {
                op: "select",
                msg: format!("index {index} on axis {axis} of {sa:?}"),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * sa[axis] + index) * inner;
            out.extend_from_slice(&av[start..start + inner]);
        }
        let mut shape = sa;
        shape.remove(axis);
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::Select { a, axis, index }, needs))
    }

    /// Mean softmax cross entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} with {c} classes"),
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= labels.len().max(1) as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node<'a>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !nodes[v.0].needs_grad {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
        f(g);
    }

    /// Back-propagates from a scalar `loss`, filling gradients for every node
    /// that depends on a leaf requiring them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if self.consumed {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "tape already consumed by an earlier backward pass".into(),
            });
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    shared_rhs,
                } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    if *shared_rhs {
                        Self::accumulate(grads, nodes, *a, |ga| gemm(batch * m, n, k, &dy, false, bv, true, ga, true));
                        Self::accumulate(grads, nodes, *b, |gb| gemm(k, batch * m, n, av, true, &dy, false, gb, true));
                    } else {
                        Self::accumulate(grads, nodes, *a, |ga| {
                            for i in 0..batch {
                                gemm(
                                    m,
                                    n,
                                    k,
                                    &dy[i * m * n..(i + 1) * m * n],
                                    false,
                                    &bv[i * k * n..(i + 1) * k * n],
                                    true,
                                    &mut ga[i * m * k..(i + 1) * m * k],
                                    true,
                                );
                            }
                        });
                        Self::accumulate(grads, nodes, *b, |gb| {
                            for i in 0..batch {
                                gemm(
                                    k,
                                    m,
                                    n,
                                    &av[i * m * k..(i + 1) * m * k],
                                    true,
                                    &dy[i * m * n..(i + 1) * m * n],
                                    false,
                                    &mut gb[i * k * n..(i + 1) * k * n],
                                    true,
                                );
                            }
                        });
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        Self::accumulate(grads, nodes, *v, |g| g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d));
                    }
                }
                Op::AddBroadcast { a, b, b_strides, tiled } => {
                    Self::accumulate(grads, nodes, *a, |g| g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d));
                    Self::accumulate(grads, nodes, *b, |g| {
                        if *tiled && !g.is_empty() {
                            for block in dy.chunks(g.len()) {
                                g.iter_mut().zip(block).for_each(|(g, d)| *g += d);
                            }
                        } else {
                            for_each_strided(&node.shape, b_strides, |o, i| g[i] += dy[o]);
                        }
                    });
                }
                Op::Scale(a, f) => {
                    Self::accumulate(grads, nodes, *a, |g| g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d * f));
                }
                Op::Permute { a, axes } => {
                    let in_shape = &nodes[a.0].shape;
                    let in_strides = strides_of(in_shape);
                    let gather: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
                    Self::accumulate(grads, nodes, *a, |g| {
                        for_each_strided(&node.shape, &gather, |o, i| g[i] += dy[o]);
                    });
                }
                Op::Embedding { table, ids } => {
                    let dim = node.shape[1];
                    Self::accumulate(grads, nodes, *table, |g| {
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..dim {
                                g[id * dim + j] += dy[r * dim + j];
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let d = *node.shape.last().unwrap_or(&1);
                    let y = &node.value;
                    Self::accumulate(grads, nodes, *a, |g| {
                        for ((gr, yr), dr) in g.chunks_mut(d).zip(y.chunks(d)).zip(dy.chunks(d)) {
                            let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                gr[j] += yr[j] * (dr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = *node.shape.last().unwrap_or(&1);
                    let gv = &nodes[gain.0].value;
                    Self::accumulate(grads, nodes, *x, |gx| {
                        let mut dxhat = vec![0.0; d];
                        for (r, is) in inv_std.iter().enumerate() {
                            let rs = r * d;
                            let mut sum = 0.0;
                            let mut dot = 0.0;
                            for j in 0..d {
                                dxhat[j] = dy[rs + j] * gv[j];
                                sum += dxhat[j];
                                dot += dxhat[j] * xhat[rs + j];
                            }
                            for j in 0..d {
                                gx[rs + j] += is / d as f64 * (d as f64 * dxhat[j] - sum - xhat[rs + j] * dot);
                            }
                        }
                    });
                    Self::accumulate(grads, nodes, *gain, |gg| {
                        for (i, (dyi, h)) in dy.iter().zip(xhat).enumerate() {
                            gg[i % d] += dyi * h;
                        }
                    });
                    Self::accumulate(grads, nodes, *bias, |gb| {
                        for (i, dyi) in dy.iter().enumerate() {
                            gb[i % d] += dyi;
                        }
                    });
                }
                Op::Gelu(a) => {
                    let xv = &nodes[a.0].value;
                    Self::accumulate(grads, nodes, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += dy[i] * gelu_grad(xv[i]);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    Self::accumulate(grads, nodes, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += dy[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                Op::Dropout { a, mask } => {
                    Self::accumulate(grads, nodes, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += dy[i] * mask[i];
                        }
                    });
                }
                Op::Reshape(a) => {
                    Self::accumulate(grads, nodes, *a, |g| g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d));
                }
                Op::Concat { parts, axis } => {
                    let outer: usize = node.shape[..*axis].iter().product();
                    let inner: usize = node.shape[axis + 1..].iter().product();
                    let row = node.shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p.0].shape[*axis] * inner;
                        Self::accumulate(grads, nodes, p, |g| {
                            for o in 0..outer {
                                for j in 0..len {
                                    g[o * len + j] += dy[o * row + offset + j];
                                }
                            }
                        });
                        offset += len;
                    }
                }
                Op::Select { a, axis, index } => {
                    let sa = &nodes[a.0].shape;
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    Self::accumulate(grads, nodes, *a, |g| {
                        for o in 0..outer {
                            let start = (o * sa[*axis] + index) * inner;
                            for j in 0..inner {
                                g[start + j] += dy[o * inner + j];
                            }
                        }
                    });
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = nodes[logits.0].shape[1];
                    let scale = dy[0] / labels.len().max(1) as f64;
                    Self::accumulate(grads, nodes, *logits, |g| {
                        for (r, &label) in labels.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                g[r * c + j] += scale * (probs[r * c + j] - onehot);
                            }
                        }
                    });
                }
            }
            grads[idx] = Some(dy);
        }
        Ok(())
    }
}

/// Relative error used by gradient checks; magnitudes below `1e-6` are
/// compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of `loss_fn` with central differences for
/// every element of every input. Returns the worst relative error.
pub fn gradient_check<F>(inputs: &[DenseTensor], step: f64, loss_fn: F) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[DenseTensor]| -> Result<f64> {
        let mut tape = Tape::new(0);
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss)[0])
    };
    let mut tape = Tape::new(0);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().param())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[ti]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        for e in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data[e] += step;
            let mut minus = inputs.to_vec();
            minus[ti].data[e] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            worst = worst.max(relative_error(analytic[e], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: &[usize], seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        DenseTensor::new(shape.to_vec(), data).unwrap()
    }

    /// Reduces any tensor to a scalar with non-uniform weights so every
    /// element's gradient differs.
    fn weighted_sum(tape: &mut Tape<'_>, v: Var) -> Result<Var> {
        let n = tape.value(v).len();
        let flat = tape.reshape(v, &[1, n])?;
        let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37).sin() + 0.1).collect();
        let wv = tape.constant(&[n, 1], w)?;
        let out = tape.matmul(flat, wv)?;
        tape.reshape(out, &[])
    }

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        let mut tape = Tape::new(0);
        let x = tape.leaf(DenseTensor::zeros(&[1, 4]));
        let y = tape.softmax_last_dim(x);
        assert_eq!(tape.value(y), &[0.25; 4]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new(0);
        let mut eye = DenseTensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data[i * 4] = 1.0;
        }
        let x = random(&[3, 2], 1);
        let e = tape.leaf(eye);
        let xv = tape.leaf(x.clone());
        let y = tape.matmul(e, xv).unwrap();
        assert_eq!(tape.value(y), &x.data[..]);
    }

    #[test]
    fn cross_entropy_gradient_at_zero_logits() {
        let mut tape = Tape::new(0);
        let l = tape.leaf(DenseTensor::zeros(&[1, 2]).param());
        let loss = tape.cross_entropy(l, &[0]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(l).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
        assert!((tape.value(loss)[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new(0);
        let a = tape.leaf(DenseTensor::zeros(&[2, 3]));
        let b = tape.leaf(DenseTensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new(0);
        let a = tape.leaf(DenseTensor::zeros(&[2]).param());
        assert_eq!(tape.backward(a), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn tape_is_single_use() {
        let mut tape = Tape::new(0);
        let a = tape.leaf(DenseTensor::filled(&[], 2.0).param());
        let l = tape.scale(a, 3.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a), Some(&[3.0][..]));
        assert!(tape.backward(l).is_err());
    }

    #[test]
    fn embedding_rejects_bad_id() {
        let mut tape = Tape::new(0);
        let t = tape.leaf(DenseTensor::zeros(&[4, 2]));
        let err = tape.embedding_lookup(t, &[1, 4]).unwrap_err();
        assert!(err.to_string().contains("id 4 at index 1"));
    }

    #[test]
    fn dropout_identity_and_reproducible() {
        let x = random(&[8, 8], 3);
        let mut tape = Tape::new(5);
        let v = tape.leaf(x.clone());
        let same = tape.dropout(v, 0.0, true).unwrap();
        assert_eq!(tape.value(same), &x.data[..]);
        let off = tape.dropout(v, 0.5, false).unwrap();
        assert_eq!(tape.value(off), &x.data[..]);
        let run = |seed| {
            let mut t = Tape::new(seed);
            let v = t.leaf(x.clone());
            let d = t.dropout(v, 0.3, true).unwrap();
            t.value(d).to_vec()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn grad_matmul_batched_and_shared() {
        let a = random(&[2, 3, 4], 1);
        let b = random(&[2, 4, 2], 2);
        let e = gradient_check(&[a.clone(), b], STEP, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        })
        .unwrap();
        assert!(e < TOL, "{e}");
        let w = random(&[4, 3], 3);
        let e = gradient_check(&[a, w], STEP, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        })
        .unwrap();
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn grad_elementwise_ops() {
        let a = random(&[3, 4], 4);
        let b = random(&[3, 4], 5);
        let bias = random(&[4], 6);
        let e = gradient_check(&[a.clone(), b, bias], STEP, |t, v| {
            let s = t.add(v[0], v[1])?;
            let s = t.add_broadcast(s, v[2])?;
            let s = t.scale(s, 0.7);
            let g = t.gelu(s);
            let h = t.tanh(g);
            weighted_sum(t, h)
        })
        .unwrap();
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn grad_broadcast_middle_dims() {
        let a = random(&[2, 3, 2, 4], 7);
        let mask = random(&[2, 1, 1, 4], 8);
        let e = gradient_check(&[a, mask], STEP, |t, v| {
            let y = t.add_broadcast(v[0], v[1])?;
            weighted_sum(t, y)
        })
        .unwrap();
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn grad_softmax_and_layer_norm() {
        let x = random(&[3, 4], 9);
        let g = random(&[4], 10);
        let b = random(&[4], 11);
        let e = gradient_check(&[x.clone()], STEP, |t, v| {
            let y = t.softmax_last_dim(v[0]);
            weighted_sum(t, y)
        })
        .unwrap();
        assert!(e < TOL, "{e}");
        let e = gradient_check(&[x, g, b], STEP, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?;
            weighted_sum(t, y)
        })
        .unwrap();
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn grad_shape_ops() {
        let a = random(&[2, 3, 4], 12);
        let b = random(&[2, 1, 4], 13);
        let e = gradient_check(&[a.clone()], STEP, |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let q = t.transpose_last_two(p)?;
            let r = t.reshape(q, &[6, 4])?;
            weighted_sum(t, r)
        })
        .unwrap();
        assert!(e < TOL, "{e}");
        let e = gradient_check(&[a.clone(), b], STEP, |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let s = t.select(c, 1, 2)?;
            let s2 = t.select(c, 1, 3)?;
            let both = t.concat(&[s, s2], 0)?;
            weighted_sum(t, both)
        })
        .unwrap();
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn grad_embedding_and_cross_entropy() {
        let table = random(&[5, 3], 14);
        let proj = random(&[3, 2], 15);
        let e = gradient_check(&[table, proj], STEP, |t, v| {
            let rows = t.embedding_lookup(v[0], &[4, 0, 4, 2])?;
            let logits = t.matmul(rows, v[1])?;
            t.cross_entropy(logits, &[1, 0, 0, 1])
        })
        .unwrap();
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn grad_dropout_with_fixed_mask() {
        let x = random(&[4, 4], 16);
        let e = gradient_check(&[x], STEP, |t, v| {
            let d = t.dropout(v[0], 0.25, true)?;
            weighted_sum(t, d)
        })
        .unwrap();
        assert!(e < TOL, "{e}");
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized(vals in proptest::collection::vec(-30.0..30.0f64, 12)) {
            let mut tape = Tape::new(0);
            let x = tape.constant(&[3, 4], vals).unwrap();
            let y = tape.softmax_last_dim(x);
            for row in tape.value(y).chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&p| p > 0.0));
            }
        }

        #[test]
        fn layer_norm_standardizes(vals in proptest::collection::vec(-100.0..100.0f64, 16)) {
            prop_assume!(vals[..8].iter().any(|v| (v - vals[0]).abs() > 1e-3));
            prop_assume!(vals[8..].iter().any(|v| (v - vals[8]).abs() > 1e-3));
            let mut tape = Tape::new(0);
            let x = tape.constant(&[2, 8], vals).unwrap();
            let g = tape.leaf(DenseTensor::filled(&[8], 1.0));
            let b = tape.leaf(DenseTensor::zeros(&[8]));
            let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
            for row in tape.value(y).chunks(8) {
                let mean = row.iter().sum::<f64>() / 8.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                prop_assert!(mean.abs() < 1e-7);
                prop_assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }
}
