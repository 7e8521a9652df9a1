//! Reverse-mode differentiation over a linear record of operations.
//!
//! Nodes are appended in evaluation order, so the record is already topologically
//! sorted and the backward pass is a single reverse sweep. Parameters enter the tape
//! borrowed, which keeps per-sentence tapes cheap.

use std::borrow::Cow;
use std::collections::HashMap;

use super::float::{lit, Real};
use super::tensor::Tensor;
use super::TensorError;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddRow(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Relu(Var),
    Softmax(Var),
    Log(Var),
    ClampMin(Var, F),
    Sum(Var),
    Mse { pred: Var, target: Var, mask: Option<Vec<bool>>, count: usize },
    Unfold { x: Var, kernel: usize },
    RelGather { x: Var, clip: usize },
    RelScatter { x: Var, clip: usize },
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<'a, F: Real> {
    value: Cow<'a, [F]>,
    shape: Vec<usize>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requested one.
#[derive(Debug, Clone, Default)]
pub struct Gradients<F> {
    grads: HashMap<Var, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Operation record for one forward/backward cycle.
#[derive(Debug, Default)]
pub struct Tape<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: shape.to_vec(),
        }),
    }
}

// out[m,n] = a[m,k] * b[k,n]
fn mm<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == F::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// out[k,n] = a[m,k]^T * g[m,n]
fn mm_at_b<F: Real>(a: &[F], g: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[t * n..(t + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

// out[m,k] = g[m,n] * b[k,n]^T
fn mm_a_bt<F: Real>(g: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            let mut s = F::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + t] = s;
        }
    }
    out
}

fn rel_bucket(i: usize, j: usize, clip: usize) -> usize {
    let d = j as isize - i as isize;
    let c = clip as isize;
    (d.clamp(-c, c) + c) as usize
}

fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, delta: Vec<F>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<'a, F: Real> Tape<'a, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [F]>, shape: Vec<usize>, op: Op<F>, requires_grad: bool) -> Var {
        self.consumed = false;
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Vec<F>, shape: Vec<usize>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), shape, op, rg)
    }

    /// Borrows `t` as a leaf; it receives a gradient if `t.requires_grad`.
    pub fn param(&mut self, t: &'a Tensor<F>) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Takes ownership of `t` as a leaf.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(self.push(Cow::Owned(data), shape, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = mm(self.value(a), self.value(b), m, k, n);
        Ok(self.push_op(out, vec![m, n], Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = dims2("matmul_bt", self.shape(a))?;
        let (n, k2) = dims2("matmul_bt", self.shape(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_bt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = mm_a_bt(self.value(a), self.value(b), m, k, n);
        Ok(self.push_op(out, vec![m, n], Op::MatMulBT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = dims2("transpose", self.shape(a))?;
        let src = self.value(a);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push_op(out, vec![n, m], Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(out, shape, Op::Scale(a, c), &[a])
    }

    /// Adds `bias: [n]` to every row of `a: [m, n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = dims2("add_row", self.shape(a))?;
        if self.shape(bias) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += b;
            }
        }
        Ok(self.push_op(out, vec![m, n], Op::AddRow(a, bias), &[a, bias]))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat" });
        }
        if axis > 1 {
            return Err(TensorError::Rank {
                op: "concat",
                expected: 2,
                shape: vec![axis],
            });
        }
        let (r0, c0) = dims2("concat", self.shape(parts[0]))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = dims2("concat", self.shape(p))?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += if axis == 0 { r } else { c };
        }
        let (shape, out) = if axis == 0 {
            let mut out = Vec::with_capacity(total * c0);
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
            (vec![total, c0], out)
        } else {
            let mut out = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for &p in parts {
                    let c = self.shape(p)[1];
                    out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                }
            }
            (vec![r0, total], out)
        };
        let parts = parts.to_vec();
        let inputs = parts.clone();
        Ok(self.push_op(out, shape, Op::Concat { parts, axis }, &inputs))
    }

    /// Selects rows of `table: [v, d]` by index; this is the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = dims2("gather_rows", self.shape(table))?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push_op(
            out,
            vec![ids.len(), d],
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        self.gather_rows(table, ids)
    }

    /// Normalizes each row of `x: [m, n]`, then applies `gamma, beta: [n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (m, n) = dims2("layer_norm", self.shape(x))?;
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let nf: F = lit(n as f64);
        let eps: F = lit(LAYER_NORM_EPS);
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push_op(
            out,
            vec![m, n],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(F::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(out, shape, Op::Relu(a), &[a])
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let n = shape.last().copied().unwrap_or(1);
        if n == 0 {
            return Err(TensorError::Empty { op: "softmax_lastdim" });
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        Ok(self.push_op(out, shape, Op::Softmax(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(out, shape, Op::Log(a), &[a])
    }

    /// `max(x, floor)` elementwise; the gradient is blocked where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: F) -> Var {
        let out = self.value(a).iter().map(|&x| if x > floor { x } else { floor }).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(out, shape, Op::ClampMin(a, floor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<F>();
        self.push_op(vec![s], Vec::new(), Op::Sum(a), &[a])
    }

    /// Mean squared error over the rows of `pred` whose mask entry is `true`
    /// (all rows when `row_mask` is `None`). Masked rows contribute nothing.
    pub fn mse_loss(&mut self, pred: Var, target: Var, row_mask: Option<&[bool]>) -> Result<Var, TensorError> {
        self.same_shape("mse_loss", pred, target)?;
        let shape = self.shape(pred).to_vec();
        let rows = shape.first().copied().unwrap_or(1);
        let cols = if shape.len() >= 2 { numel(&shape[1..]) } else { 1 };
        if let Some(mask) = row_mask {
            if mask.len() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "mse_loss",
                    left: shape,
                    right: vec![mask.len()],
                });
            }
        }
        let (pv, tv) = (self.value(pred), self.value(target));
        let mut sse = F::zero();
        let mut count = 0usize;
        for i in 0..rows {
            if row_mask.is_some_and(|m| !m[i]) {
                continue;
            }
            for j in 0..cols {
                let d = pv[i * cols + j] - tv[i * cols + j];
                sse += d * d;
            }
            count += cols;
        }
        if count == 0 {
            return Err(TensorError::Empty { op: "mse_loss" });
        }
        let loss = sse / lit(count as f64);
        Ok(self.push_op(
            vec![loss],
            Vec::new(),
            Op::Mse {
                pred,
                target,
                mask: row_mask.map(<[bool]>::to_vec),
                count,
            },
            &[pred, target],
        ))
    }

    /// Sliding windows of `kernel` rows over `x: [l, c]` with zero padding, giving
    /// `[l, kernel * c]`. Followed by a matmul this is a same-length 1-D convolution.
    pub fn unfold(&mut self, x: Var, kernel: usize) -> Result<Var, TensorError> {
        let (l, c) = dims2("unfold", self.shape(x))?;
        if kernel == 0 || kernel % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "unfold",
                reason: format!("kernel must be odd and positive, got {kernel}"),
            });
        }
        let pad = kernel / 2;
        let src = self.value(x);
        let mut out = vec![F::zero(); l * kernel * c];
        for i in 0..l {
            for t in 0..kernel {
                let src_row = i as isize + t as isize - pad as isize;
                if src_row < 0 || src_row >= l as isize {
                    continue;
                }
                let s = src_row as usize;
                let dst = i * kernel * c + t * c;
                out[dst..dst + c].copy_from_slice(&src[s * c..(s + 1) * c]);
            }
        }
        Ok(self.push_op(out, vec![l, kernel * c], Op::Unfold { x, kernel }, &[x]))
    }

    /// Expands per-offset scores `x: [l, 2·clip+1]` into an `[l, l]` matrix where entry
    /// `(i, j)` reads offset `clamp(j - i, -clip, clip)`.
    pub fn rel_gather(&mut self, x: Var, clip: usize) -> Result<Var, TensorError> {
        let (l, w) = dims2("rel_gather", self.shape(x))?;
        if w != 2 * clip + 1 {
            return Err(TensorError::ShapeMismatch {
                op: "rel_gather",
                left: vec![l, w],
                right: vec![l, 2 * clip + 1],
            });
        }
        let src = self.value(x);
        let mut out = vec![F::zero(); l * l];
        for i in 0..l {
            for j in 0..l {
                out[i * l + j] = src[i * w + rel_bucket(i, j, clip)];
            }
        }
        Ok(self.push_op(out, vec![l, l], Op::RelGather { x, clip }, &[x]))
    }

    /// Adjoint of [`Tape::rel_gather`]: sums each row of `x: [l, l]` into offset buckets.
    pub fn rel_scatter(&mut self, x: Var, clip: usize) -> Result<Var, TensorError> {
        let (l, l2) = dims2("rel_scatter", self.shape(x))?;
        if l != l2 {
            return Err(TensorError::ShapeMismatch {
                op: "rel_scatter",
                left: vec![l, l2],
                right: vec![l, l],
            });
        }
        let w = 2 * clip + 1;
        let src = self.value(x);
        let mut out = vec![F::zero(); l * w];
        for i in 0..l {
            for j in 0..l {
                out[i * w + rel_bucket(i, j, clip)] += src[i * l + j];
            }
        }
        Ok(self.push_op(out, vec![l, w], Op::RelScatter { x, clip }, &[x]))
    }

    /// One-hot of the row-wise argmax in the forward pass, identity in the backward pass.
    pub fn straight_through(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = shape.last().copied().unwrap_or(1).max(1);
        let mut out = vec![F::zero(); self.value(a).len()];
        for (row, orow) in self.value(a).chunks(n).zip(out.chunks_mut(n)) {
            let best = argmax(row);
            orow[best] = F::one();
        }
        self.push_op(out, shape, Op::StraightThrough(a), &[a])
    }

    /// Back-propagates from the scalar `loss` and clears the record.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "backward",
                index: loss.0,
                len: self.nodes.len(),
            });
        }
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        let mut result = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, g, &mut grads, &mut result);
        }

        self.nodes.clear();
        self.consumed = true;
        Ok(Gradients { grads: result })
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: Vec<F>,
        grads: &mut [Option<Vec<F>>],
        result: &mut HashMap<Var, Tensor<F>>,
    ) {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| -> &[F] { &self.nodes[v.0].value };
        let shp = |v: Var| -> &[usize] { &self.nodes[v.0].shape };
        match &node.op {
            Op::Leaf => {
                let t = Tensor::new(node.shape.clone(), g).expect("leaf grad shape");
                result.insert(Var(idx), t);
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[1];
                if rg(a) {
                    accumulate(&mut grads[a.0], mm_a_bt(&g, val(b), m, n, k));
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], mm_at_b(val(a), &g, m, k, n));
                }
            }
            &Op::MatMulBT(a, b) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[0];
                if rg(a) {
                    accumulate(&mut grads[a.0], mm(&g, val(b), m, n, k));
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], mm_at_b(&g, val(a), m, n, k));
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (shp(a)[0], shp(a)[1]);
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            &Op::Add(a, b) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            &Op::Sub(a, b) => {
                if rg(b) {
                    accumulate(&mut grads[b.0], g.iter().map(|&x| -x).collect());
                }
                if rg(a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect());
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.iter().map(|&x| x * c).collect());
            }
            &Op::AddRow(a, bias) => {
                let n = shp(bias)[0];
                if rg(bias) {
                    let mut d = vec![F::zero(); n];
                    for row in g.chunks(n) {
                        for (o, &x) in d.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads[bias.0], d);
                }
                if rg(a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = numel(shp(p));
                        if rg(p) {
                            accumulate(&mut grads[p.0], g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                } else {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut col = 0;
                    for &p in parts {
                        let c = shp(p)[1];
                        if rg(p) {
                            let mut d = Vec::with_capacity(rows * c);
                            for i in 0..rows {
                                d.extend_from_slice(&g[i * total + col..i * total + col + c]);
                            }
                            accumulate(&mut grads[p.0], d);
                        }
                        col += c;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = shp(*table)[1];
                let mut out = vec![F::zero(); numel(shp(*table))];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in out[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += x;
                    }
                }
                accumulate(&mut grads[table.0], out);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let gv = val(*gamma);
                if rg(*gamma) {
                    let mut d = vec![F::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    accumulate(&mut grads[gamma.0], d);
                }
                if rg(*beta) {
                    let mut d = vec![F::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                    accumulate(&mut grads[beta.0], d);
                }
                if rg(*x) {
                    let nf: F = lit(n as f64);
                    let mut d = vec![F::zero(); m * n];
                    for i in 0..m {
                        let mut sum_dh = F::zero();
                        let mut sum_dh_h = F::zero();
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            d[i * n + j] =
                                rstd[i] / nf * (nf * dh - sum_dh - xhat[i * n + j] * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            &Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(val(a))
                    .map(|(&x, &v)| if v > F::zero() { x } else { F::zero() })
                    .collect();
                accumulate(&mut grads[a.0], d);
            }
            &Op::Softmax(a) => {
                let n = node.shape.last().copied().unwrap_or(1);
                let y = &node.value;
                let mut d = vec![F::zero(); y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: F = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            &Op::Log(a) => {
                accumulate(&mut grads[a.0], g.iter().zip(val(a)).map(|(&x, &v)| x / v).collect());
            }
            &Op::ClampMin(a, floor) => {
                let d = g
                    .iter()
                    .zip(val(a))
                    .map(|(&x, &v)| if v > floor { x } else { F::zero() })
                    .collect();
                accumulate(&mut grads[a.0], d);
            }
            &Op::Sum(a) => {
                accumulate(&mut grads[a.0], vec![g[0]; numel(shp(a))]);
            }
            Op::Mse {
                pred,
                target,
                mask,
                count,
            } => {
                let shape = shp(*pred);
                let rows = shape.first().copied().unwrap_or(1);
                let cols = if shape.len() >= 2 { numel(&shape[1..]) } else { 1 };
                let scale = g[0] * lit::<F>(2.0) / lit(*count as f64);
                let (pv, tv) = (val(*pred), val(*target));
                let mut d = vec![F::zero(); pv.len()];
                for i in 0..rows {
                    if mask.as_ref().is_some_and(|m| !m[i]) {
                        continue;
                    }
                    for j in 0..cols {
                        let k = i * cols + j;
                        d[k] = (pv[k] - tv[k]) * scale;
                    }
                }
                if rg(*target) {
                    accumulate(&mut grads[target.0], d.iter().map(|&x| -x).collect());
                }
                if rg(*pred) {
                    accumulate(&mut grads[pred.0], d);
                }
            }
            &Op::Unfold { x, kernel } => {
                let (l, c) = (shp(x)[0], shp(x)[1]);
                let pad = kernel / 2;
                let mut d = vec![F::zero(); l * c];
                for i in 0..l {
                    for t in 0..kernel {
                        let src_row = i as isize + t as isize - pad as isize;
                        if src_row < 0 || src_row >= l as isize {
                            continue;
                        }
                        let s = src_row as usize;
                        let off = i * kernel * c + t * c;
                        for (o, &x) in d[s * c..(s + 1) * c].iter_mut().zip(&g[off..off + c]) {
                            *o += x;
                        }
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            &Op::RelGather { x, clip } => {
                let l = node.shape[0];
                let w = 2 * clip + 1;
                let mut d = vec![F::zero(); l * w];
                for i in 0..l {
                    for j in 0..l {
                        d[i * w + rel_bucket(i, j, clip)] += g[i * l + j];
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            &Op::RelScatter { x, clip } => {
                let l = node.shape[0];
                let w = 2 * clip + 1;
                let mut d = vec![F::zero(); l * l];
                for i in 0..l {
                    for j in 0..l {
                        d[i * l + j] = g[i * w + rel_bucket(i, j, clip)];
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            &Op::StraightThrough(a) => {
                accumulate(&mut grads[a.0], g);
            }
        }
    }
}

pub(crate) fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
