use super::gemm::{gemm, Layout};
use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose forward value is computed outside the
/// graph and whose vector-Jacobian product is supplied by the implementor.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input (`None` when the input gets none).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64])
        -> Vec<Option<Vec<f64>>>;
}

const NO_SOURCE: usize = usize::MAX;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    MaskedFill {
        src: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn Function>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations supporting one reverse-mode sweep.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and `backward` simply walks it in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a tracked leaf; its gradient is available after `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `x[..., n] + row[n]`, broadcasting the row over all leading axes.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let n = self.value(x).last_dim();
        if self.value(row).numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(&r).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            &mut c,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, c)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Batched product `[b, m, k] · [b, k, n] -> [b, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                left: sa,
                right: sb,
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut c = vec![0.0; bs * m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    Layout::Normal,
                    &db[i * k * n..(i + 1) * k * n],
                    Layout::Normal,
                    &mut c[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let out = Tensor::new(vec![bs, m, n], c)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::BatchMatMul(a, b), ng))
    }

    /// Swaps the trailing two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::InvalidShape(s));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = transpose_trailing(self.value(x).data(), r, c);
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let n = vx.last_dim();
        let mut data = vx.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY || max.is_nan() {
                return Err(TensorError::DegenerateSoftmax { row: r });
            }
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let n = vx.last_dim();
        let mut data = vx.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY || max.is_nan() {
                return Err(TensorError::DegenerateSoftmax { row: r });
            }
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::LogSoftmax(x), ng))
    }

    /// Normalises each last-axis row to zero mean and unit (population)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument("layer_norm eps must be > 0"));
        }
        let d = self.value(x).last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let vx = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.numel() / d;
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// General indexed copy: `out[i] = src[index[i]]`, or `0` where
    /// `index[i]` is `None`. Backs embedding lookup, slicing, padding and
    /// convolution unfolding.
    pub fn gather(
        &mut self,
        src: Var,
        index: &[Option<usize>],
        shape: &[usize],
    ) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(TensorError::ValueCount {
                shape: shape.to_vec(),
                got: index.len(),
            });
        }
        let vs = self.value(src).data();
        let n = vs.len();
        let mut data = Vec::with_capacity(numel);
        let mut flat = Vec::with_capacity(numel);
        for &ix in index {
            match ix {
                Some(i) if i < n => {
                    data.push(vs[i]);
                    flat.push(i);
                }
                Some(i) => return Err(TensorError::IndexOutOfRange { index: i, len: n }),
                None => {
                    data.push(0.0);
                    flat.push(NO_SOURCE);
                }
            }
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        let ng = self.ng(src);
        Ok(self.push(out, Op::Gather { src, index: flat }, ng))
    }

    /// Row lookup `table[ids[i], :]` producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(TensorError::InvalidShape(s));
        }
        let (rows, d) = (s[0], s[1]);
        let mut index = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, len: rows });
            }
            index.extend((0..d).map(|j| Some(id * d + j)));
        }
        self.gather(table, &index, &[ids.len(), d])
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::InvalidArgument("slice range out of bounds"));
        }
        let (outer, alen, inner) = split_axis(&s, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * alen + a) * inner;
                index.extend((base..base + inner).map(Some));
            }
        }
        let mut shape = s;
        shape[axis] = len;
        self.gather(x, &index, &shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self
            .shape(*parts.first().ok_or(TensorError::InvalidArgument("empty concat"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument("concat axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let alen = self.shape(p)[axis];
                let chunk = alen * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Replaces entries where `mask` is true with `value`; those entries get
    /// no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var, TensorError> {
        if mask.len() != self.value(x).numel() {
            return Err(TensorError::ValueCount {
                shape: self.shape(x).to_vec(),
                got: mask.len(),
            });
        }
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::MaskedFill {
                src: x,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(total), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Records an externally computed value with a user-supplied gradient.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, func: Box<dyn Function>) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                func,
            },
            ng,
        )
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar root. Every tracked leaf ends up with a
    /// gradient (zeros when unreachable from the root).
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if !self.value(root).is_scalar() {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        // Accumulates into the gradient buffer of `v` if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(ga, g, 1.0));
                acc(*b, &mut |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(ga, g, 1.0));
                acc(*b, &mut |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                acc(*a, &mut |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |gx| axpy(gx, g, 1.0));
                let n = self.value(*row).numel();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n) {
                        axpy(gr, chunk, 1.0);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| axpy(gx, g, *c)),
            Op::MatMul(a, b) => {
                let vb = self.value(*b);
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let va = self.value(*a);
                let m = va.numel() / k;
                acc(*a, &mut |ga| {
                    gemm(m, n, k, g, Layout::Normal, vb.data(), Layout::Transposed, ga, true)
                });
                acc(*b, &mut |gb| {
                    gemm(k, m, n, va.data(), Layout::Transposed, g, Layout::Normal, gb, true)
                });
            }
            Op::BatchMatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                acc(*a, &mut |ga| {
                    for t in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            Layout::Normal,
                            &vb.data()[t * k * n..(t + 1) * k * n],
                            Layout::Transposed,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            true,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for t in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &va.data()[t * m * k..(t + 1) * m * k],
                            Layout::Transposed,
                            &g[t * m * n..(t + 1) * m * n],
                            Layout::Normal,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            true,
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_trailing(g, r, c);
                acc(*x, &mut |gx| axpy(gx, &back, 1.0));
            }
            Op::Reshape(x) => acc(*x, &mut |gx| axpy(gx, g, 1.0)),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((o, gi), v) in gx.iter_mut().zip(g).zip(vx) {
                        if *v > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for ((o, gi), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *o += gi * (1.0 - y * y);
                }
            }),
            Op::Softmax(x) => {
                let n = out.last_dim();
                acc(*x, &mut |gx| {
                    for ((o, gr), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            o[j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = out.last_dim();
                acc(*x, &mut |gx| {
                    for ((o, gr), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            o[j] += gr[j] - y[j].exp() * total;
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
                let gv = self.value(*gain).data();
                let d = gv.len();
                acc(*x, &mut |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += is * (gr[j] * gv[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * h[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        axpy(gb, gr, 1.0);
                    }
                });
            }
            Op::Gather { src, index } => acc(*src, &mut |gs| {
                for (gi, &ix) in g.iter().zip(index) {
                    if ix != NO_SOURCE {
                        gs[ix] += gi;
                    }
                }
            }),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let alen = self.shape(p)[*axis];
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * alen * inner;
                            axpy(&mut gp[dst..dst + alen * inner], &g[src..src + alen * inner], 1.0);
                        }
                    });
                    offset += alen;
                }
            }
            Op::MaskedFill { src, mask } => acc(*src, &mut |gs| {
                for ((o, gi), m) in gs.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *o += gi;
                    }
                }
            }),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Custom { inputs, func } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = func.backward(&vals, out, g);
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        acc(v, &mut |gv| axpy(gv, &gi, 1.0));
                    }
                }
            }
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Transposes the trailing `r×c` block of every leading index.
fn transpose_trailing(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let block = r * c;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}
