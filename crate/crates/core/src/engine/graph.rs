//! Eager expression graph with reverse-mode differentiation.
//!
//! Every operation is evaluated as soon as it is recorded, so node values are
//! available while the graph is still being built (the trainer relies on this
//! to sample negatives from live scores). Nodes are appended in topological
//! order; [`Graph::backward`] walks them in reverse.

use rand::Rng;

use super::tensor::{strides_of, Tensor};
use super::EngineError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    IndexSelect { x: Var, indices: Vec<usize> },
    Gather { x: Var, indices: Vec<usize>, per_row: usize },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    Relu { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Transpose { x: Var, axes: (usize, usize) },
    Reshape { x: Var },
    Scale { x: Var, factor: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    MaskFill { x: Var, mask: Vec<bool> },
    ReduceSum { x: Var },
    ReduceSumLast { x: Var },
    Log { x: Var },
    Exp { x: Var },
    Sigmoid { x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::IndexSelect { .. } => "index_select",
            Op::Gather { .. } => "gather",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu { .. } => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::MaskFill { .. } => "mask_fill",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::ReduceSumLast { .. } => "reduce_sum_last",
            Op::Log { .. } => "log",
            Op::Exp { .. } => "exp",
            Op::Sigmoid { .. } => "sigmoid",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Layer-norm epsilon added to the variance.
pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Takes ownership of a leaf gradient, substituting zeros of `shape`.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads.get_mut(v.0).and_then(|g| g.take()).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant by [`Graph::backward`].
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn mismatch(&self, op: &str, detail: String) -> EngineError {
        EngineError::ShapeMismatch { node: format!("{op}#{}", self.nodes.len()), detail }
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(value, op, needs)
    }

    /// Rows of `x` along axis 0.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var, EngineError> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(self.mismatch("index_select", "cannot index a scalar".into()));
        }
        let rows = xv.shape()[0];
        let width = xv.len() / rows.max(1);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(self.mismatch("index_select", format!("index {bad} out of {rows} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&xv.data()[i * width..(i + 1) * width]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::IndexSelect { x, indices: indices.to_vec() }, needs))
    }

    /// Embedding rows of `table` for a sequence of ids.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, EngineError> {
        if self.value(table).rank() != 2 {
            return Err(self.mismatch("embedding_lookup", "table must be 2-d".into()));
        }
        self.index_select(table, ids)
    }

    /// Picks `indices[r * k + j]` from row `r` of a 2-d `x`, giving `[rows, k]`.
    pub fn gather(&mut self, x: Var, indices: &[usize], per_row: usize) -> Result<Var, EngineError> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(self.mismatch("gather", format!("expected 2-d input, got {:?}", xv.shape())));
        }
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        if indices.len() != rows * per_row {
            return Err(self.mismatch("gather", format!("{} indices for {rows} rows of {per_row}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&c| c >= cols) {
            return Err(self.mismatch("gather", format!("column {bad} out of {cols}")));
        }
        let data = indices.iter().enumerate().map(|(i, &c)| xv.data()[(i / per_row.max(1)) * cols + c]).collect();
        let value = Tensor::new(vec![rows, per_row], data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Gather { x, indices: indices.to_vec(), per_row }, needs))
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either 2-d (shared across every leading index of `a`) or has the
    /// same leading axes as `a` (batched). With `trans_b` the last two axes of
    /// `b` are read transposed.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, EngineError> {
        let layout = self.matmul_layout(a, b, trans_b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; layout.batches * layout.n * layout.m];
        layout.forward(av.data(), bv.data(), &mut out);
        let mut shape = av.shape()[..av.rank() - 1].to_vec();
        shape.push(layout.m);
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, needs))
    }

    fn matmul_layout(&self, a: Var, b: Var, trans_b: bool) -> Result<MatMulLayout, EngineError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}: operands must be at least 2-d")));
        }
        let k = sa[sa.len() - 1];
        let (bk, m) = if trans_b { (sb[sb.len() - 1], sb[sb.len() - 2]) } else { (sb[sb.len() - 2], sb[sb.len() - 1]) };
        if bk != k {
            return Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}: inner dimensions differ")));
        }
        if sb.len() == 2 {
            let rows = sa[..sa.len() - 1].iter().product();
            Ok(MatMulLayout { batches: 1, n: rows, k, m, trans_b, shared_b: true })
        } else if sb.len() == sa.len() && sb[..sb.len() - 2] == sa[..sa.len() - 2] {
            let batches = sa[..sa.len() - 2].iter().product();
            Ok(MatMulLayout { batches, n: sa[sa.len() - 2], k, m, trans_b, shared_b: false })
        } else {
            Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}: batch axes differ")))
        }
    }

    fn broadcast(&self, op: &str, a: Var, b: Var) -> Result<Broadcast, EngineError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        Broadcast::new(sa, sb).ok_or_else(|| self.mismatch(op, format!("cannot broadcast {sa:?} with {sb:?}")))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let bc = self.broadcast("add", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bc.len()];
        bc.for_each(|ia, ib, io| out[io] = av[ia] + bv[ib]);
        let value = Tensor::new(bc.out_shape.clone(), out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    /// Elementwise product with trailing-axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let bc = self.broadcast("mul", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bc.len()];
        bc.for_each(|ia, ib, io| out[io] = av[ia] * bv[ib]);
        let value = Tensor::new(bc.out_shape.clone(), out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(value, Op::SoftmaxRows { x }, needs)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, EngineError> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(
                self.mismatch("layer_norm", format!("gain {:?} / bias {:?} for width {d}", gv.shape(), bv.shape()))
            );
        }
        let rows = xv.len() / d;
        let mut normalized = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let n = (v - mean) * inv;
                normalized.push(n);
                out.push(n * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, normalized, inv_std }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu { x }, |v| v.max(0.0))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`. Outside training
    /// mode (or with `p == 0`) this is the identity and records no node.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with a caller-supplied multiplicative mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len(), "dropout mask length");
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(value, Op::Dropout { x, mask }, needs)
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, axis_a: usize, axis_b: usize) -> Result<Var, EngineError> {
        let xv = self.value(x);
        if axis_a >= xv.rank() || axis_b >= xv.rank() {
            return Err(self.mismatch("transpose", format!("axes ({axis_a},{axis_b}) of {:?}", xv.shape())));
        }
        let (shape, data) = swap_axes(xv.shape(), xv.data(), axis_a, axis_b);
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Transpose { x, axes: (axis_a, axis_b) }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, EngineError> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(self.mismatch("reshape", format!("{:?} -> {shape:?}", xv.shape())));
        }
        let value = xv.clone().reshaped(shape.to_vec());
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale { x, factor }, |v| v * factor)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, EngineError> {
        let first = match inputs.first() {
            Some(&v) => self.value(v).shape().to_vec(),
            None => return Err(self.mismatch("concat", "no inputs".into())),
        };
        if axis >= first.len() {
            return Err(self.mismatch("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(self.mismatch("concat", format!("{s:?} does not match {first:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(inputs);
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, needs))
    }

    /// Replaces elements where `mask` is true by `fill` (no gradient flows there).
    pub fn mask_fill(&mut self, x: Var, mask: Vec<bool>, fill: f64) -> Result<Var, EngineError> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(self.mismatch("mask_fill", format!("mask of {} for {:?}", mask.len(), xv.shape())));
        }
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| if m { fill } else { v }).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::MaskFill { x, mask }, needs))
    }

    /// Sum of every element, as a scalar.
    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::ReduceSum { x }, needs)
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn reduce_sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim().max(1);
        let data: Vec<f64> = xv.data().chunks(c).map(|r| r.iter().sum()).collect();
        let mut shape = xv.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = 1,
            None => shape.push(1),
        }
        let value = Tensor::new(shape, data).expect("row sums");
        let needs = self.needs(&[x]);
        self.push(value, Op::ReduceSumLast { x }, needs)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log { x }, f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp { x }, f64::exp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid { x }, sigmoid)
    }

    /// `log(sum(exp(x)))` over the last axis, shifted by the (constant) row
    /// maximum so large logits cannot overflow. Shape `[..., 1]`.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var, EngineError> {
        let xv = self.value(x);
        let c = xv.last_dim().max(1);
        let maxes: Vec<f64> =
            xv.data().chunks(c).map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let mut shape = xv.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = 1,
            None => shape.push(1),
        }
        let shift = self.constant(Tensor::new(shape, maxes)?);
        let centered = self.sub(x, shift)?;
        let e = self.exp(centered);
        let s = self.reduce_sum_last(e);
        let l = self.log(s);
        self.add(l, shift)
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, EngineError> {
        let rv = self.value(root);
        if rv.rank() != 0 {
            return Err(EngineError::NotScalar { shape: rv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::IndexSelect { x, indices } => {
                let xv = self.value(*x);
                let width = xv.len() / xv.shape()[0].max(1);
                let mut gx = Tensor::zeros(xv.shape());
                for (r, &i) in indices.iter().enumerate() {
                    let src = &g.data()[r * width..(r + 1) * width];
                    for (d, s) in gx.data_mut()[i * width..(i + 1) * width].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { x, indices, per_row } => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let mut gx = Tensor::zeros(xv.shape());
                for (i, &c) in indices.iter().enumerate() {
                    gx.data_mut()[(i / per_row) * cols + c] += g.data()[i];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let layout = self.matmul_layout(*a, *b, *trans_b).expect("layout validated on forward");
                if self.wants(*a) {
                    let mut ga = vec![0.0; av.len()];
                    layout.grad_a(g.data(), bv.data(), &mut ga);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    layout.grad_b(g.data(), av.data(), &mut gb);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
            }
            Op::Add { a, b } => {
                let bc = self.broadcast("add", *a, *b).expect("validated");
                for (v, first) in [(*a, true), (*b, false)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let shape = self.value(v).shape();
                    let gv = if shape == g.shape() {
                        g.clone()
                    } else {
                        let mut acc = Tensor::zeros(shape);
                        let d = acc.data_mut();
                        bc.for_each(|ia, ib, io| d[if first { ia } else { ib }] += g.data()[io]);
                        acc
                    };
                    self.accumulate(grads, v, gv);
                }
            }
            Op::Mul { a, b } => {
                let bc = self.broadcast("mul", *a, *b).expect("validated");
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut acc = Tensor::zeros(av.shape());
                    let d = acc.data_mut();
                    bc.for_each(|ia, ib, io| d[ia] += g.data()[io] * bv.data()[ib]);
                    self.accumulate(grads, *a, acc);
                }
                if self.wants(*b) {
                    let mut acc = Tensor::zeros(bv.shape());
                    let d = acc.data_mut();
                    bc.for_each(|ia, ib, io| d[ib] += g.data()[io] * av.data()[ia]);
                    self.accumulate(grads, *b, acc);
                }
            }
            Op::SoftmaxRows { x } => {
                let c = y.last_dim().max(1);
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
            Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                let d = y.last_dim();
                let gain_v = self.value(*gain).data();
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(y.len());
                    for (r, (gr, nr)) in g.data().chunks(d).zip(normalized.chunks(d)).enumerate() {
                        let dn: Vec<f64> = gr.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn.iter().zip(nr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        gx.extend(dn.iter().zip(nr).map(|(dni, ni)| scale * (d as f64 * dni - sum_dn - ni * sum_dn_n)));
                    }
                    self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
                }
                if self.wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for (gr, nr) in g.data().chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * nr[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::vector(gg));
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; d];
                    for gr in g.data().chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::vector(gb));
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let gx = xv.data().iter().zip(g.data()).map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 }).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
            Op::Dropout { x, mask } => {
                let gx = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
            Op::Transpose { x, axes } => {
                let (shape, data) = swap_axes(g.shape(), g.data(), axes.0, axes.1);
                self.accumulate(grads, *x, Tensor::new(shape, data).unwrap());
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(shape));
            }
            Op::Scale { x, factor } => {
                let gx = g.data().iter().map(|v| v * factor).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = y.shape()[..*axis].iter().product();
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let total_chunk = y.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let shape = self.value(v).shape().to_vec();
                    let chunk = shape[*axis] * inner;
                    if self.wants(v) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total_chunk + offset;
                            data.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        self.accumulate(grads, v, Tensor::new(shape, data).unwrap());
                    }
                    offset += chunk;
                }
            }
            Op::MaskFill { x, mask } => {
                let gx = g.data().iter().zip(mask).map(|(&a, &m)| if m { 0.0 } else { a }).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
            Op::ReduceSum { x } => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::ReduceSumLast { x } => {
                let xv = self.value(*x);
                let c = xv.last_dim().max(1);
                let mut gx = Vec::with_capacity(xv.len());
                for &gi in g.data() {
                    gx.extend(std::iter::repeat_n(gi, c));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::Log { x } => {
                let xv = self.value(*x);
                let gx = xv.data().iter().zip(g.data()).map(|(v, gi)| gi / v).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
            Op::Exp { x } => {
                let gx = y.data().iter().zip(g.data()).map(|(v, gi)| gi * v).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
            Op::Sigmoid { x } => {
                let gx = y.data().iter().zip(g.data()).map(|(s, gi)| gi * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
        }
    }

    /// Name of the operation that produced `v`, e.g. for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn swap_axes(shape: &[usize], data: &[f64], a: usize, b: usize) -> (Vec<usize>, Vec<f64>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut in_strides = strides_of(shape);
    in_strides.swap(a, b);
    let mut out = Vec::with_capacity(data.len());
    for_each_offset(&out_shape, &in_strides, |off| out.push(data[off]));
    (out_shape, out)
}

/// Visits `shape` in row-major order, yielding the offset under `strides`.
fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    if shape.contains(&0) {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    loop {
        f(off);
        let mut d = rank;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

struct Broadcast {
    out_shape: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let rank = a.len().max(b.len());
        let dim = |s: &[usize], i: usize| -> usize {
            let pad = rank - s.len();
            if i < pad {
                1
            } else {
                s[i - pad]
            }
        };
        let mut out_shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let (da, db) = (dim(a, i), dim(b, i));
            if da != db && da != 1 && db != 1 {
                return None;
            }
            out_shape.push(da.max(db));
        }
        let strides = |s: &[usize]| -> Vec<usize> {
            let own = strides_of(s);
            let pad = rank - s.len();
            (0..rank).map(|i| if i < pad || s[i - pad] == 1 { 0 } else { own[i - pad] }).collect()
        };
        Some(Self { same: a == b, sa: strides(a), sb: strides(b), out_shape })
    }

    fn len(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        if self.same {
            for i in 0..self.len() {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out_shape.len();
        let last = self.out_shape[rank - 1];
        let (la, lb) = (self.sa[rank - 1], self.sb[rank - 1]);
        let outer: usize = self.out_shape[..rank - 1].iter().product();
        let mut idx = vec![0usize; rank - 1];
        let (mut base_a, mut base_b) = (0usize, 0usize);
        for o in 0..outer {
            for k in 0..last {
                f(base_a + k * la, base_b + k * lb, o * last + k);
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                base_a += self.sa[d];
                base_b += self.sb[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                base_a -= self.sa[d] * self.out_shape[d];
                base_b -= self.sb[d] * self.out_shape[d];
                idx[d] = 0;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct MatMulLayout {
    batches: usize,
    n: usize,
    k: usize,
    m: usize,
    trans_b: bool,
    shared_b: bool,
}

impl MatMulLayout {
    fn b_stride(&self) -> usize {
        if self.shared_b {
            0
        } else {
            self.k * self.m
        }
    }

    /// Row/column strides of `b` read as a `k x m` matrix.
    fn b_as_km(&self) -> (isize, isize) {
        if self.trans_b {
            (1, self.k as isize)
        } else {
            (self.m as isize, 1)
        }
    }

    fn forward(&self, a: &[f64], b: &[f64], c: &mut [f64]) {
        let (rsb, csb) = self.b_as_km();
        for p in 0..self.batches {
            let ao = p * self.n * self.k;
            let bo = p * self.b_stride();
            let co = p * self.n * self.m;
            gemm(
                self.n,
                self.k,
                self.m,
                &a[ao..],
                (self.k as isize, 1),
                &b[bo..],
                (rsb, csb),
                &mut c[co..],
                (self.m as isize, 1),
            );
        }
    }

    /// dA = dC * B^T.
    fn grad_a(&self, gc: &[f64], b: &[f64], ga: &mut [f64]) {
        // B^T read as an m x k matrix.
        let (rs, cs) = if self.trans_b { (self.k as isize, 1) } else { (1, self.m as isize) };
        for p in 0..self.batches {
            gemm(
                self.n,
                self.m,
                self.k,
                &gc[p * self.n * self.m..],
                (self.m as isize, 1),
                &b[p * self.b_stride()..],
                (rs, cs),
                &mut ga[p * self.n * self.k..],
                (self.k as isize, 1),
            );
        }
    }

    /// dB = A^T * dC (or its transpose when `b` is read transposed). A shared
    /// `b` sums the contribution of every batch.
    fn grad_b(&self, gc: &[f64], a: &[f64], gb: &mut [f64]) {
        for p in 0..self.batches {
            let ao = p * self.n * self.k;
            let co = p * self.n * self.m;
            let bo = p * self.b_stride();
            if self.trans_b {
                // dB (m x k) = dC^T (m x n) * A (n x k)
                gemm(
                    self.m,
                    self.n,
                    self.k,
                    &gc[co..],
                    (1, self.m as isize),
                    &a[ao..],
                    (self.k as isize, 1),
                    &mut gb[bo..],
                    (self.k as isize, 1),
                );
            } else {
                // dB (k x m) = A^T (k x n) * dC (n x m)
                gemm(
                    self.k,
                    self.n,
                    self.m,
                    &a[ao..],
                    (1, self.k as isize),
                    &gc[co..],
                    (self.m as isize, 1),
                    &mut gb[bo..],
                    (self.m as isize, 1),
                );
            }
        }
    }
}

/// `C += A * B` for an `m x k` by `k x n` product under arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!((last(m, k, rsa, csa) as usize) < a.len());
    assert!((last(k, n, rsb, csb) as usize) < b.len());
    assert!((last(m, n, rsc, csc) as usize) < c.len());
    if m * k * n < 4096 {
        for i in 0..m {
            for p in 0..k {
                let av = a[(i as isize * rsa + p as isize * csa) as usize];
                for j in 0..n {
                    let bv = b[(p as isize * rsb + j as isize * csb) as usize];
                    c[(i as isize * rsc + j as isize * csc) as usize] += av * bv;
                }
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every element addressed by the
    // strides inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), rsc, csc);
    }
}
