//! Reverse-mode automatic differentiation over a fixed op set.
//!
//! A `Tape` is an append-only arena of nodes. Forward values are computed
//! eagerly as ops are recorded; `backward` walks the arena in reverse and
//! accumulates gradients into every node that (transitively) depends on a
//! tracked leaf. Everything is single-threaded and deterministic: the same
//! sequence of ops on the same inputs produces bitwise-identical values
//! and gradients.

use super::tensor::{Real, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a strided 2-D convolution on square inputs.
#[derive(Clone, Copy, Debug)]
pub struct ConvMeta {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvMeta {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
    /// Flattened output width per batch row.
    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `[m,n] + [1,n]`, bias broadcast over rows.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    ClampMin(Var, f64),
    /// `[m,n] -> [m,1]`.
    RowSum(Var),
    /// `[m,n] -> [1,1]`.
    MeanAll(Var),
    SumAll(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    /// `[1,n]` repeated to `[m,n]`.
    BroadcastRows(Var, usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        meta: ConvMeta,
    },
}

struct Node<R: Real> {
    op: Op,
    value: Tensor<R>,
    needs_grad: bool,
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf whose gradient will be computed.
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Re-insert a node's current value as a constant (gradient stop).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), value, ng)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        let (m, n) = (av.rows(), av.cols());
        assert_eq!(bv.len(), n, "bias length {} vs cols {}", bv.len(), n);
        let mut data = av.data().to_vec();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += bv.data()[c];
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push(Op::AddBias(a, bias), Tensor::from_rows(m, n, data), ng)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(R, R) -> R) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(op, value, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(R) -> R) -> Var {
        let value = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(op, value, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = R::from_f64(c);
        self.unary(a, Op::Scale(a, c), |x| x * k)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let k = R::from_f64(c);
        self.unary(a, Op::Offset(a), |x| x + k)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (R::from_f64(lo), R::from_f64(hi));
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max_val(l).min_val(h))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let l = R::from_f64(lo);
        self.unary(a, Op::ClampMin(a, lo), |x| x.max_val(l))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let data = (0..m)
            .map(|r| {
                let mut s = R::ZERO;
                for c in 0..n {
                    s += av.data()[r * n + c];
                }
                s
            })
            .collect();
        let ng = self.needs(a);
        self.push(Op::RowSum(a), Tensor::from_rows(m, 1, data), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len();
        let mut s = R::ZERO;
        for &x in av.data() {
            s += x;
        }
        let value = Tensor::scalar(s / R::from_f64(n as f64));
        let ng = self.needs(a);
        self.push(Op::MeanAll(a), value, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut s = R::ZERO;
        for &x in av.data() {
            s += x;
        }
        let ng = self.needs(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = av.rows();
        assert_eq!(m, bv.rows(), "concat_cols row mismatch");
        let (p, q) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(&av.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&bv.data()[r * q..(r + 1) * q]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a, b), Tensor::from_rows(m, p + q, data), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&av.data()[r * n + start..r * n + start + len]);
        }
        let ng = self.needs(a);
        self.push(Op::SliceCols(a, start, len), Tensor::from_rows(m, len, data), ng)
    }

    /// Stack rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows col mismatch");
            rows += pv.rows();
            data.extend_from_slice(pv.data());
            ng |= self.needs(p);
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::from_rows(rows, cols, data),
            ng,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        assert!(start + len <= m, "slice_rows out of range");
        let data = av.data()[start * n..(start + len) * n].to_vec();
        let ng = self.needs(a);
        self.push(Op::SliceRows(a, start, len), Tensor::from_rows(len, n, data), ng)
    }

    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "broadcast_rows expects a single row");
        let n = av.cols();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(av.data());
        }
        let ng = self.needs(a);
        self.push(Op::BroadcastRows(a, m), Tensor::from_rows(m, n, data), ng)
    }

    /// Strided convolution. Input rows are flattened `[c, y, x]` images;
    /// weight is `[in_c*k*k, out_c]`; bias is `[1, out_c]`. Output rows are
    /// flattened `[out_c, oy, ox]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, meta: ConvMeta) -> Var {
        let value = conv_forward(self.value(input), self.value(weight), self.value(bias), &meta);
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                meta,
            },
            value,
            ng,
        )
    }

    /// Gradients of a scalar node with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Gradients<R> {
        assert_eq!(self.value(loss).len(), 1, "backward target must be scalar");
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(R::ONE));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // dA = g . B^T ; dB = A^T . g
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.needs(*a) {
                    let da = grads[a.0].get_or_insert_with(|| Tensor::zeros(&[m, k]));
                    unsafe {
                        R::gemm(
                            m,
                            n,
                            k,
                            R::ONE,
                            g.data().as_ptr(),
                            n as isize,
                            1,
                            bv.data().as_ptr(),
                            1,
                            n as isize, // B^T via swapped strides
                            R::ONE,
                            da.data_mut().as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
                if self.needs(*b) {
                    let db = grads[b.0].get_or_insert_with(|| Tensor::zeros(&[k, n]));
                    unsafe {
                        R::gemm(
                            k,
                            m,
                            n,
                            R::ONE,
                            av.data().as_ptr(),
                            1,
                            k as isize, // A^T
                            g.data().as_ptr(),
                            n as isize,
                            1,
                            R::ONE,
                            db.data_mut().as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(*a, grads, |dst| add_into(dst, g.data()));
                if self.needs(*bias) {
                    let n = self.nodes[bias.0].value.len();
                    let db = grads[bias.0].get_or_insert_with(|| Tensor::from_rows(1, n, vec![R::ZERO; n]));
                    let m = g.rows();
                    for r in 0..m {
                        for c in 0..n {
                            db.data_mut()[c] += g.data()[r * n + c];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grads, |dst| add_into(dst, g.data()));
                self.accumulate(*b, grads, |dst| add_into(dst, g.data()));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grads, |dst| add_into(dst, g.data()));
                self.accumulate(*b, grads, |dst| {
                    for (d, &gi) in dst.iter_mut().zip(g.data()) {
                        *d -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                if a == b {
                    // square: d = 2 x g
                    let av = self.nodes[a.0].value.data().to_vec();
                    self.accumulate(*a, grads, |dst| {
                        for ((d, &x), &gi) in dst.iter_mut().zip(&av).zip(g.data()) {
                            *d += (x + x) * gi;
                        }
                    });
                } else {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    self.accumulate(*a, grads, |dst| {
                        for ((d, &y), &gi) in dst.iter_mut().zip(bv).zip(g.data()) {
                            *d += y * gi;
                        }
                    });
                    self.accumulate(*b, grads, |dst| {
                        for ((d, &x), &gi) in dst.iter_mut().zip(av).zip(g.data()) {
                            *d += x * gi;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                let k = R::from_f64(*c);
                self.accumulate(*a, grads, |dst| {
                    for (d, &gi) in dst.iter_mut().zip(g.data()) {
                        *d += k * gi;
                    }
                });
            }
            Op::Offset(a) => {
                self.accumulate(*a, grads, |dst| add_into(dst, g.data()));
            }
            Op::Silu(a) => {
                let xs = self.nodes[a.0].value.data();
                self.accumulate(*a, grads, |dst| {
                    for ((d, &x), &gi) in dst.iter_mut().zip(xs).zip(g.data()) {
                        let s = sigmoid(x);
                        *d += gi * s * (R::ONE + x * (R::ONE - s));
                    }
                });
            }
            Op::Sigmoid(a) => {
                let ys = node.value.data();
                self.accumulate(*a, grads, |dst| {
                    for ((d, &y), &gi) in dst.iter_mut().zip(ys).zip(g.data()) {
                        *d += gi * y * (R::ONE - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let ys = node.value.data();
                self.accumulate(*a, grads, |dst| {
                    for ((d, &y), &gi) in dst.iter_mut().zip(ys).zip(g.data()) {
                        *d += gi * (R::ONE - y * y);
                    }
                });
            }
            Op::Exp(a) => {
                let ys = node.value.data();
                self.accumulate(*a, grads, |dst| {
                    for ((d, &y), &gi) in dst.iter_mut().zip(ys).zip(g.data()) {
                        *d += gi * y;
                    }
                });
            }
            Op::Softplus(a) => {
                let xs = self.nodes[a.0].value.data();
                self.accumulate(*a, grads, |dst| {
                    for ((d, &x), &gi) in dst.iter_mut().zip(xs).zip(g.data()) {
                        *d += gi * sigmoid(x);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (R::from_f64(*lo), R::from_f64(*hi));
                let xs = self.nodes[a.0].value.data();
                self.accumulate(*a, grads, |dst| {
                    for ((d, &x), &gi) in dst.iter_mut().zip(xs).zip(g.data()) {
                        if x > l && x < h {
                            *d += gi;
                        }
                    }
                });
            }
            Op::ClampMin(a, lo) => {
                let l = R::from_f64(*lo);
                let xs = self.nodes[a.0].value.data();
                self.accumulate(*a, grads, |dst| {
                    for ((d, &x), &gi) in dst.iter_mut().zip(xs).zip(g.data()) {
                        if x > l {
                            *d += gi;
                        }
                    }
                });
            }
            Op::RowSum(a) => {
                let n = self.nodes[a.0].value.cols();
                self.accumulate(*a, grads, |dst| {
                    for (r, &gi) in g.data().iter().enumerate() {
                        for d in &mut dst[r * n..(r + 1) * n] {
                            *d += gi;
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len();
                let gi = g.item() / R::from_f64(n as f64);
                self.accumulate(*a, grads, |dst| {
                    for d in dst {
                        *d += gi;
                    }
                });
            }
            Op::SumAll(a) => {
                let gi = g.item();
                self.accumulate(*a, grads, |dst| {
                    for d in dst {
                        *d += gi;
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let p = self.nodes[a.0].value.cols();
                let q = self.nodes[b.0].value.cols();
                let m = g.rows();
                self.accumulate(*a, grads, |dst| {
                    for r in 0..m {
                        for c in 0..p {
                            dst[r * p + c] += g.data()[r * (p + q) + c];
                        }
                    }
                });
                self.accumulate(*b, grads, |dst| {
                    for r in 0..m {
                        for c in 0..q {
                            dst[r * q + c] += g.data()[r * (p + q) + p + c];
                        }
                    }
                });
            }
            Op::SliceCols(a, start, len) => {
                let n = self.nodes[a.0].value.cols();
                let m = g.rows();
                self.accumulate(*a, grads, |dst| {
                    for r in 0..m {
                        for c in 0..*len {
                            dst[r * n + start + c] += g.data()[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                let n = g.cols();
                for &p in parts {
                    let pr = self.nodes[p.0].value.rows();
                    let seg = &g.data()[row * n..(row + pr) * n];
                    self.accumulate(p, grads, |dst| add_into(dst, seg));
                    row += pr;
                }
            }
            Op::SliceRows(a, start, len) => {
                let n = self.nodes[a.0].value.cols();
                self.accumulate(*a, grads, |dst| {
                    add_into(&mut dst[start * n..(start + len) * n], &g.data()[..len * n]);
                });
            }
            Op::BroadcastRows(a, m) => {
                let n = self.nodes[a.0].value.cols();
                self.accumulate(*a, grads, |dst| {
                    for r in 0..*m {
                        for c in 0..n {
                            dst[c] += g.data()[r * n + c];
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                meta,
            } => {
                conv_backward(
                    self,
                    *input,
                    *weight,
                    *bias,
                    meta,
                    g,
                    grads,
                );
            }
        }
    }

    fn accumulate(&self, v: Var, grads: &mut [Option<Tensor<R>>], f: impl FnOnce(&mut [R])) {
        if !self.needs(v) {
            return;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
        f(slot.data_mut());
    }
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::ONE / (R::ONE + (-x).exp())
}

/// Overflow-safe ln(1 + e^x).
#[inline]
fn softplus<R: Real>(x: R) -> R {
    x.max_val(R::ZERO) + (-x.abs()).exp().ln_1p()
}

/// Result of a backward pass; indexed by the `Var`s of the originating tape.
pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss w.r.t. `v`; zero-filled if the node was never
    /// reached (e.g. a parameter unused by this loss).
    pub fn get(&self, v: Var, shape: &[usize]) -> Tensor<R> {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads[v.0].as_ref()
    }
}

fn conv_forward<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    bias: &Tensor<R>,
    meta: &ConvMeta,
) -> Tensor<R> {
    let batch = input.rows();
    assert_eq!(
        input.cols(),
        meta.in_c * meta.in_h * meta.in_w,
        "conv input width mismatch"
    );
    assert_eq!(weight.rows(), meta.patch_len(), "conv weight rows mismatch");
    assert_eq!(weight.cols(), meta.out_c, "conv weight cols mismatch");
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let positions = oh * ow;

    let col = im2col(input, meta);
    // [batch*positions, patch] x [patch, out_c]
    let prod = col.matmul(weight);
    // Rearrange [b*pos, out_c] -> rows of [out_c, oh, ow], adding bias.
    let mut out = Tensor::zeros(&[batch, meta.out_len()]);
    let oc = meta.out_c;
    for b in 0..batch {
        for p in 0..positions {
            for c in 0..oc {
                let v = prod.data()[(b * positions + p) * oc + c] + bias.data()[c];
                out.data_mut()[b * oc * positions + c * positions + p] = v;
            }
        }
    }
    out
}

fn im2col<R: Real>(input: &Tensor<R>, meta: &ConvMeta) -> Tensor<R> {
    let batch = input.rows();
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let positions = oh * ow;
    let patch = meta.patch_len();
    let mut col = Tensor::zeros(&[batch * positions, patch]);
    let (ih, iw, ic) = (meta.in_h, meta.in_w, meta.in_c);
    let k = meta.kernel;
    for b in 0..batch {
        let img = &input.data()[b * ic * ih * iw..(b + 1) * ic * ih * iw];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * positions + oy * ow + ox) * patch;
                for c in 0..ic {
                    for ky in 0..k {
                        let y = (oy * meta.stride + ky) as isize - meta.pad as isize;
                        for kx in 0..k {
                            let x = (ox * meta.stride + kx) as isize - meta.pad as isize;
                            let dst = row + c * k * k + ky * k + kx;
                            if y >= 0 && (y as usize) < ih && x >= 0 && (x as usize) < iw {
                                col.data_mut()[dst] = img[c * ih * iw + y as usize * iw + x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn conv_backward<R: Real>(
    tape: &Tape<R>,
    input: Var,
    weight: Var,
    bias: Var,
    meta: &ConvMeta,
    g: &Tensor<R>,
    grads: &mut [Option<Tensor<R>>],
) {
    let inv = &tape.nodes[input.0].value;
    let wv = &tape.nodes[weight.0].value;
    let batch = inv.rows();
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let positions = oh * ow;
    let oc = meta.out_c;
    let patch = meta.patch_len();

    // Rearrange incoming grad rows [out_c, oh, ow] -> [b*pos, out_c].
    let mut gmat = Tensor::zeros(&[batch * positions, oc]);
    for b in 0..batch {
        for p in 0..positions {
            for c in 0..oc {
                gmat.data_mut()[(b * positions + p) * oc + c] =
                    g.data()[b * oc * positions + c * positions + p];
            }
        }
    }

    if tape.needs(bias) {
        let db = grads[bias.0].get_or_insert_with(|| Tensor::zeros(&[1, oc]));
        for rp in 0..batch * positions {
            for c in 0..oc {
                db.data_mut()[c] += gmat.data()[rp * oc + c];
            }
        }
    }

    if tape.needs(weight) {
        // dW = col^T . gmat
        let col = im2col(inv, meta);
        let dw = grads[weight.0].get_or_insert_with(|| Tensor::zeros(&[patch, oc]));
        unsafe {
            R::gemm(
                patch,
                batch * positions,
                oc,
                R::ONE,
                col.data().as_ptr(),
                1,
                patch as isize,
                gmat.data().as_ptr(),
                oc as isize,
                1,
                R::ONE,
                dw.data_mut().as_mut_ptr(),
                oc as isize,
                1,
            );
        }
    }

    if tape.needs(input) {
        // dcol = gmat . W^T, then scatter back (col2im).
        let dcol = gmat.matmul(&transpose(wv));
        let din = grads[input.0].get_or_insert_with(|| Tensor::zeros(&[batch, meta.in_c * meta.in_h * meta.in_w]));
        let (ih, iw, ic) = (meta.in_h, meta.in_w, meta.in_c);
        let k = meta.kernel;
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * positions + oy * ow + ox) * patch;
                    for c in 0..ic {
                        for ky in 0..k {
                            let y = (oy * meta.stride + ky) as isize - meta.pad as isize;
                            for kx in 0..k {
                                let x = (ox * meta.stride + kx) as isize - meta.pad as isize;
                                if y >= 0 && (y as usize) < ih && x >= 0 && (x as usize) < iw {
                                    let dst = b * ic * ih * iw
                                        + c * ih * iw
                                        + y as usize * iw
                                        + x as usize;
                                    din.data_mut()[dst] += dcol.data()[row + c * k * k + ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn transpose<R: Real>(t: &Tensor<R>) -> Tensor<R> {
    let (m, n) = (t.rows(), t.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for r in 0..m {
        for c in 0..n {
            out.data_mut()[c * m + r] = t.data()[r * n + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
    }

    #[test]
    fn matmul_backward_matches_hand_gradient() {
        // loss = sum(A.B); dA = 1 . B^T, dB = A^T . 1
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.param(Tensor::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(Tensor::from_rows(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b);
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss);
        let da = grads.get(a, &[2, 2]);
        assert_eq!(da.data(), &[11.0, 15.0, 11.0, 15.0]);
        let db = grads.get(b, &[2, 2]);
        assert_eq!(db.data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn elementwise_chain_gradient() {
        // loss = mean(tanh(x)^2), x scalar: d/dx = 2 tanh(x) (1 - tanh(x)^2)
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(Tensor::scalar(0.3));
        let t = tape.tanh(x);
        let sq = tape.square(t);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let want = 2.0 * 0.3f64.tanh() * (1.0 - 0.3f64.tanh().powi(2));
        assert_close(grads.get(x, &[1, 1]).item(), want, 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(x, c);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads.get_opt(c).is_none());
        assert_close(grads.get(x, &[1, 1]).item(), 3.0, 1e-15);
    }

    #[test]
    fn detach_stops_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.square(x);
        let stopped = tape.detach(y);
        let z = tape.mul(x, stopped);
        let loss = tape.sum_all(z);
        let grads = tape.backward(loss);
        // d/dx [x * sg(x^2)] = sg(x^2) = 4
        assert_close(grads.get(x, &[1, 1]).item(), 4.0, 1e-15);
    }

    #[test]
    fn slice_and_concat_roundtrip_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(Tensor::from_rows(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let left = tape.slice_cols(x, 0, 2);
        let right = tape.slice_cols(x, 2, 1);
        let back = tape.concat_cols(left, right);
        let doubled = tape.scale(back, 2.0);
        let loss = tape.sum_all(doubled);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x, &[2, 3]).data(), &[2.0; 6]);
    }

    #[test]
    fn broadcast_rows_sums_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(Tensor::from_rows(1, 2, vec![1.0, 2.0]));
        let b = tape.broadcast_rows(x, 4);
        let loss = tape.sum_all(b);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x, &[1, 2]).data(), &[4.0, 4.0]);
    }

    #[test]
    fn conv_shapes() {
        let meta = ConvMeta {
            in_h: 16,
            in_w: 16,
            in_c: 1,
            out_c: 8,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        assert_eq!(meta.out_h(), 8);
        assert_eq!(meta.out_w(), 8);
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 256]));
        let w = tape.param(Tensor::zeros(&[16, 8]));
        let b = tape.param(Tensor::zeros(&[1, 8]));
        let y = tape.conv2d(x, w, b, meta);
        assert_eq!(tape.value(y).shape(), &[3, 8 * 8 * 8]);
    }
}
