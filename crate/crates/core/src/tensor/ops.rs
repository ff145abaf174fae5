//! Forward definitions and backward rules for every tape operation.

use super::tape::{Op, Tape, Var};
use super::{strides, Result, Tensor, TensorError};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op produced a consistent tensor")
}

/// `c (+)= a * b` for row/column strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: all extents and strides below describe memory inside the
    // borrowed slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `(outer, len, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let offset: usize = index.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[offset]);
        for d in (0..index.len()).rev() {
            index[d] += 1;
            if index[d] < out_shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    (out, out_shape)
}

fn transpose_last2(data: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch = data.len() / (rows * cols);
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = data[base + i * cols + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(r - 2, r - 1);
    (out, out_shape)
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Numeric { op })
    }
}

/// Whether `b` broadcasts against `a` as a trailing suffix or a scalar.
fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    let bn: usize = b.iter().product();
    bn == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

fn softmax_rows(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                y[at(k)] = e;
                sum += e;
            }
            for k in 0..len {
                y[at(k)] /= sum;
            }
        }
    }
    y
}

impl<'p> Tape<'p> {
    fn binary_broadcast(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcasts(ta.shape(), tb.shape()) {
            return Err(dim_err(op_name, ta.shape(), tb.shape()));
        }
        let bl = tb.numel();
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bl]))
            .collect();
        let out = tensor(ta.shape().to_vec(), data);
        Ok(self.push(out, &[a, b], op))
    }

    /// Elementwise `a + b`; `b` may be a trailing-suffix or scalar broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = tensor(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect());
        self.push(out, &[a], Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = tensor(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect());
        self.push(out, &[a], Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `a[..., q] x w[q, r] -> [..., r]`; `a`'s leading extents are batch.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        let (sa, sw) = (ta.shape(), tw.shape());
        if sa.is_empty() || sw.len() != 2 || sa[sa.len() - 1] != sw[0] {
            return Err(dim_err("matmul", sa, sw));
        }
        let (q, r) = (sw[0], sw[1]);
        let rows = ta.numel() / q;
        let mut data = vec![0.0; rows * r];
        gemm(rows, q, r, ta.data(), (q, 1), tw.data(), (r, 1), &mut data, false);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = r;
        Ok(self.push(tensor(shape, data), &[a, w], Op::MatMul(a, w)))
    }

    /// Batched product `[B, p, q] x [B, q, r] -> [B, p, r]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err("bmm", sa, sb));
        }
        let (batch, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; batch * p * r];
        for i in 0..batch {
            gemm(
                p,
                q,
                r,
                &ta.data()[i * p * q..],
                (q, 1),
                &tb.data()[i * q * r..],
                (r, 1),
                &mut data[i * p * r..],
                false,
            );
        }
        Ok(self.push(tensor(vec![batch, p, r], data), &[a, b], Op::Bmm(a, b)))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() < 2 {
            return Err(TensorError::Contract(format!(
                "transpose needs rank >= 2, got {:?}",
                t.shape()
            )));
        }
        let (data, shape) = transpose_last2(t.data(), t.shape());
        Ok(self.push(tensor(shape, data), &[a], Op::TransposeLast2(a)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut seen = vec![false; t.rank()];
        if axes.len() != t.rank() || axes.iter().any(|&x| x >= t.rank() || std::mem::replace(&mut seen[x], true)) {
            return Err(dim_err("permute", t.shape(), axes));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), axes);
        Ok(self.push(tensor(shape, data), &[a], Op::Permute(a, axes.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(dim_err("reshape", t.shape(), shape));
        }
        let out = tensor(shape.to_vec(), t.data().to_vec());
        Ok(self.push(out, &[a], Op::Reshape(a)))
    }

    /// Collapses all extents into one, preserving row-major order.
    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        self.reshape(a, &[n]).expect("flatten preserves element count")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = tensor(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        self.push(out, &[a], op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| !(x > 0.0)) {
            return Err(TensorError::Numeric { op: "log" });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(dim_err("softmax", t.shape(), &[axis]));
        }
        check_finite("softmax", t)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let data = softmax_rows(t.data(), outer, len, inner);
        let out = tensor(t.shape().to_vec(), data);
        Ok(self.push(out, &[a], Op::Softmax(a, axis)))
    }

    /// Softmax over the last axis of `[..., Lq, Lk]` scores where query `i`
    /// may only see keys `j <= i + (Lk - Lq)`.
    pub fn softmax_causal(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() < 2 || t.shape()[t.rank() - 2] > t.shape()[t.rank() - 1] {
            return Err(TensorError::Contract(format!(
                "causal softmax needs [..., Lq, Lk] with Lq <= Lk, got {:?}",
                t.shape()
            )));
        }
        check_finite("softmax", t)?;
        let r = t.rank();
        let (lq, lk) = (t.shape()[r - 2], t.shape()[r - 1]);
        let offset = lk - lq;
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for (row_idx, (xr, yr)) in x.chunks(lk).zip(y.chunks_mut(lk)).enumerate() {
            let visible = (row_idx % lq) + offset + 1;
            let max = xr[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..visible {
                yr[k] = (xr[k] - max).exp();
                sum += yr[k];
            }
            for v in &mut yr[..visible] {
                *v /= sum;
            }
        }
        let out = tensor(t.shape().to_vec(), y);
        Ok(self.push(out, &[a], Op::SoftmaxCausal(a)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(dim_err("log_softmax", t.shape(), &[]));
        }
        check_finite("log_softmax", t)?;
        let len = t.shape()[t.rank() - 1];
        let mut y = t.data().to_vec();
        for row in y.chunks_mut(len) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = tensor(t.shape().to_vec(), y);
        Ok(self.push(out, &[a], Op::LogSoftmax(a)))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(dim_err("layer_norm", t.shape(), &[]));
        }
        let len = t.shape()[t.rank() - 1];
        let mut y = t.data().to_vec();
        for row in y.chunks_mut(len) {
            let mean = row.iter().sum::<f64>() / len as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let out = tensor(t.shape().to_vec(), y);
        Ok(self.push(out, &[a], Op::LayerNorm(a, eps)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &e)| i == axis || e == base[i]);
            if !compatible {
                return Err(dim_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(tensor(shape, data), parts, Op::Concat(parts.to_vec(), axis)))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(dim_err("narrow", t.shape(), &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(tensor(shape, data), &[a], Op::Narrow(a, axis, start)))
    }

    /// Selects rows of the leading axis: `out[k] = a[index[k]]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 || index.is_empty() || index.iter().any(|&i| i >= t.shape()[0]) {
            return Err(dim_err("gather_rows", t.shape(), &[index.len()]));
        }
        let row = t.numel() / t.shape()[0];
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index {
            data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        Ok(self.push(tensor(shape, data), &[a], Op::GatherRows(a, index.to_vec())))
    }

    /// Picks one entry of the last axis per row: `[..., A] -> [...]`.
    pub fn pick_last(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(dim_err("pick_last", t.shape(), &[index.len()]));
        }
        let width = t.shape()[t.rank() - 1];
        let rows = t.numel() / width;
        if index.len() != rows || index.iter().any(|&i| i >= width) {
            return Err(dim_err("pick_last", t.shape(), &[index.len()]));
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &i)| t.data()[r * width + i])
            .collect();
        let shape = t.shape()[..t.rank() - 1].to_vec();
        Ok(self.push(tensor(shape, data), &[a], Op::PickLast(a, index.to_vec())))
    }

    /// Inserts a new axis at `axis` holding `count` copies.
    pub fn repeat(&mut self, a: Var, axis: usize, count: usize) -> Result<Var> {
        let t = self.value(a);
        if axis > t.rank() || count == 0 {
            return Err(dim_err("repeat", t.shape(), &[axis, count]));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let chunk = &t.data()[o * inner..(o + 1) * inner];
            for _ in 0..count {
                data.extend_from_slice(chunk);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.insert(axis, count);
        Ok(self.push(tensor(shape, data), &[a], Op::Repeat(a, axis, count)))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(dim_err("sum_axis", t.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += t.data()[o * len * inner + k * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(tensor(shape, data), &[a], Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .value(a)
            .shape()
            .get(axis)
            .ok_or_else(|| dim_err("mean_axis", self.value(a).shape(), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Clamps into `[lo, hi]`; gradient flows only where the input lies inside.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clip(a, lo, hi))
    }

    /// Elementwise minimum; ties route gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("minimum", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x.min(*y)).collect();
        let out = tensor(ta.shape().to_vec(), data);
        Ok(self.push(out, &[a, b], Op::Minimum(a, b)))
    }

    /// Applies the backward rule of node `idx` given its output gradient `g`.
    pub(crate) fn backward_op(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        if !node.requires_grad {
            return;
        }
        let gd = g.data();
        let y = node.value.data();
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.requires_grad(*b) {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let bl = val(*b).numel();
                    let mut gb = vec![0.0; bl];
                    for (i, gi) in gd.iter().enumerate() {
                        gb[i % bl] += sign * gi;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let bl = tb.len();
                if self.requires_grad(*a) {
                    let ga = gd.iter().enumerate().map(|(i, gi)| gi * tb[i % bl]).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; bl];
                    for (i, gi) in gd.iter().enumerate() {
                        gb[i % bl] += gi * ta[i];
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, gd.iter().map(|x| x * f).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, gd.to_vec());
            }
            Op::MatMul(a, w) => {
                let (ta, tw) = (val(*a), val(*w));
                let (q, r) = (tw.shape()[0], tw.shape()[1]);
                let rows = ta.numel() / q;
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; rows * q];
                    gemm(rows, r, q, gd, (r, 1), tw.data(), (1, r), &mut ga, false);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; q * r];
                    gemm(q, rows, r, ta.data(), (1, q), gd, (r, 1), &mut gw, false);
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (batch, p, q) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let r = tb.shape()[2];
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; batch * p * q];
                    for i in 0..batch {
                        gemm(
                            p,
                            r,
                            q,
                            &gd[i * p * r..],
                            (r, 1),
                            &tb.data()[i * q * r..],
                            (1, r),
                            &mut ga[i * p * q..],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; batch * q * r];
                    for i in 0..batch {
                        gemm(
                            q,
                            p,
                            r,
                            &ta.data()[i * p * q..],
                            (1, q),
                            &gd[i * p * r..],
                            (r, 1),
                            &mut gb[i * q * r..],
                            false,
                        );
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::TransposeLast2(a) => {
                let (ga, _) = transpose_last2(gd, g.shape());
                self.accumulate(grads, *a, ga);
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (ga, _) = permute_data(gd, g.shape(), &inverse);
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let ga = gd.iter().zip(x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| {
                        let t = (GELU_K * (xi + GELU_C * xi * xi * xi)).tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_C * xi * xi);
                        gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, gd.iter().zip(y).map(|(gi, yi)| gi * yi).collect());
            }
            Op::Log(a) => {
                let x = val(*a).data();
                self.accumulate(grads, *a, gd.iter().zip(x).map(|(gi, xi)| gi / xi).collect());
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(g.shape(), *axis);
                let mut ga = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            ga[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxCausal(a) => {
                let lk = g.shape()[g.rank() - 1];
                let mut ga = vec![0.0; gd.len()];
                for ((gr, yr), out) in gd.chunks(lk).zip(y.chunks(lk)).zip(ga.chunks_mut(lk)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for k in 0..lk {
                        out[k] = yr[k] * (gr[k] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let len = g.shape()[g.rank() - 1];
                let mut ga = vec![0.0; gd.len()];
                for ((gr, yr), out) in gd.chunks(len).zip(y.chunks(len)).zip(ga.chunks_mut(len)) {
                    let total: f64 = gr.iter().sum();
                    for k in 0..len {
                        out[k] = gr[k] - yr[k].exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a, eps) => {
                let x = val(*a).data();
                let len = g.shape()[g.rank() - 1];
                let n = len as f64;
                let mut ga = vec![0.0; gd.len()];
                for (row, ((xr, gr), yr)) in x.chunks(len).zip(gd.chunks(len)).zip(y.chunks(len)).enumerate() {
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for k in 0..len {
                        ga[row * len + k] = inv * (gr[k] - g_mean - yr[k] * gy_mean);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut start = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + start * inner;
                            gp.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    start += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let ta = val(*a);
                let (outer, full, inner) = split_axis(ta.shape(), *axis);
                let len = g.shape()[*axis];
                let mut ga = vec![0.0; ta.numel()];
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, index) => {
                let ta = val(*a);
                let row = ta.numel() / ta.shape()[0];
                let mut ga = vec![0.0; ta.numel()];
                for (k, &i) in index.iter().enumerate() {
                    for (dst, src) in ga[i * row..(i + 1) * row].iter_mut().zip(&gd[k * row..(k + 1) * row]) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PickLast(a, index) => {
                let ta = val(*a);
                let width = ta.shape()[ta.rank() - 1];
                let mut ga = vec![0.0; ta.numel()];
                for (r, &i) in index.iter().enumerate() {
                    ga[r * width + i] = gd[r];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Repeat(a, axis, count) => {
                let ta = val(*a);
                let outer: usize = ta.shape()[..*axis].iter().product();
                let inner: usize = ta.shape()[*axis..].iter().product();
                let mut ga = vec![0.0; ta.numel()];
                for o in 0..outer {
                    for c in 0..*count {
                        let src = &gd[(o * count + c) * inner..(o * count + c + 1) * inner];
                        for (dst, s) in ga[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                self.accumulate(grads, *a, vec![gd[0]; val(*a).numel()]);
            }
            Op::SumAxis(a, axis) => {
                let ta = val(*a);
                let (outer, len, inner) = split_axis(ta.shape(), *axis);
                let mut ga = vec![0.0; ta.numel()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            ga[o * len * inner + k * inner + i] = gd[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Clip(a, lo, hi) => {
                let x = val(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| if *xi >= *lo && *xi <= *hi { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let pick_a: Vec<bool> = ta.iter().zip(tb).map(|(x, y)| x <= y).collect();
                if self.requires_grad(*a) {
                    let ga = gd.iter().zip(&pick_a).map(|(gi, &p)| if p { *gi } else { 0.0 }).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = gd.iter().zip(&pick_a).map(|(gi, &p)| if p { 0.0 } else { *gi }).collect();
                    self.accumulate(grads, *b, gb);
                }
            }
        }
    }
}
