use super::{Gradients, ParamId, ParamStore, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Sigmoid(Var),
    Logit(Var),
    Clamp(Var, f64, f64),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SumCols(Var),
    Reshape(Var),
    Mean(Var),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    TypedMatMul(Var, Vec<Var>, Vec<usize>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Single-owner record of a forward computation. Parameter values are read
/// from the borrowed store rather than copied.
pub struct Tape<'p> {
    params: &'p ParamStore,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims(), tb.dims());
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        self.push(Tensor { shape: vec![n, m], data: out }, Op::Transpose(a))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| scale * x + shift).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (n, m) = tx.dims();
        if tr.len() != m {
            return Err(mismatch(name, tx, tr));
        }
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(f(tx.data()[i * m + j], tr.data()[j]));
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, op))
    }

    /// Adds a `1×m` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast(x, row, "add_row", |a, b| a + b, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` elementwise by a `1×m` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast(x, row, "mul_row", |a, b| a * b, Op::MulRow(x, row))
    }

    /// Row-wise softmax, max-shifted.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = t.dims();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(m.max(1)).take(n) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Softmax(a))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let (n, m) = t.dims();
        let mut data = t.data().to_vec();
        let mut inv = Vec::with_capacity(n);
        for row in data.chunks_mut(m.max(1)).take(n) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
            let s = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * s;
            }
            inv.push(s);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::LayerNorm(a, inv))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    /// Inverse of the logistic function on (0, 1).
    pub fn logit(&mut self, a: Var) -> Var {
        self.map(a, |p| (p / (1.0 - p)).ln(), Op::Logit(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, op)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (n, m) = t.dims();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            if i >= n {
                return Err(TensorError::IndexOutOfRange { index: i, len: n });
            }
            data.extend_from_slice(&t.data()[i * m..(i + 1) * m]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), m],
                data,
            },
            Op::GatherRows(a, indices.to_vec()),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let m = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != m {
                return Err(mismatch("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, m],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let n = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (n, m) = t.dims();
        if start + width > m {
            return Err(TensorError::IndexOutOfRange {
                index: start + width,
                len: m,
            });
        }
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(&t.data()[i * m + start..i * m + start + width]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, width],
                data,
            },
            Op::SliceCols(a, start),
        ))
    }

    /// Row sums as an `n×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = t.dims();
        let data = (0..n).map(|i| t.data()[i * m..(i + 1) * m].iter().sum()).collect();
        self.push(Tensor { shape: vec![n, 1], data }, Op::SumCols(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        let want: usize = shape.iter().product();
        if want != t.len() {
            return Err(TensorError::BadLength {
                shape: shape.to_vec(),
                expected: want,
                found: t.len(),
            });
        }
        let data = t.data().to_vec();
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape(a),
        ))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Mean over rows of `-log softmax(logits_row)[target_row]`, log-sum-exp
    /// stabilised. `logits` is `N×C`, one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(logits);
        let (n, c) = t.dims();
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c.max(1)).zip(targets) {
            if y >= c {
                return Err(TensorError::IndexOutOfRange { index: y, len: c });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = loss / n.max(1) as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
        ))
    }

    /// Row `i` of the result is `x_i · weights[select[i]]`.
    pub fn typed_matmul(
        &mut self,
        x: Var,
        weights: &[Var],
        select: &[usize],
    ) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, k) = tx.dims();
        if select.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "typed_matmul",
                left: tx.shape().to_vec(),
                right: vec![select.len()],
            });
        }
        let first = *weights.first().ok_or(TensorError::Empty("typed_matmul"))?;
        let (k0, m) = self.value(first).dims();
        for &w in weights {
            if self.value(w).dims() != (k0, m) || k0 != k {
                return Err(mismatch("typed_matmul", tx, self.value(w)));
            }
        }
        let mut out = vec![0.0; n * m];
        for (i, &s) in select.iter().enumerate() {
            let w = weights
                .get(s)
                .ok_or(TensorError::IndexOutOfRange {
                    index: s,
                    len: weights.len(),
                })?;
            let tw = self.value(*w);
            matmul_into(
                &tx.data()[i * k..(i + 1) * k],
                tw.data(),
                &mut out[i * m..(i + 1) * m],
                1,
                k,
                m,
            );
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::TypedMatMul(x, weights.to_vec(), select.to_vec()),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.params);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = || node.value.as_ref().expect("computed node");
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ((m, k), (_, n)) = (ta.dims(), tb.dims());
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            let aip = ta.data()[i * k + p];
                            for j in 0..n {
                                let gij = g[i * n + j];
                                s += gij * tb.data()[p * n + j];
                                db[p * n + j] += aip * gij;
                            }
                            da[i * k + p] = s;
                        }
                    }
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::Transpose(a) => {
                    let (m, n) = self.value(*a).dims();
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    acc(&mut grads, *a, &da);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da: Vec<f64> = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::Affine(a, s) => {
                    let da: Vec<f64> = g.iter().map(|x| s * x).collect();
                    acc(&mut grads, *a, &da);
                }
                Op::AddRow(x, row) => {
                    let m = self.value(*row).len();
                    let mut dr = vec![0.0; m];
                    for chunk in g.chunks(m) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *x, &g);
                    acc(&mut grads, *row, &dr);
                }
                Op::MulRow(x, row) => {
                    let (tx, tr) = (self.value(*x), self.value(*row));
                    let m = tr.len();
                    let mut dx = vec![0.0; g.len()];
                    let mut dr = vec![0.0; m];
                    for (i, v) in g.iter().enumerate() {
                        dx[i] = v * tr.data()[i % m];
                        dr[i % m] += v * tx.data()[i];
                    }
                    acc(&mut grads, *x, &dx);
                    acc(&mut grads, *row, &dr);
                }
                Op::Softmax(a) => {
                    let yv = y();
                    let m = yv.cols().max(1);
                    let mut da = vec![0.0; g.len()];
                    for ((dr, gr), yr) in da.chunks_mut(m).zip(g.chunks(m)).zip(yv.data().chunks(m)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, &da);
                }
                Op::LayerNorm(a, inv) => {
                    let yv = y();
                    let m = yv.cols().max(1);
                    let mut da = vec![0.0; g.len()];
                    for (r, ((dr, gr), yr)) in
                        da.chunks_mut(m).zip(g.chunks(m)).zip(yv.data().chunks(m)).enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / m as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            dr[j] = inv[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    acc(&mut grads, *a, &da);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let da: Vec<f64> = g.iter().zip(x.data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                    acc(&mut grads, *a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = g.iter().zip(y().data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                    acc(&mut grads, *a, &da);
                }
                Op::Logit(a) => {
                    let x = self.value(*a);
                    let da: Vec<f64> = g.iter().zip(x.data()).map(|(g, p)| g / (p * (1.0 - p))).collect();
                    acc(&mut grads, *a, &da);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, &da);
                }
                Op::GatherRows(a, indices) => {
                    let t = self.value(*a);
                    let m = t.cols();
                    let mut da = vec![0.0; t.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..m {
                            da[i * m + j] += g[r * m + j];
                        }
                    }
                    acc(&mut grads, *a, &da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        acc(&mut grads, p, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
                    let total: usize = widths.iter().sum();
                    let n = g.len() / total.max(1);
                    let mut start = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let mut dp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            dp.extend_from_slice(&g[i * total + start..i * total + start + w]);
                        }
                        acc(&mut grads, p, &dp);
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let t = self.value(*a);
                    let (n, m) = t.dims();
                    let w = g.len() / n.max(1);
                    let mut da = vec![0.0; n * m];
                    for i in 0..n {
                        da[i * m + start..i * m + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    acc(&mut grads, *a, &da);
                }
                Op::SumCols(a) => {
                    let (n, m) = self.value(*a).dims();
                    let mut da = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            da[i * m + j] = g[i];
                        }
                    }
                    acc(&mut grads, *a, &da);
                }
                Op::Reshape(a) => acc(&mut grads, *a, &g),
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let da = vec![g[0] / n as f64; n];
                    acc(&mut grads, *a, &da);
                }
                Op::CrossEntropy(logits, targets, probs) => {
                    let c = self.value(*logits).cols().max(1);
                    let n = targets.len().max(1) as f64;
                    let mut da: Vec<f64> = probs.iter().map(|p| p * g[0] / n).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        da[r * c + t] -= g[0] / n;
                    }
                    acc(&mut grads, *logits, &da);
                }
                Op::TypedMatMul(x, weights, select) => {
                    let tx = self.value(*x);
                    let (n, k) = tx.dims();
                    let m = g.len() / n.max(1);
                    let mut dx = vec![0.0; n * k];
                    let mut dws: Vec<Option<Vec<f64>>> = vec![None; weights.len()];
                    for (i, &s) in select.iter().enumerate() {
                        let w = self.value(weights[s]).data();
                        let gi = &g[i * m..(i + 1) * m];
                        let xi = &tx.data()[i * k..(i + 1) * k];
                        let dw = dws[s].get_or_insert_with(|| vec![0.0; k * m]);
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += gi[j] * w[p * m + j];
                                dw[p * m + j] += xi[p] * gi[j];
                            }
                            dx[i * k + p] = s;
                        }
                    }
                    acc(&mut grads, *x, &dx);
                    for (w, dw) in weights.iter().zip(dws) {
                        if let Some(dw) = dw {
                            acc(&mut grads, *w, &dw);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` against the tape gradient for every parameter.
    fn check(store: &ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let tape_grads = {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            tape.backward(loss).unwrap()
        };
        let h = 1e-5;
        let mut probe = store.clone();
        for id in store.ids() {
            for k in 0..store.get(id).len() {
                let orig = probe.get(id).data()[k];
                probe.get_mut(id).data_mut()[k] = orig + h;
                let up = {
                    let mut t = Tape::new(&probe);
                    let l = f(&mut t);
                    t.value(l).item().unwrap()
                };
                probe.get_mut(id).data_mut()[k] = orig - h;
                let down = {
                    let mut t = Tape::new(&probe);
                    let l = f(&mut t);
                    t.value(l).item().unwrap()
                };
                probe.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = tape_grads.get(id).data()[k];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    rel < 1e-6,
                    "{}[{k}]: analytic {analytic} numeric {numeric} rel {rel}",
                    store.name(id)
                );
            }
        }
    }

    /// Weighted sum so every output element contributes a distinct gradient.
    fn weigh(tape: &mut Tape, v: Var) -> Var {
        let t = tape.value(v).clone();
        let w: Vec<f64> = (0..t.len()).map(|i| 0.3 + 0.17 * i as f64).collect();
        let wv = tape.constant(Tensor::new(t.shape().to_vec(), w).unwrap());
        let p = tape.mul(v, wv).unwrap();
        let s = tape.sum_cols(p);
        let s = tape.transpose(s);
        let s = tape.sum_cols(s);
        tape.reshape(s, &[]).unwrap()
    }

    fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .map(|(n, s)| store.add(*n, random(&mut rng, s)).unwrap())
            .collect();
        (store, ids)
    }

    #[test]
    fn gradcheck_matmul_transpose_add_sub_mul() {
        let (store, ids) = store_with(&[("a", &[3, 4]), ("b", &[4, 2]), ("c", &[3, 2])], 1);
        check(&store, |t| {
            let (a, b, c) = (t.param(ids[0]), t.param(ids[1]), t.param(ids[2]));
            let ab = t.matmul(a, b).unwrap();
            let s = t.add(ab, c).unwrap();
            let d = t.sub(s, c).unwrap();
            let m = t.mul(d, c).unwrap();
            let tr = t.transpose(m);
            let tr = t.affine(tr, 1.5, 0.2);
            weigh(t, tr)
        });
    }

    #[test]
    fn gradcheck_rows_softmax_layernorm_gelu() {
        let (store, ids) = store_with(&[("x", &[3, 5]), ("g", &[1, 5]), ("b", &[1, 5])], 2);
        check(&store, |t| {
            let x = t.param(ids[0]);
            let ln = t.layer_norm(x, 1e-5);
            let (gain, bias) = (t.param(ids[1]), t.param(ids[2]));
            let scaled = t.mul_row(ln, gain).unwrap();
            let shifted = t.add_row(scaled, bias).unwrap();
            let g = t.gelu(shifted);
            let s = t.softmax_rows(g);
            weigh(t, s)
        });
    }

    #[test]
    fn gradcheck_gather_concat_slice_mean() {
        let (store, ids) = store_with(&[("table", &[4, 6]), ("other", &[2, 6])], 3);
        check(&store, |t| {
            let table = t.param(ids[0]);
            let g = t.gather_rows(table, &[2, 0, 2]).unwrap();
            let other = t.param(ids[1]);
            let c = t.concat_rows(&[g, other]).unwrap();
            let left = t.slice_cols(c, 0, 2).unwrap();
            let right = t.slice_cols(c, 3, 3).unwrap();
            let both = t.concat_cols(&[right, left]).unwrap();
            let sq = t.mul(both, both).unwrap();
            let r = t.reshape(sq, &[25]).unwrap();
            let m = t.mean(r);
            let w = weigh(t, both);
            t.add(m, w).unwrap()
        });
    }

    #[test]
    fn gradcheck_sigmoid_logit_clamp() {
        let (store, ids) = store_with(&[("x", &[2, 3])], 4);
        check(&store, |t| {
            let x = t.param(ids[0]);
            let s = t.sigmoid(x);
            let c = t.clamp(s, 1e-6, 1.0 - 1e-6);
            let p = t.mul(c, c).unwrap();
            let l = t.logit(p);
            weigh(t, l)
        });
    }

    #[test]
    fn gradcheck_cross_entropy_and_typed_matmul() {
        let (store, ids) = store_with(
            &[("x", &[4, 3]), ("w0", &[3, 5]), ("w1", &[3, 5]), ("w2", &[3, 5])],
            5,
        );
        check(&store, |t| {
            let x = t.param(ids[0]);
            let ws = [t.param(ids[1]), t.param(ids[2]), t.param(ids[3])];
            let y = t.typed_matmul(x, &ws, &[2, 0, 2, 1]).unwrap();
            t.cross_entropy(y, &[0, 4, 1, 1]).unwrap()
        });
    }

    #[test]
    fn softmax_examples() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let s = t.softmax_rows(x);
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = t.constant(random(&mut rng, &[6, 7]));
        let x = t.affine(x, 30.0, 0.0);
        let s = t.softmax_rows(x);
        for r in 0..6 {
            let sum: f64 = t.value(s).row_slice(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_matmul_and_constant_layer_norm() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let i = t.constant(Tensor::identity(2));
        let av = t.constant(a.clone());
        let p = t.matmul(i, av).unwrap();
        assert_eq!(t.value(p).data(), a.data());

        let c = t.constant(Tensor::from_rows(&[vec![3.0; 4]]));
        let n = t.layer_norm(c, 1e-5);
        assert!(t.value(n).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cross_entropy_examples() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let l = t.constant(Tensor::row(vec![0.0, 0.0]));
        let ce = t.cross_entropy(l, &[0]).unwrap();
        assert!((t.value(ce).item().unwrap() - 2f64.ln()).abs() < 1e-12);

        let l = t.constant(Tensor::row(vec![20.0, -20.0]));
        let ce = t.cross_entropy(l, &[0]).unwrap();
        let v = t.value(ce).item().unwrap();
        assert!(v.is_finite() && (0.0..1e-15).contains(&v));

        let l = t.constant(Tensor::row(vec![0.0; 4]));
        let ce = t.cross_entropy(l, &[3]).unwrap();
        assert!((t.value(ce).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        assert_eq!(
            t.cross_entropy(l, &[4]).unwrap_err(),
            TensorError::IndexOutOfRange { index: 4, len: 4 }
        );
    }

    #[test]
    fn square_and_softmax_gradients() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0)).unwrap();
        let mut t = Tape::new(&store);
        let v = t.param(x);
        let sq = t.mul(v, v).unwrap();
        assert_eq!(t.backward(sq).unwrap().get(x).data(), &[6.0]);

        let mut store = ParamStore::new();
        let l = store.add("logits", Tensor::row(vec![0.0, 0.0])).unwrap();
        let mut t = Tape::new(&store);
        let v = t.param(l);
        let ce = t.cross_entropy(v, &[0]).unwrap();
        assert_eq!(t.backward(ce).unwrap().get(l).data(), &[-0.5, 0.5]);
    }

    #[test]
    fn backward_requires_scalar_and_zeroes_unreached() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::row(vec![1.0, 2.0])).unwrap();
        let b = store.add("b", Tensor::row(vec![5.0])).unwrap();
        let mut t = Tape::new(&store);
        let v = t.param(a);
        assert_eq!(t.backward(v).unwrap_err(), TensorError::NotScalar(vec![1, 2]));
        let m = t.mean(v);
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(a).data(), &[0.5, 0.5]);
        assert_eq!(g.get(b).data(), &[0.0]);
    }

    #[test]
    fn shape_errors() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
        let c = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, c), Err(TensorError::ShapeMismatch { op: "add", .. })));
        assert!(t.gather_rows(a, &[2]).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let (store, ids) = store_with(&[("x", &[3, 4]), ("w", &[4, 4])], 6);
        let run = || {
            let mut t = Tape::new(&store);
            let x = t.param(ids[0]);
            let w = t.param(ids[1]);
            let y = t.matmul(x, w).unwrap();
            let y = t.layer_norm(y, 1e-5);
            let y = t.softmax_rows(y);
            let loss = t.mean(y);
            (t.value(y).clone(), t.backward(loss).unwrap())
        };
        assert_eq!(run(), run());
    }
}
