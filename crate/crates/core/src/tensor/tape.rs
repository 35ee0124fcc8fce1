use super::{gemm, BoolMatrix, Layout, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a × bᵀ`
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulScalarVar(usize, usize),
    MaskedSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Pick(usize, Vec<(usize, usize)>),
    NormalizeRows(usize, Vec<f64>),
    IndexAddRows(usize, usize, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of operations. Inputs always precede their outputs, so
/// a reverse sweep over the node list is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of nodes that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_matrix(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    if a.shape().len() != 2 {
        return Err(Error::shape(op, a.shape(), &[0, 0]));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].tracked)
    }

    /// Records an untracked value. It never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a gradient-tracked leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let t = self.tracked(&[a.0]);
        self.push(value, op, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul(a.0, b.0), t))
    }

    /// `a × bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let t = self.tracked(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMulT(a.0, b.0), t))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        check_matrix("transpose", self.value(a))?;
        let value = self.value(a).transpose();
        Ok(self.unary(a, value, Op::Transpose(a.0)))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same(name, x, y)?;
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let t = self.tracked(&[a.0, b.0]);
        Ok(self.push(value, op, t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |p, q| p + q, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |p, q| p - q, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |p, q| p * q, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "div", |p, q| p / q, Op::Div(a.0, b.0))?;
        if !self.value(v).is_finite() {
            return Err(Error::NonFinite("div"));
        }
        Ok(v)
    }

    /// Adds a `[d]` (or `[1 × d]`) row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.numel() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % c])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let t = self.tracked(&[x.0, b.0]);
        Ok(self.push(value, Op::AddRow(x.0, b.0), t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.unary(a, value, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.unary(a, value, Op::AddScalar(a.0))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let value = self.value(x).map(|v| v * c);
        let t = self.tracked(&[x.0, s.0]);
        Ok(self.push(value, Op::MulScalarVar(x.0, s.0), t))
    }

    /// Row-wise softmax restricted to positions where `mask` is true.
    ///
    /// Masked positions get exactly zero weight; a row without any true
    /// entry yields an all-zero row. The row maximum is taken over unmasked
    /// entries only, so masked logits cannot influence the result bits.
    pub fn masked_softmax(&mut self, logits: Var, mask: &BoolMatrix) -> Result<Var> {
        let x = self.value(logits);
        let (r, c) = check_matrix("masked_softmax", x)?;
        if mask.shape() != [r, c] {
            return Err(Error::shape("masked_softmax", x.shape(), &mask.shape()));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("masked_softmax"));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let m = mask.row(i);
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.unary(logits, value, Op::MaskedSoftmax(logits.0)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let n = xv.rows();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let t = self.tracked(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            t,
        ))
    }

    /// Tanh-approximated Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.unary(a, value, Op::Gelu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.unary(a, value, Op::Sigmoid(a.0))
    }

    /// `ln(1 + eˣ)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.unary(a, value, Op::Softplus(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        if !value.is_finite() {
            return Err(Error::NonFinite("exp"));
        }
        Ok(self.unary(a, value, Op::Exp(a.0)))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        if !value.is_finite() {
            return Err(Error::NonFinite("ln"));
        }
        Ok(self.unary(a, value, Op::Ln(a.0)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = check_matrix("log_softmax", x)?;
        if !x.is_finite() {
            return Err(Error::NonFinite("log_softmax"));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.unary(a, value, Op::LogSoftmax(a.0)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / v.numel() as f64);
        self.unary(a, value, Op::Mean(a.0))
    }

    /// `[n × d] → [n × 1]` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let r = v.rows();
        let data = (0..r).map(|i| v.row(i).iter().sum()).collect();
        let value = Tensor::new(vec![r, 1], data).expect("row sums");
        self.unary(a, value, Op::SumRows(a.0))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start >= end || end > v.rows() {
            return Err(Error::invalid(format!(
                "row slice {start}..{end} of {:?}",
                v.shape()
            )));
        }
        let value = v.slice_rows(start, end);
        Ok(self.unary(a, value, Op::SliceRows(a.0, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = check_matrix("slice_cols", v)?;
        if start >= end || end > c {
            return Err(Error::invalid(format!(
                "column slice {start}..{end} of {:?}",
                v.shape()
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..end]);
        }
        let value = Tensor::new(vec![r, w], data)?;
        Ok(self.unary(a, value, Op::SliceCols(a.0, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = self.tracked(&ids);
        Ok(self.push(value, Op::ConcatRows(ids), t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let r = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| Error::invalid("concat of zero tensors"))?,
            )
            .rows();
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != r || v.shape().len() != 2 {
                return Err(Error::shape("concat_cols", &[r, total], v.shape()));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = self.tracked(&ids);
        Ok(self.push(value, Op::ConcatCols(ids), t))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= v.rows()) {
            return Err(Error::invalid(format!(
                "gather indices {idx:?} for {:?}",
                v.shape()
            )));
        }
        let value = v.select_rows(idx);
        Ok(self.unary(a, value, Op::GatherRows(a.0, idx.to_vec())))
    }

    /// Picks individual `(row, col)` elements into a 1-D tensor.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = check_matrix("pick", v)?;
        if at.is_empty() || at.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(Error::invalid(format!("pick {at:?} from {:?}", v.shape())));
        }
        let data = at.iter().map(|&(i, j)| v.at(i, j)).collect();
        let value = Tensor::new(vec![at.len()], data)?;
        Ok(self.unary(a, value, Op::Pick(a.0, at.to_vec())))
    }

    /// Scales every row to unit Euclidean norm. A zero row is an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = check_matrix("normalize_rows", v)?;
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let n = v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm {
                    op: "normalize_rows",
                    row: i,
                });
            }
            norms.push(n);
            data.extend(v.row(i).iter().map(|x| x / n));
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.unary(a, value, Op::NormalizeRows(a.0, norms)))
    }

    /// Copy of `base` with `update[k]` added to row `idx[k]`. Rows not named
    /// in `idx` are passed through untouched.
    pub fn index_add_rows(&mut self, base: Var, update: Var, idx: &[usize]) -> Result<Var> {
        let (bv, uv) = (self.value(base), self.value(update));
        let c = bv.cols();
        if uv.cols() != c || uv.rows() != idx.len() || idx.iter().any(|&i| i >= bv.rows()) {
            return Err(Error::shape("index_add_rows", bv.shape(), uv.shape()));
        }
        let mut out = bv.clone();
        for (k, &i) in idx.iter().enumerate() {
            for (o, u) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(uv.row(k)) {
                *o += u;
            }
        }
        let t = self.tracked(&[base.0, update.0]);
        Ok(self.push(out, Op::IndexAddRows(base.0, update.0, idx.to_vec()), t))
    }

    /// Reverse sweep from a tracked scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NotScalar(rv.shape().to_vec()));
        }
        if !self.is_tracked(root) {
            return Err(Error::NotTracked);
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| &nodes[j].value;
        let y = &nodes[i].value;

        // Returns the accumulation buffer for input `j`, or None when `j`
        // is not tracked.
        fn slot<'a>(
            nodes: &[Node],
            grads: &'a mut [Option<Vec<f64>>],
            j: usize,
        ) -> Option<&'a mut Vec<f64>> {
            if !nodes[j].tracked {
                return None;
            }
            let len = nodes[j].value.numel();
            Some(grads[j].get_or_insert_with(|| vec![0.0; len]))
        }

        macro_rules! each {
            ($j:expr, |$k:ident, $acc:ident| $body:expr) => {
                if let Some(buf) = slot(nodes, grads, $j) {
                    for ($k, $acc) in buf.iter_mut().enumerate() {
                        $body;
                    }
                }
            };
        }

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let nn = val(b).shape()[1];
                if let Some(buf) = slot(nodes, grads, a) {
                    gemm(
                        m,
                        nn,
                        k,
                        g,
                        Layout::Normal,
                        val(b).data(),
                        Layout::Transposed,
                        buf,
                        true,
                    );
                }
                if let Some(buf) = slot(nodes, grads, b) {
                    gemm(
                        k,
                        m,
                        nn,
                        val(a).data(),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        buf,
                        true,
                    );
                }
            }
            &Op::MatMulT(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let nn = val(b).shape()[0];
                if let Some(buf) = slot(nodes, grads, a) {
                    gemm(
                        m,
                        nn,
                        k,
                        g,
                        Layout::Normal,
                        val(b).data(),
                        Layout::Normal,
                        buf,
                        true,
                    );
                }
                if let Some(buf) = slot(nodes, grads, b) {
                    gemm(
                        nn,
                        m,
                        k,
                        g,
                        Layout::Transposed,
                        val(a).data(),
                        Layout::Normal,
                        buf,
                        true,
                    );
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                // y is r×c, a is c×r
                each!(a, |k, acc| *acc += g[(k % r) * c + k / r]);
            }
            &Op::Add(a, b) => {
                each!(a, |k, acc| *acc += g[k]);
                each!(b, |k, acc| *acc += g[k]);
            }
            &Op::Sub(a, b) => {
                each!(a, |k, acc| *acc += g[k]);
                each!(b, |k, acc| *acc -= g[k]);
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                each!(a, |k, acc| *acc += g[k] * bv[k]);
                each!(b, |k, acc| *acc += g[k] * av[k]);
            }
            &Op::Div(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                each!(a, |k, acc| *acc += g[k] / bv[k]);
                each!(b, |k, acc| *acc -= g[k] * av[k] / (bv[k] * bv[k]));
            }
            &Op::AddRow(x, b) => {
                let c = y.cols();
                each!(x, |k, acc| *acc += g[k]);
                if let Some(buf) = slot(nodes, grads, b) {
                    for (k, gk) in g.iter().enumerate() {
                        buf[k % c] += gk;
                    }
                }
            }
            &Op::Scale(a, c) => each!(a, |k, acc| *acc += g[k] * c),
            &Op::AddScalar(a) => each!(a, |k, acc| *acc += g[k]),
            &Op::MulScalarVar(x, s) => {
                let sv = val(s).item();
                let xv = val(x).data();
                each!(x, |k, acc| *acc += g[k] * sv);
                if let Some(buf) = slot(nodes, grads, s) {
                    buf[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            &Op::MaskedSoftmax(a) => {
                let c = y.cols();
                let yd = y.data();
                if let Some(buf) = slot(nodes, grads, a) {
                    for r in 0..y.rows() {
                        let yr = &yd[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            buf[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = y.cols();
                let rows = y.rows();
                let gv = val(*gain).data();
                if let Some(buf) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let base = r * d;
                        for j in 0..d {
                            dxhat[j] = g[base + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[base..base + d])
                            .map(|(p, q)| p * q)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            buf[base + j] +=
                                inv_std[r] * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                }
                if let Some(buf) = slot(nodes, grads, *gain) {
                    for (k, gk) in g.iter().enumerate() {
                        buf[k % d] += gk * xhat[k];
                    }
                }
                if let Some(buf) = slot(nodes, grads, *bias) {
                    for (k, gk) in g.iter().enumerate() {
                        buf[k % d] += gk;
                    }
                }
            }
            &Op::Gelu(a) => {
                let xv = val(a).data();
                each!(a, |k, acc| {
                    let x = xv[k];
                    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *acc += g[k] * (0.5 * (1.0 + t) + 0.5 * x * dt)
                });
            }
            &Op::Sigmoid(a) => {
                let yd = y.data();
                each!(a, |k, acc| *acc += g[k] * yd[k] * (1.0 - yd[k]));
            }
            &Op::Softplus(a) => {
                let xv = val(a).data();
                each!(a, |k, acc| *acc += g[k] * sigmoid(xv[k]));
            }
            &Op::Exp(a) => {
                let yd = y.data();
                each!(a, |k, acc| *acc += g[k] * yd[k]);
            }
            &Op::Ln(a) => {
                let xv = val(a).data();
                each!(a, |k, acc| *acc += g[k] / xv[k]);
            }
            &Op::LogSoftmax(a) => {
                let c = y.cols();
                let yd = y.data();
                if let Some(buf) = slot(nodes, grads, a) {
                    for r in 0..y.rows() {
                        let gs: f64 = g[r * c..(r + 1) * c].iter().sum();
                        for j in 0..c {
                            buf[r * c + j] += g[r * c + j] - yd[r * c + j].exp() * gs;
                        }
                    }
                }
            }
            &Op::Sum(a) => each!(a, |_k, acc| *acc += g[0]),
            &Op::Mean(a) => {
                let n = val(a).numel() as f64;
                each!(a, |_k, acc| *acc += g[0] / n);
            }
            &Op::SumRows(a) => {
                let c = val(a).cols();
                each!(a, |k, acc| *acc += g[k / c]);
            }
            &Op::SliceRows(a, start) => {
                let c = y.cols();
                if let Some(buf) = slot(nodes, grads, a) {
                    for (k, gk) in g.iter().enumerate() {
                        buf[start * c + k] += gk;
                    }
                }
            }
            &Op::SliceCols(a, start) => {
                let w = y.cols();
                let c = val(a).cols();
                if let Some(buf) = slot(nodes, grads, a) {
                    for r in 0..y.rows() {
                        for j in 0..w {
                            buf[r * c + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if let Some(buf) = slot(nodes, grads, p) {
                        for (acc, gk) in buf.iter_mut().zip(&g[off..off + len]) {
                            *acc += gk;
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut col = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if let Some(buf) = slot(nodes, grads, p) {
                        for r in 0..y.rows() {
                            for j in 0..w {
                                buf[r * w + j] += g[r * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = y.cols();
                if let Some(buf) = slot(nodes, grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Pick(a, at) => {
                let c = val(*a).cols();
                if let Some(buf) = slot(nodes, grads, *a) {
                    for (k, &(r, j)) in at.iter().enumerate() {
                        buf[r * c + j] += g[k];
                    }
                }
            }
            Op::IndexAddRows(base, upd, idx) => {
                let c = y.cols();
                each!(*base, |k, acc| *acc += g[k]);
                if let Some(buf) = slot(nodes, grads, *upd) {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[k * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::NormalizeRows(a, norms) => {
                let c = y.cols();
                let yd = y.data();
                if let Some(buf) = slot(nodes, grads, *a) {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &yd[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            buf[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_sum_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let xv = t(&[vec![1.0, -2.0, 0.25]]);
        let x = tape.param(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let expected: Vec<f64> = xv.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transpose() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(t(&[vec![5.0, 6.0, 7.0], vec![8.0, 9.0, 10.0]]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        // ones(2x3) × bᵀ: each row is the row sums of b.
        assert_eq!(g.get(a).unwrap().data(), &[18.0, 27.0, 18.0, 27.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn untracked_nodes_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[2, 2]));
        let p = tape.param(Tensor::ones(&[2, 2]));
        let unrelated = tape.param(Tensor::ones(&[1]));
        let y = tape.mul(c, p).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
        assert!(g.get(unrelated).is_none());
        // p, y, s
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn backward_rejects_bad_roots() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::ones(&[2, 2]));
        assert!(matches!(tape.backward(p), Err(Error::NotScalar(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c), Err(Error::NotTracked)));
    }

    #[test]
    fn masked_softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let all = BoolMatrix::filled(1, 4, true);
        let y = tape.masked_softmax(x, &all).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);

        let x = tape.constant(t(&[vec![-3.0, 9.0, 1.0, 4.0]]));
        let first = BoolMatrix::from_rows(&[vec![true, false, false, false]]).unwrap();
        let y = tape.masked_softmax(x, &first).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 0.0]);

        let none = BoolMatrix::filled(1, 4, false);
        let y = tape.masked_softmax(x, &none).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let bad = tape.constant(t(&[vec![f64::NAN, 0.0, 0.0, 0.0]]));
        assert!(tape.masked_softmax(bad, &all).is_err());
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, -1.0], vec![3.0, 3.0]]));
        let gain = tape.constant(Tensor::ones(&[2]));
        let bias = tape.constant(Tensor::from_fn(&[2], |i| i as f64 * 0.5));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        let v = tape.value(y);
        assert!((v.at(0, 0) - 1.0).abs() < 1e-5);
        assert!((v.at(0, 1) - (-1.0 + 0.5)).abs() < 1e-5);
        // constant row normalizes to zero, leaving the bias
        assert_eq!(v.row(1), &[0.0, 0.5]);
    }

    #[test]
    fn normalize_rows_rejects_zero_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![3.0, 4.0], vec![0.0, 0.0]]));
        assert!(matches!(
            tape.normalize_rows(x),
            Err(Error::ZeroNorm { row: 1, .. })
        ));
    }
}
