use super::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    L2NormalizeRows(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    GatherCols(Var, Vec<usize>),
    MaxCols(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in creation order. Inputs always precede the nodes
/// that consume them, so a reverse sweep is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax of `x / temperature`, stabilized by the row max.
fn log_softmax_rows(x: &Tensor, temperature: f64) -> Tensor {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
        let lse = row
            .iter()
            .map(|&v| (v / temperature - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = v / temperature - lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation; also how gradients are stopped.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call, if `v`
    /// received any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Copy of `v`'s value on a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows, t.cols)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_checked("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push_checked("transpose", out, Op::Transpose(a), &[a])
    }

    /// Same data, new `rows × cols` view (row-major order preserved).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if rows * cols != t.len() {
            return Err(Error::dim(
                "reshape",
                format!("{}x{} into {rows}x{cols}", t.rows, t.cols),
            ));
        }
        let out = Tensor {
            rows,
            cols,
            data: t.data.clone(),
        };
        self.push_checked("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push_checked("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push_checked("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push_checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `a[i, j] + row[0, j]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((m, n), (rr, rc)) = (self.shape(a), self.shape(row));
        if rr != 1 || rc != n {
            return Err(Error::dim("add_row", format!("{m}x{n} + {rr}x{rc}")));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data.clone();
        for i in 0..m {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push_checked("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// `a[i, j] * col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let ((m, n), (cr, cc)) = (self.shape(a), self.shape(col));
        if cc != 1 || cr != m {
            return Err(Error::dim("mul_col", format!("{m}x{n} * {cr}x{cc}")));
        }
        let mut out = self.value(a).clone();
        let c = self.value(col).data.clone();
        for (i, &s) in c.iter().enumerate() {
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        self.push_checked("mul_col", out, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = map(self.value(a), |x| x * c);
        self.push_checked("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = map(self.value(a), |x| x + c);
        self.push_checked("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), f64::tanh);
        self.push_checked("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), f64::exp);
        self.push_checked("exp", out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), f64::ln);
        self.push_checked("ln", out, Op::Ln(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), sigmoid);
        self.push_checked("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), softplus);
        self.push_checked("softplus", out, Op::Softplus(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), |x| x * x);
        self.push_checked("square", out, Op::Square(a), &[a])
    }

    fn check_temperature(temperature: f64) -> Result<()> {
        if temperature > 0.0 && temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::Param(format!(
                "temperature must be positive and finite, got {temperature}"
            )))
        }
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
            let o = out.row_mut(r);
            for (o, &v) in o.iter_mut().zip(row) {
                *o = (v / temperature - max).exp();
            }
            let z: f64 = o.iter().sum();
            o.iter_mut().for_each(|v| *v /= z);
        }
        self.push_checked("softmax_rows", out, Op::SoftmaxRows(a, temperature), &[a])
    }

    /// Row-wise `log softmax(x / temperature)`.
    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let out = log_softmax_rows(self.value(a), temperature);
        self.push_checked(
            "log_softmax_rows",
            out,
            Op::LogSoftmaxRows(a, temperature),
            &[a],
        )
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in row {
                *v /= norm;
            }
        }
        self.push_checked("l2_normalize_rows", out, Op::L2NormalizeRows(a, eps), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data.is_empty() {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums each row, giving an `m × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = (0..t.rows).map(|r| t.row(r).iter().sum()).collect();
        self.push_checked("sum_rows", Tensor::col_vector(data), Op::SumRows(a), &[a])
    }

    /// Sums each column, giving a `1 × n` row.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (d, &v) in data.iter_mut().zip(t.row(r)) {
                *d += v;
            }
        }
        self.push_checked("sum_cols", Tensor::row_vector(data), Op::SumCols(a), &[a])
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(a).rows;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("select_rows", format!("row {bad} of {rows}")));
        }
        let out = self.value(a).select_rows(idx);
        self.push_checked("select_rows", out, Op::SelectRows(a, idx.to_vec()), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_rows", "no inputs"));
        };
        let cols = self.value(first).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("{} columns vs {cols}", t.cols),
                ));
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let out = Tensor { rows, cols, data };
        self.push_checked("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Picks `a[i, idx[i]]` for every row, giving an `m × 1` column.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if idx.len() != t.rows || idx.iter().any(|&c| c >= t.cols) {
            return Err(Error::dim(
                "gather_cols",
                format!("{} indices into {}x{}", idx.len(), t.rows, t.cols),
            ));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        self.push_checked(
            "gather_cols",
            Tensor::col_vector(data),
            Op::GatherCols(a, idx.to_vec()),
            &[a],
        )
    }

    /// Row-wise maximum; ties resolve to the first column. The gradient is
    /// routed to the arg-max entry.
    pub fn max_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.cols == 0 {
            return Err(Error::dim("max_cols", "zero columns"));
        }
        let mut arg = Vec::with_capacity(t.rows);
        let mut data = Vec::with_capacity(t.rows);
        for r in 0..t.rows {
            let row = t.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        self.push_checked("max_cols", Tensor::col_vector(data), Op::MaxCols(a, arg), &[a])
    }

    /// Reverse sweep from a scalar `loss`. Gradients from earlier calls are
    /// discarded. Nodes reached along several paths accumulate the sum.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            let y = &node.value;
            let mut contribs: Vec<(Var, Tensor)> = Vec::with_capacity(2);
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        contribs.push((*a, matmul_raw(&g, &bv.transpose())));
                    }
                    if self.requires_grad(*b) {
                        contribs.push((*b, matmul_raw(&av.transpose(), &g)));
                    }
                }
                Op::Transpose(a) => contribs.push((*a, g.transpose())),
                Op::Reshape(a) => {
                    let (m, n) = self.shape(*a);
                    contribs.push((*a, Tensor { rows: m, cols: n, data: g.data.clone() }));
                }
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g.clone()));
                }
                Op::Sub(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, map(&g, |v| -v)));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    contribs.push((*a, zip(&g, bv, |x, y| x * y)));
                    contribs.push((*b, zip(&g, av, |x, y| x * y)));
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; g.cols];
                    for r in 0..g.rows {
                        for (d, &v) in gr.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    contribs.push((*a, g.clone()));
                    contribs.push((*row, Tensor::row_vector(gr)));
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let mut ga = g.clone();
                    let mut gc = vec![0.0; g.rows];
                    for r in 0..g.rows {
                        let s = cv.data[r];
                        let mut acc = 0.0;
                        for (j, v) in ga.row_mut(r).iter_mut().enumerate() {
                            acc += *v * av.get(r, j);
                            *v *= s;
                        }
                        gc[r] = acc;
                    }
                    contribs.push((*a, ga));
                    contribs.push((*col, Tensor::col_vector(gc)));
                }
                Op::Scale(a, c) => contribs.push((*a, map(&g, |v| v * c))),
                Op::AddScalar(a) => contribs.push((*a, g.clone())),
                Op::Tanh(a) => contribs.push((*a, zip(&g, y, |gv, yv| gv * (1.0 - yv * yv)))),
                Op::Exp(a) => contribs.push((*a, zip(&g, y, |gv, yv| gv * yv))),
                Op::Ln(a) => contribs.push((*a, zip(&g, self.value(*a), |gv, x| gv / x))),
                Op::Sigmoid(a) => {
                    contribs.push((*a, zip(&g, y, |gv, yv| gv * yv * (1.0 - yv))))
                }
                Op::Softplus(a) => {
                    contribs.push((*a, zip(&g, self.value(*a), |gv, x| gv * sigmoid(x))))
                }
                Op::Square(a) => {
                    contribs.push((*a, zip(&g, self.value(*a), |gv, x| 2.0 * gv * x)))
                }
                Op::SoftmaxRows(a, t) => {
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot) / t;
                        }
                    }
                    contribs.push((*a, ga));
                }
                Op::LogSoftmaxRows(a, t) => {
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let gsum: f64 = gr.iter().sum();
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv.exp() * gsum) / t;
                        }
                    }
                    contribs.push((*a, ga));
                }
                Op::L2NormalizeRows(a, eps) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (yr, gr) = (y.row(r), g.row(r));
                        let out = ga.row_mut(r);
                        if norm >= *eps {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                                *o = (gv - yv * dot) / norm;
                            }
                        } else {
                            for (o, &gv) in out.iter_mut().zip(gr) {
                                *o = gv / eps;
                            }
                        }
                    }
                    contribs.push((*a, ga));
                }
                Op::Sum(a) => {
                    let (m, n) = self.shape(*a);
                    contribs.push((*a, Tensor::filled(m, n, g.data[0])));
                }
                Op::Mean(a) => {
                    let (m, n) = self.shape(*a);
                    contribs.push((*a, Tensor::filled(m, n, g.data[0] / (m * n) as f64)));
                }
                Op::SumRows(a) => {
                    let (m, n) = self.shape(*a);
                    let mut ga = Tensor::zeros(m, n);
                    for r in 0..m {
                        ga.row_mut(r).fill(g.data[r]);
                    }
                    contribs.push((*a, ga));
                }
                Op::SumCols(a) => {
                    let (m, n) = self.shape(*a);
                    let mut ga = Tensor::zeros(m, n);
                    for r in 0..m {
                        ga.row_mut(r).copy_from_slice(&g.data);
                    }
                    contribs.push((*a, ga));
                }
                Op::SelectRows(a, idx) => {
                    let (m, n) = self.shape(*a);
                    let mut ga = Tensor::zeros(m, n);
                    for (k, &i) in idx.iter().enumerate() {
                        for (d, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *d += v;
                        }
                    }
                    contribs.push((*a, ga));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (m, n) = self.shape(p);
                        let slice = g.data[offset * n..(offset + m) * n].to_vec();
                        contribs.push((p, Tensor { rows: m, cols: n, data: slice }));
                        offset += m;
                    }
                }
                Op::GatherCols(a, idx) | Op::MaxCols(a, idx) => {
                    let (m, n) = self.shape(*a);
                    let mut ga = Tensor::zeros(m, n);
                    for (r, &c) in idx.iter().enumerate() {
                        ga.set(r, c, g.data[r]);
                    }
                    contribs.push((*a, ga));
                }
            }
            grads[idx] = Some(g);
            for (input, contrib) in contribs {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&contrib.data) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}
