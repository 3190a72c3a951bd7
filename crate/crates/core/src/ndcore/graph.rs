use super::special::{digamma, ln_gamma};
use super::tensor::{broadcast_index, broadcast_shape, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    LogSigmoid(Var),
    LeakyRelu(Var, S),
    Square(Var),
    Sqrt(Var),
    LnGamma(Var),
    SoftmaxRows(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    HCat(Vec<Var>),
    SliceCols(Var, usize),
    StraightThrough(Var),
    NegBinomial { x: Tensor<S>, mu: Var, theta: Var },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Tape of recorded operations. Node order is creation order, which is a
/// topological order of the computation.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not require
    /// gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Input tensor; gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<(Tensor<S>, bool)> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(va.shape(), vb.shape())
            .ok_or_else(|| shape_err(op, va.shape(), vb.shape()))?;
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(va.shape(), &out_shape);
            let ib = broadcast_index(vb.shape(), &out_shape);
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect()
        };
        Ok((Tensor::new(out_shape, data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let v = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(v, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// `ln σ(x)`, stable for large |x|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), |x| -softplus(-x))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > S::zero() { x } else { x * slope })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn ln_gamma(&mut self, a: Var) -> Var {
        self.unary(a, Op::LnGamma(a), |x| S::lit(ln_gamma(x.as_f64())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = src.clone();
        let c = src.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, S::one() / S::lit(n as f64))
    }

    /// Row sums of a matrix, shape `(rows, 1)`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (r, c) = (src.rows(), src.cols());
        let data = src.data().chunks(c).map(|row| row.iter().copied().sum()).collect();
        let v = Tensor::new(vec![r, 1], data).expect("row sums");
        let rg = self.rg(a);
        self.push(v, Op::SumRows(a), rg)
    }

    /// Column sums of a matrix, shape `(1, cols)`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let c = src.cols();
        let mut data = vec![S::zero(); c];
        for row in src.data().chunks(c) {
            for (acc, &v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let v = Tensor::new(vec![1, c], data).expect("column sums");
        let rg = self.rg(a);
        self.push(v, Op::SumCols(a), rg)
    }

    /// Concatenates matrices along columns.
    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::hcat(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::HCat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        let c = src.cols();
        if start > end || end > c || src.shape().len() != 2 {
            return Err(shape_err("slice_cols", src.shape(), &[start, end]));
        }
        let r = src.rows();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..end]);
        }
        let v = Tensor::new(vec![r, end - start], data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::SliceCols(a, start), rg))
    }

    /// Forward value `hard`, backward gradient routed unchanged to `relaxed`.
    pub fn straight_through(&mut self, hard: Tensor<S>, relaxed: Var) -> Result<Var> {
        if hard.shape() != self.shape(relaxed) {
            return Err(shape_err("straight_through", hard.shape(), self.shape(relaxed)));
        }
        let rg = self.rg(relaxed);
        Ok(self.push(hard, Op::StraightThrough(relaxed), rg))
    }

    /// Elementwise negative-binomial log-pmf of counts `x` under mean `mu`
    /// and inverse dispersion `theta` (broadcast to `mu`'s shape).
    pub fn neg_binomial_log_prob(&mut self, x: &Tensor<S>, mu: Var, theta: Var) -> Result<Var> {
        let (vm, vt) = (self.value(mu), self.value(theta));
        if x.shape() != vm.shape() {
            return Err(shape_err("neg_binomial_log_prob", x.shape(), vm.shape()));
        }
        let out_shape = broadcast_shape(vm.shape(), vt.shape())
            .filter(|s| s.as_slice() == vm.shape())
            .ok_or_else(|| shape_err("neg_binomial_log_prob", vm.shape(), vt.shape()))?;
        let it = broadcast_index(vt.shape(), &out_shape);
        let data = x
            .data()
            .iter()
            .zip(vm.data())
            .zip(&it)
            .map(|((&xv, &m), &ti)| {
                S::lit(crate::stochastic::nb_log_pmf(xv.as_f64(), m.as_f64(), vt.data()[ti].as_f64()))
            })
            .collect();
        let v = Tensor::new(out_shape, data)?;
        let rg = self.rg(mu) || self.rg(theta);
        Ok(self.push(
            v,
            Op::NegBinomial {
                x: x.clone(),
                mu,
                theta,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err("backward", lv.shape(), &[1]));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite {
                term: "loss".into(),
                step: None,
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        // every requires_grad leaf gets a gradient, zero when unreachable
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor<S>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        let elementwise = |a: Var, f: &dyn Fn(S, S, S) -> S| -> Tensor<S> {
            // f(input, output, upstream)
            let x = val(a);
            let data = x
                .data()
                .iter()
                .zip(node.value.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("elementwise grad")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, unbroadcast(g, val(*a).shape()));
                send(*b, unbroadcast(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                send(*a, unbroadcast(g, val(*a).shape()));
                send(*b, unbroadcast(&g.map(|v| -v), val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let shape = g.shape();
                if self.nodes[a.0].requires_grad {
                    let ib = broadcast_index(vb.shape(), shape);
                    let t = mapped(g, &ib, |k, gv| gv * vb.data()[k]);
                    send(*a, unbroadcast(&t, va.shape()));
                }
                if self.nodes[b.0].requires_grad {
                    let ia = broadcast_index(va.shape(), shape);
                    let t = mapped(g, &ia, |k, gv| gv * va.data()[k]);
                    send(*b, unbroadcast(&t, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let shape = g.shape();
                let ib = broadcast_index(vb.shape(), shape);
                if self.nodes[a.0].requires_grad {
                    let t = mapped(g, &ib, |k, gv| gv / vb.data()[k]);
                    send(*a, unbroadcast(&t, va.shape()));
                }
                if self.nodes[b.0].requires_grad {
                    // d(a/b)/db = -out / b
                    let t = Tensor::new(
                        shape.to_vec(),
                        g.data()
                            .iter()
                            .zip(node.value.data())
                            .zip(&ib)
                            .map(|((&gv, &o), &k)| -gv * o / vb.data()[k])
                            .collect(),
                    )
                    .expect("div grad");
                    send(*b, unbroadcast(&t, vb.shape()));
                }
            }
            Op::Neg(a) => send(*a, g.map(|v| -v)),
            Op::Scale(a, c) => {
                let c = *c;
                send(*a, g.map(|v| v * c))
            }
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![S::zero(); n * k];
                    gemm_nt(g.data(), vb.data(), &mut da, n, m, k);
                    send(*a, Tensor::new(vec![n, k], da).expect("matmul grad"));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![S::zero(); k * m];
                    gemm_tn(va.data(), g.data(), &mut db, n, k, m);
                    send(*b, Tensor::new(vec![k, m], db).expect("matmul grad"));
                }
            }
            Op::Exp(a) => send(*a, elementwise(*a, &|_, y, gv| gv * y)),
            Op::Log(a) => send(*a, elementwise(*a, &|x, _, gv| gv / x)),
            Op::Sigmoid(a) => send(*a, elementwise(*a, &|_, y, gv| gv * y * (S::one() - y))),
            Op::Softplus(a) => send(*a, elementwise(*a, &|x, _, gv| gv * sigmoid(x))),
            Op::LogSigmoid(a) => send(*a, elementwise(*a, &|x, _, gv| gv * sigmoid(-x))),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                send(
                    *a,
                    elementwise(*a, &|x, _, gv| if x > S::zero() { gv } else { gv * s }),
                )
            }
            Op::Square(a) => send(*a, elementwise(*a, &|x, _, gv| gv * (x + x))),
            Op::Sqrt(a) => send(*a, elementwise(*a, &|_, y, gv| gv / (y + y))),
            Op::LnGamma(a) => send(
                *a,
                elementwise(*a, &|x, _, gv| gv * S::lit(digamma(x.as_f64()))),
            ),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut out = g.clone();
                for (orow, yrow) in out.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: S = orow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                    for (o, &yv) in orow.iter_mut().zip(yrow) {
                        *o = yv * (*o - dot);
                    }
                }
                send(*a, out)
            }
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.data()[0])),
            Op::SumRows(a) => {
                let va = val(*a);
                let c = va.cols();
                let mut out = Tensor::zeros(va.shape());
                for (row, &gv) in out.data_mut().chunks_mut(c).zip(g.data()) {
                    row.iter_mut().for_each(|v| *v = gv);
                }
                send(*a, out)
            }
            Op::SumCols(a) => {
                let va = val(*a);
                let c = va.cols();
                let mut out = Tensor::zeros(va.shape());
                for row in out.data_mut().chunks_mut(c) {
                    row.copy_from_slice(g.data());
                }
                send(*a, out)
            }
            Op::HCat(parts) => {
                let rows = g.rows();
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut data = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            data.extend_from_slice(&g.row(i)[start..start + w]);
                        }
                        send(p, Tensor::new(vec![rows, w], data).expect("hcat grad"));
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let va = val(*a);
                let w = g.cols();
                let mut out = Tensor::zeros(va.shape());
                for i in 0..va.rows() {
                    out.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                send(*a, out)
            }
            Op::StraightThrough(relaxed) => send(*relaxed, g.clone()),
            Op::NegBinomial { x, mu, theta } => {
                let (vm, vt) = (val(*mu), val(*theta));
                let it = broadcast_index(vt.shape(), g.shape());
                let mut dmu = Vec::with_capacity(g.len());
                let mut dth = Vec::with_capacity(g.len());
                for k in 0..g.len() {
                    let (xv, m, t) = (
                        x.data()[k].as_f64(),
                        vm.data()[k].as_f64(),
                        vt.data()[it[k]].as_f64(),
                    );
                    let gv = g.data()[k];
                    let (a, b) = crate::stochastic::nb_log_pmf_grad(xv, m, t);
                    dmu.push(gv * S::lit(a));
                    dth.push(gv * S::lit(b));
                }
                send(*mu, Tensor::new(g.shape().to_vec(), dmu).expect("nb grad"));
                if self.nodes[theta.0].requires_grad {
                    let t = Tensor::new(g.shape().to_vec(), dth).expect("nb grad");
                    send(*theta, unbroadcast(&t, vt.shape()));
                }
            }
        }
    }
}

fn mapped<S: Scalar>(g: &Tensor<S>, idx: &[usize], f: impl Fn(usize, S) -> S) -> Tensor<S> {
    let data = g.data().iter().zip(idx).map(|(&gv, &k)| f(k, gv)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("mapped grad")
}

/// Sums a broadcast gradient back down to `shape`.
fn unbroadcast<S: Scalar>(g: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if g.shape() == shape {
        return g.clone();
    }
    let idx = broadcast_index(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    for (&k, &v) in idx.iter().zip(g.data()) {
        out.data_mut()[k] += v;
    }
    out
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv<S: Scalar>(y: S) -> S {
    // ln(eʸ - 1) = y + ln(1 - e⁻ʸ)
    y + (-(-y).exp()).ln_1p()
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `ln Σ exp(xᵢ)`.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<S>().ln()
}
