use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AffineLayer, ParamId, ParamStore};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Forward-pass mode. Dropout masks in training mode are drawn from a
/// ChaCha8 stream seeded with the given value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    /// `X W^T + b`, bias broadcast over rows.
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    /// `A B^T`
    MatMulT {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    /// Column-wise concatenation of nodes with equal row counts.
    Concat(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    /// `sum_i weights[i] * parts[i]`
    WeightedSum {
        parts: Vec<Var>,
        weights: Var,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Tape of forward operations. Each op records what its backward rule needs.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        let rng = match mode {
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Mode::Eval => None,
        };
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            rng,
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "input value has wrong length");
        self.push(rows, cols, value, Op::Input)
    }

    /// A `1 x n` constant.
    pub fn vector(&mut self, value: &[f64]) -> Var {
        self.push(1, value.len(), value.to_vec(), Op::Input)
    }

    /// Parameter leaf. Each parameter is copied onto the tape at most once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.rows, p.cols, p.value.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn affine(&mut self, store: &ParamStore, layer: &AffineLayer, x: Var) -> Result<Var> {
        let w = self.param(store, layer.weight);
        let b = self.param(store, layer.bias);
        self.linear(x, w, b)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (r, inx) = self.shape(x);
        let (out, inw) = self.shape(w);
        if inx != inw {
            return Err(Error::shape("affine input", inw, inx));
        }
        if self.shape(b) != (1, out) {
            return Err(Error::shape(
                "affine bias",
                format!("1x{out}"),
                format!("{:?}", self.shape(b)),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut y = vec![0.0; r * out];
        for i in 0..r {
            let xr = &xv[i * inx..(i + 1) * inx];
            for o in 0..out {
                let wr = &wv[o * inx..(o + 1) * inx];
                y[i * out + o] = dot(xr, wr) + bv[o];
            }
        }
        Ok(self.push(r, out, y, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul inner dim", k, k2));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                for j in 0..n {
                    c[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        Ok(self.push(m, n, c, Op::MatMul { a, b }))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_t inner dim", k, k2));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = dot(&av[i * k..(i + 1) * k], &bv[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(m, n, c, Op::MatMulT { a, b }))
    }

    fn same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(ctx, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(sa)
    }

    fn zip_with(
        &mut self,
        ctx: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (r, c) = self.same_shape(ctx, a, b)?;
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(r, c, v, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(r, c, v, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(r, c, out, Op::SoftmaxRows(a))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Eval mode returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let (r, c) = self.shape(x);
        let v = self.nodes[x.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        Ok(self.push(r, c, v, Op::Dropout { x, mask }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptyInput("concat of zero nodes".into()));
        };
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::shape("concat rows", rows, r));
            }
            cols += c;
        }
        let mut v = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.nodes[p.0].cols;
                v.extend_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(rows, cols, v, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if rows * cols != n {
            return Err(Error::shape("reshape", n, rows * cols));
        }
        let v = self.nodes[a.0].value.clone();
        Ok(self.push(rows, cols, v, Op::Reshape(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a))
    }

    /// Row-wise mix of equally shaped `r x c` parts: output row `t` is
    /// `sum_i weights[t, i] * parts[i][t]`, with `weights` of shape `r x k`.
    pub fn weighted_sum(&mut self, parts: &[Var], weights: Var) -> Result<Var> {
        let k = parts.len();
        if k == 0 {
            return Err(Error::EmptyInput("weighted sum of zero nodes".into()));
        }
        let (r, c) = self.shape(parts[0]);
        if self.shape(weights) != (r, k) {
            return Err(Error::shape(
                "weighted sum weights",
                format!("({r}, {k})"),
                format!("{:?}", self.shape(weights)),
            ));
        }
        for &p in &parts[1..] {
            self.same_shape("weighted sum parts", parts[0], p)?;
        }
        let wv = &self.nodes[weights.0].value;
        let mut out = vec![0.0; r * c];
        for (i, &p) in parts.iter().enumerate() {
            let pv = &self.nodes[p.0].value;
            for row in 0..r {
                let w = wv[row * k + i];
                for j in row * c..(row + 1) * c {
                    out[j] += w * pv[j];
                }
            }
        }
        Ok(self.push(
            r,
            c,
            out,
            Op::WeightedSum {
                parts: parts.to_vec(),
                weights,
            },
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let n = self.nodes[pred.0].value.len();
        if n != target.len() {
            return Err(Error::shape("mse target", n, target.len()));
        }
        if n == 0 {
            return Err(Error::EmptyInput("mse of empty vectors".into()));
        }
        let loss = self.nodes[pred.0]
            .value
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Reverse sweep from the scalar `loss`, adding each parameter's gradient
    /// into `store`. Gradients accumulate across calls until
    /// [`ParamStore::zero_grads`].
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called before a forward pass was recorded".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape(
                "backward root",
                "(1, 1)",
                format!("{:?}", self.shape(loss)),
            ));
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        adj[loss.0] = vec![1.0];

        for i in (0..=loss.0).rev() {
            let dy = std::mem::take(&mut adj[i]);
            if dy.is_empty() {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    for (g, d) in p.grad.iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (r, out) = (node.rows, node.cols);
                    let inx = self.nodes[x.0].cols;
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let mut dx = vec![0.0; r * inx];
                    let mut dw = vec![0.0; out * inx];
                    let mut db = vec![0.0; out];
                    for row in 0..r {
                        let xr = &xv[row * inx..(row + 1) * inx];
                        let dxr = &mut dx[row * inx..(row + 1) * inx];
                        for o in 0..out {
                            let d = dy[row * out + o];
                            if d == 0.0 {
                                continue;
                            }
                            db[o] += d;
                            let wr = &wv[o * inx..(o + 1) * inx];
                            let dwr = &mut dw[o * inx..(o + 1) * inx];
                            for j in 0..inx {
                                dxr[j] += d * wr[j];
                                dwr[j] += d * xr[j];
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *w, dw);
                    accumulate(&mut adj, *b, db);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                let d = dy[i * n + j];
                                s += d * bv[p * n + j];
                                db[p * n + j] += av[i * k + p] * d;
                            }
                            da[i * k + p] = s;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::MatMulT { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy[i * n + j];
                            for p in 0..k {
                                da[i * k + p] += d * bv[j * k + p];
                                db[j * k + p] += d * av[i * k + p];
                            }
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, dy.clone());
                    accumulate(&mut adj, *b, dy);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da = dy.iter().zip(bv).map(|(d, y)| d * y).collect();
                    let db = dy.iter().zip(av).map(|(d, x)| d * x).collect();
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Div(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da = dy.iter().zip(bv).map(|(d, y)| d / y).collect();
                    let db = dy
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(d, (x, y))| -d * x / (y * y))
                        .collect();
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, *a, dy.iter().map(|d| d * c).collect());
                }
                Op::Relu(a) => {
                    let da = dy
                        .iter()
                        .zip(&node.value)
                        .map(|(d, y)| if *y > 0.0 { *d } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = dy
                        .iter()
                        .zip(&node.value)
                        .map(|(d, y)| d * y * (1.0 - y))
                        .collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let c = node.cols;
                    let mut da = vec![0.0; dy.len()];
                    for ((dar, dyr), yr) in
                        da.chunks_mut(c).zip(dy.chunks(c)).zip(node.value.chunks(c))
                    {
                        let inner = dot(dyr, yr);
                        for j in 0..c {
                            dar[j] = yr[j] * (dyr[j] - inner);
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Dropout { x, mask } => {
                    accumulate(
                        &mut adj,
                        *x,
                        dy.iter().zip(mask).map(|(d, m)| d * m).collect(),
                    );
                }
                Op::Concat(parts) => {
                    let rows = node.rows;
                    let total = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].cols;
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&dy[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(&mut adj, p, dp);
                        offset += c;
                    }
                }
                Op::Reshape(a) => accumulate(&mut adj, *a, dy),
                Op::SumAll(a) => {
                    let n = self.nodes[a.0].value.len();
                    accumulate(&mut adj, *a, vec![dy[0]; n]);
                }
                Op::WeightedSum { parts, weights } => {
                    let wv = &self.nodes[weights.0].value;
                    let k = parts.len();
                    let c = self.nodes[parts[0].0].cols;
                    let mut dw = vec![0.0; wv.len()];
                    for (i, &p) in parts.iter().enumerate() {
                        let pv = &self.nodes[p.0].value;
                        let mut dp = vec![0.0; dy.len()];
                        for (row, (dyr, pvr)) in dy.chunks(c).zip(pv.chunks(c)).enumerate() {
                            let w = wv[row * k + i];
                            dw[row * k + i] = dot(dyr, pvr);
                            for (d, &g) in dp[row * c..(row + 1) * c].iter_mut().zip(dyr) {
                                *d = g * w;
                            }
                        }
                        accumulate(&mut adj, p, dp);
                    }
                    accumulate(&mut adj, *weights, dw);
                }
                Op::Mse { pred, target } => {
                    let pv = &self.nodes[pred.0].value;
                    let scale = dy[0] * 2.0 / target.len() as f64;
                    let dp = pv
                        .iter()
                        .zip(target)
                        .map(|(p, t)| scale * (p - t))
                        .collect();
                    accumulate(&mut adj, *pred, dp);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Vec<f64>], v: Var, delta: Vec<f64>) {
    let slot = &mut adj[v.0];
    if slot.is_empty() {
        *slot = delta;
    } else {
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where `f64` would round to an endpoint.
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
