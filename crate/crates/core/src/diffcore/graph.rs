//! Reverse-mode tape. Every op appends one node holding its forward value
//! and whatever it needs to replay the chain rule; `backward` walks the
//! nodes in reverse creation order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{permute_data, Scalar, Tensor};
use crate::error::{dim_err, input_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBroadcast(Var, Var),
    Matmul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, scale: Vec<F> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
    Sum(Var),
    Mean(Var),
    Concat(Var, Var),
    L2Normalize { x: Var, norms: Vec<F> },
    MaskReplace { x: Var, token: Var, mask: Vec<bool> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf (input or parameter) node.
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (n / last.max(1), last)
}

impl<F: Scalar> Graph<F> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// Training-mode graph whose dropout masks come from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph { nodes: Vec::new(), training: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Evaluation(format!("non-finite value produced by {}", op_name(&op))));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a copy of a stored parameter. Frozen parameters enter as
    /// constants so no backward work is spent on them.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node { value: p.value.clone(), op: Op::Param(id), requires_grad: p.trainable });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&shape, data)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&e| e * c).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(dim_err!("add_broadcast: {bs:?} is not a trailing shape of {xs:?}"));
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<F> = self.value(x).data().iter().enumerate().map(|(i, &v)| v + bv[i % nb]).collect();
        let shape = xs.to_vec();
        let rg = self.rg(&[x, b]);
        self.push(Tensor::new(&shape, out)?, Op::AddBroadcast(x, b), rg)
    }

    /// `x[..., K] · w[K, N]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(dim_err!("matmul: {xs:?} · {ws:?} has mismatched inner dimension"));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / k;
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(x).data(), k, 1, self.value(w).data(), n, 1, &mut out, n, 1, false);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[x, w]);
        self.push(Tensor::new(&shape, out)?, Op::Matmul(x, w), rg)
    }

    /// `x·w + b` over the trailing axis.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.shape(w);
        let bs = self.shape(b);
        if ws.len() != 2 || bs != [ws[1]] {
            return Err(dim_err!("affine: bias {bs:?} does not match weight {ws:?}"));
        }
        let y = self.matmul(x, w)?;
        self.add_broadcast(y, b)
    }

    /// Batched product of `a[N,M,K]` with `b[N,K,P]`, or with `b[N,P,K]`
    /// transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(dim_err!("bmm: incompatible batch shapes {as_:?} and {bs:?}"));
        }
        let (nb, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, p) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if bk != k {
            return Err(dim_err!("bmm: inner dimensions differ in {as_:?} and {bs:?} (trans_b={trans_b})"));
        }
        let (b_rs, b_cs) = if trans_b { (1, k) } else { (p, 1) };
        let mut out = vec![F::zero(); nb * m * p];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..nb {
            F::gemm(
                m,
                k,
                p,
                &av[i * m * k..(i + 1) * m * k],
                k,
                1,
                &bv[i * k * p..(i + 1) * k * p],
                b_rs,
                b_cs,
                &mut out[i * m * p..(i + 1) * m * p],
                p,
                1,
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[nb, m, p], out)?, Op::Bmm { a, b, trans_b }, rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("permute: {perm:?} is not a permutation of {} axes", shape.len()));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&out_shape, data)?, Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&e| e.max(F::zero())).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&e| e.tanh()).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax: axis {axis} out of range for {shape:?}"));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..n {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut total = F::zero();
                for j in 0..n {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, rg)
    }

    /// Normalizes the trailing axis to zero mean and unit (biased) variance,
    /// then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_of(&shape);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!("layer_norm: gamma/beta must have shape [{d}]"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_d = F::one() / F::lit(d as f64);
        let mut xhat = vec![F::zero(); src.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Cross-correlation of `x[B,Cin,T]` with `w[Cout,Cin,K]` plus `b[Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(dim_err!("conv1d: expected x[B,Cin,T] and w[Cout,Cin,K], got {xs:?} and {ws:?}"));
        }
        let (nb, cin, t) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if wcin != cin {
            return Err(dim_err!("conv1d: input has {cin} channels but kernel expects {wcin}"));
        }
        if self.shape(b) != [cout] {
            return Err(dim_err!("conv1d: bias shape {:?} != [{cout}]", self.shape(b)));
        }
        if stride == 0 {
            return Err(input_err!("conv1d: stride must be >= 1"));
        }
        let pad = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(input_err!("conv1d: same padding needs an odd kernel, got {k}"));
                }
                (k - 1) / 2
            }
            Padding::Valid => 0,
        };
        if t + 2 * pad < k {
            return Err(dim_err!("conv1d: length {t} shorter than kernel {k}"));
        }
        let to = (t + 2 * pad - k) / stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let ck = cin * k;
        let mut out = vec![F::zero(); nb * cout * to];
        let mut cols = vec![F::zero(); ck * to];
        for bi in 0..nb {
            im2col(&xv[bi * cin * t..(bi + 1) * cin * t], cin, t, k, stride, pad, to, &mut cols);
            let ob = &mut out[bi * cout * to..(bi + 1) * cout * to];
            for (co, row) in ob.chunks_mut(to).enumerate() {
                row.iter_mut().for_each(|o| *o = bv[co]);
            }
            F::gemm(cout, ck, to, wv, ck, 1, &cols, to, 1, ob, to, 1, true);
        }
        let rg = self.rg(&[x, w, b]);
        self.push(Tensor::new(&[nb, cout, to], out)?, Op::Conv1d { x, w, b, stride, pad }, rg)
    }

    /// Max pooling over the trailing axis. In ceil mode the last window may
    /// be partial; ties route the gradient to the lowest index.
    pub fn maxpool1d(&mut self, x: Var, width: usize, stride: usize, ceil_mode: bool) -> Result<Var> {
        if width == 0 || stride == 0 {
            return Err(input_err!("maxpool1d: width and stride must be >= 1"));
        }
        let shape = self.shape(x).to_vec();
        let (rows, t) = rows_of(&shape);
        let to = pooled_len(t, width, stride, ceil_mode)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * to);
        let mut argmax = Vec::with_capacity(rows * to);
        for r in 0..rows {
            let row = &src[r * t..(r + 1) * t];
            for j in 0..to {
                let start = j * stride;
                let end = (start + width).min(t);
                let mut best = start;
                for i in start + 1..end {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                out.push(row[best]);
                argmax.push(r * t + best);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = to;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&out_shape, out)?, Op::MaxPool { x, argmax }, rg)
    }

    /// Inverted dropout: kept activations are divided by the keep
    /// probability. Identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(input_err!("dropout: rate {rate} outside [0, 1)"));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let scale: Vec<F> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().zip(&scale).map(|(&a, &s)| a * s).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout { x, scale }, rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(dim_err!("cross_entropy: logits {shape:?} vs {} labels", labels.len()));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(input_err!("cross_entropy: label {bad} outside 0..{c}"));
        }
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); n * c];
        let mut total = F::zero();
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            total += lse - row[labels[r]];
        }
        let loss = total / F::lit(n as f64);
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<F>() / F::lit(v.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Concatenation along the trailing axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err!("concat_last: {sa:?} and {sb:?} differ in leading axes"));
        }
        let (rows, da) = rows_of(&sa);
        let db = *sb.last().unwrap();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&av[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&shape, out)?, Op::Concat(a, b), rg)
    }

    /// Scales each trailing-axis row to unit L2 norm; `1e-12` is added to
    /// the norm so zero rows stay zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_of(&shape);
        let src = self.value(x).data();
        let tiny = F::lit(1e-12);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            norms.push(n);
            out.extend(row.iter().map(|&v| v / (n + tiny)));
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out)?, Op::L2Normalize { x, norms }, rg)
    }

    /// Replaces rows of `x[.., D]` flagged in `mask` (one flag per row) by
    /// `token[D]`.
    pub fn mask_replace(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_of(&shape);
        if self.shape(token) != [d] {
            return Err(dim_err!("mask_replace: token {:?} != [{d}]", self.shape(token)));
        }
        if mask.len() != rows {
            return Err(dim_err!("mask_replace: {} flags for {rows} positions", mask.len()));
        }
        let mut out = self.value(x).data().to_vec();
        let tok = self.value(token).data();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * d..(r + 1) * d].copy_from_slice(tok);
            }
        }
        let rg = self.rg(&[x, token]);
        self.push(Tensor::new(&shape, out)?, Op::MaskReplace { x, token, mask: mask.to_vec() }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err!("backward: loss must be a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            // only leaves keep their gradient; intermediate buffers are released early
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c)),
            Op::AddBroadcast(x, b) => {
                self.acc(grads, *x, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    let nb = d.len();
                    for (j, &gv) in g.iter().enumerate() {
                        d[j % nb] += gv;
                    }
                });
            }
            Op::Matmul(x, w) => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = g.len() / n;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                // dx[m,k] = g[m,n] · wᵀ ; dw[k,n] = xᵀ · g
                self.acc(grads, *x, |d| F::gemm(m, n, k, g, n, 1, wv, 1, n, d, k, 1, true));
                self.acc(grads, *w, |d| F::gemm(k, m, n, xv, 1, k, g, n, 1, d, n, 1, true));
            }
            Op::Bmm { a, b, trans_b } => {
                let as_ = self.shape(*a);
                let (nb, m, k) = (as_[0], as_[1], as_[2]);
                let p = g.len() / (nb * m);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let trans_b = *trans_b;
                self.acc(grads, *a, |d| {
                    for i in 0..nb {
                        let gi = &g[i * m * p..(i + 1) * m * p];
                        let bi = &bv[i * k * p..(i + 1) * k * p];
                        let di = &mut d[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            // b is [p,k]: da = g · b
                            F::gemm(m, p, k, gi, p, 1, bi, k, 1, di, k, 1, true);
                        } else {
                            // b is [k,p]: da = g · bᵀ
                            F::gemm(m, p, k, gi, p, 1, bi, 1, p, di, k, 1, true);
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..nb {
                        let gi = &g[i * m * p..(i + 1) * m * p];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * p..(i + 1) * k * p];
                        if trans_b {
                            // db[p,k] = gᵀ · a
                            F::gemm(p, m, k, gi, 1, p, ai, k, 1, di, k, 1, true);
                        } else {
                            // db[k,p] = aᵀ · g
                            F::gemm(k, m, p, ai, 1, k, gi, p, 1, di, p, 1, true);
                        }
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inv);
                self.acc(grads, *x, |d| add_into(d, &back));
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::Relu(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += if y > F::zero() { g } else { F::zero() };
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * (F::one() - y * y);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot: F = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..n {
                                let idx = base + j * inner;
                                d[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let dd = *self.shape(*gamma).first().unwrap();
                let rows = rstd.len();
                let gm = self.value(*gamma).data();
                self.acc(grads, *x, |d| {
                    let inv_d = F::one() / F::lit(dd as f64);
                    for r in 0..rows {
                        let gr = &g[r * dd..(r + 1) * dd];
                        let xh = &xhat[r * dd..(r + 1) * dd];
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for j in 0..dd {
                            let dxh = gr[j] * gm[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for j in 0..dd {
                            let dxh = gr[j] * gm[j];
                            d[r * dd + j] += rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for (j, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        d[j % dd] += gv * xh;
                    }
                });
                self.acc(grads, *beta, |d| {
                    for (j, &gv) in g.iter().enumerate() {
                        d[j % dd] += gv;
                    }
                });
            }
            Op::Conv1d { x, w, b, stride, pad } => self.conv1d_backward(node, *x, *w, *b, *stride, *pad, g, grads),
            Op::MaxPool { x, argmax } => self.acc(grads, *x, |d| {
                for (&gv, &src) in g.iter().zip(argmax) {
                    d[src] += gv;
                }
            }),
            Op::Dropout { x, scale } => self.acc(grads, *x, |d| {
                for ((d, &g), &s) in d.iter_mut().zip(g).zip(scale) {
                    *d += g * s;
                }
            }),
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let coef = g[0] / F::lit(n as f64);
                self.acc(grads, *logits, |d| {
                    for r in 0..n {
                        for j in 0..c {
                            let onehot = if j == labels[r] { F::one() } else { F::zero() };
                            d[r * c + j] += coef * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gv = g[0] / F::lit(n as f64);
                self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += gv));
            }
            Op::Concat(a, b) => {
                let da = *self.shape(*a).last().unwrap();
                let db = *self.shape(*b).last().unwrap();
                let rows = g.len() / (da + db);
                self.acc(grads, *a, |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * da..(r + 1) * da], &g[r * (da + db)..r * (da + db) + da]);
                    }
                });
                self.acc(grads, *b, |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * db..(r + 1) * db], &g[r * (da + db) + da..(r + 1) * (da + db)]);
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let xv = self.value(*x).data();
                let dd = xv.len() / norms.len();
                let tiny = F::lit(1e-12);
                self.acc(grads, *x, |d| {
                    for (r, &n) in norms.iter().enumerate() {
                        let xr = &xv[r * dd..(r + 1) * dd];
                        let gr = &g[r * dd..(r + 1) * dd];
                        let denom = n + tiny;
                        // y = x / (n + tiny); dy/dx = I/(n+tiny) - x xᵀ / (n (n+tiny)²)
                        let dot: F = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let corr = if n > F::zero() { dot / (n * denom * denom) } else { F::zero() };
                        for j in 0..dd {
                            d[r * dd + j] += gr[j] / denom - xr[j] * corr;
                        }
                    }
                });
            }
            Op::MaskReplace { x, token, mask } => {
                let dd = *self.shape(*token).first().unwrap();
                self.acc(grads, *x, |d| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut d[r * dd..(r + 1) * dd], &g[r * dd..(r + 1) * dd]);
                        }
                    }
                });
                self.acc(grads, *token, |d| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(d, &g[r * dd..(r + 1) * dd]);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        node: &Node<F>,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let xs = self.shape(x);
        let (nb, cin, t) = (xs[0], xs[1], xs[2]);
        let ws = self.shape(w);
        let (cout, k) = (ws[0], ws[2]);
        let to = node.value.shape()[2];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let ck = cin * k;
        self.acc(grads, b, |d| {
            for bi in 0..nb {
                for co in 0..cout {
                    d[co] += g[(bi * cout + co) * to..(bi * cout + co + 1) * to].iter().copied().sum::<F>();
                }
            }
        });
        let mut cols = vec![F::zero(); ck * to];
        self.acc(grads, w, |d| {
            for bi in 0..nb {
                im2col(&xv[bi * cin * t..(bi + 1) * cin * t], cin, t, k, stride, pad, to, &mut cols);
                let gb = &g[bi * cout * to..(bi + 1) * cout * to];
                F::gemm(cout, to, ck, gb, to, 1, &cols, 1, to, d, ck, 1, true);
            }
        });
        self.acc(grads, x, |d| {
            for bi in 0..nb {
                let gb = &g[bi * cout * to..(bi + 1) * cout * to];
                F::gemm(ck, cout, to, wv, 1, ck, gb, to, 1, &mut cols, to, 1, false);
                col2im_add(&cols, cin, t, k, stride, pad, to, &mut d[bi * cin * t..(bi + 1) * cin * t]);
            }
        });
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        f(slot);
    }
}

fn add_into<F: Scalar>(d: &mut [F], g: &[F]) {
    for (d, &g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

/// `cols[(ci·k + kk)·to + o] = x[ci, o·stride + kk − pad]`, zero outside.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(x: &[F], cin: usize, t: usize, k: usize, stride: usize, pad: usize, to: usize, cols: &mut [F]) {
    for ci in 0..cin {
        let xrow = &x[ci * t..(ci + 1) * t];
        for kk in 0..k {
            let row = &mut cols[(ci * k + kk) * to..(ci * k + kk + 1) * to];
            let (lo, hi) = conv_range(t, to, stride, kk, pad);
            row[..lo].iter_mut().for_each(|v| *v = F::zero());
            row[hi..].iter_mut().for_each(|v| *v = F::zero());
            if stride == 1 {
                let start = lo + kk - pad;
                row[lo..hi].copy_from_slice(&xrow[start..start + hi - lo]);
            } else {
                for (o, v) in row.iter_mut().enumerate().take(hi).skip(lo) {
                    *v = xrow[o * stride + kk - pad];
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<F: Scalar>(cols: &[F], cin: usize, t: usize, k: usize, stride: usize, pad: usize, to: usize, dx: &mut [F]) {
    for ci in 0..cin {
        let drow = &mut dx[ci * t..(ci + 1) * t];
        for kk in 0..k {
            let row = &cols[(ci * k + kk) * to..(ci * k + kk + 1) * to];
            let (lo, hi) = conv_range(t, to, stride, kk, pad);
            if stride == 1 {
                let start = lo + kk - pad;
                add_into(&mut drow[start..start + hi - lo], &row[lo..hi]);
            } else {
                for (o, &v) in row.iter().enumerate().take(hi).skip(lo) {
                    drow[o * stride + kk - pad] += v;
                }
            }
        }
    }
}

/// Output positions `[lo, hi)` whose tap `kk` reads inside the unpadded input.
fn conv_range(t: usize, to: usize, stride: usize, kk: usize, pad: usize) -> (usize, usize) {
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    if t + pad <= kk {
        return (lo, lo);
    }
    let hi = ((t + pad - kk - 1) / stride + 1).min(to);
    (lo.min(hi), hi)
}

/// Pooled length for window `width` and `stride` over `t` positions.
pub fn pooled_len(t: usize, width: usize, stride: usize, ceil_mode: bool) -> Result<usize> {
    if t == 0 {
        return Err(dim_err!("maxpool1d: empty input"));
    }
    if ceil_mode {
        if t <= width {
            return Ok(1);
        }
        let mut n = (t - width).div_ceil(stride) + 1;
        // every window must start inside the input
        if (n - 1) * stride >= t {
            n -= 1;
        }
        Ok(n)
    } else {
        if t < width {
            return Err(dim_err!("maxpool1d: length {t} shorter than window {width}"));
        }
        Ok((t - width) / stride + 1)
    }
}

fn op_name<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddBroadcast(..) => "add_broadcast",
        Op::Matmul(..) => "matmul",
        Op::Bmm { .. } => "bmm",
        Op::Permute { .. } => "permute",
        Op::Reshape(_) => "reshape",
        Op::Relu(_) => "relu",
        Op::Tanh(_) => "tanh",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv1d { .. } => "conv1d",
        Op::MaxPool { .. } => "maxpool1d",
        Op::Dropout { .. } => "dropout",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Concat(..) => "concat_last",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::MaskReplace { .. } => "mask_replace",
    }
}
