//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Graph::backward`] replays the tape in reverse and
//! returns a gradient for every node that depends on a trainable leaf.

use std::collections::BTreeMap;

use super::params::ParameterStore;
use super::tensor::{Real, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, T),
    Offset(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, xhat: Vec<T>, rstd: Vec<T> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    MaxAxis1 { x: Var, argmax: Vec<usize> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Concat0(Vec<Var>),
    Narrow0 { x: Var, offset: usize },
    Expand(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    trainable: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient with respect to `v`, zeros if `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err<S: Into<String>>(msg: S) -> NumericsError {
    NumericsError::Shape(msg.into())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each flat index of `out_shape` to the flat index of the permuted source.
fn permute_index_map(src_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let src_strides = strides(src_shape);
    let stride_for_out: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&stride_for_out).map(|(i, s)| i * s).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn expand_index_map(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let src_strides = strides(src_shape);
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..total {
        map.push(
            idx.iter()
                .zip(src_shape)
                .zip(&src_strides)
                .map(|((&i, &n), &s)| if n == 1 { 0 } else { i * s })
                .sum(),
        );
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Graph whose parameters are trainable leaves.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), trainable: true }
    }

    /// Graph for inference: nothing requires a gradient.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), trainable: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &str) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite(format!("output of `{name}`")));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient (used for input sensitivities and gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter. Repeated calls with the same name return the same node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var, NumericsError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| NumericsError::MissingParameter(name.to_string()))?
            .clone();
        let trainable = self.trainable;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, NumericsError> {
        self.same_shape(a, b, name)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn check_suffix(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("{what}: {sb:?} is not a suffix of {sa:?}")));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_suffix(a, b, "add_bcast")?;
        let bv = self.value(b).data();
        let av = self.value(a);
        let mut out = av.to_vec();
        for chunk in out.chunks_mut(bv.len()) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::AddSuffix(a, b), needs, "add_bcast")
    }

    /// `a * b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_suffix(a, b, "mul_bcast")?;
        let bv = self.value(b).data();
        let av = self.value(a);
        let mut out = av.to_vec();
        for chunk in out.chunks_mut(bv.len()) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o *= y;
            }
        }
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MulSuffix(a, b), needs, "mul_bcast")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, s), needs, "scale")
    }

    pub fn offset(&mut self, a: Var, c: T) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| x + c);
        let needs = self.needs(a);
        self.push(value, Op::Offset(a), needs, "offset")
    }

    /// `[..., K] x [K, N] -> [..., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(shape_err(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.value(a).data().as_ptr(),
                k as isize,
                1,
                self.value(b).data().as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), needs, "matmul")
    }

    /// Batched product `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err(format!("bmm inner dims: {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                unsafe {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        av[i * m * k..].as_ptr(),
                        k as isize,
                        1,
                        bv[i * k * n..].as_ptr(),
                        rsb,
                        csb,
                        T::zero(),
                        out[i * m * n..].as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(vec![batch, m, n], out), Op::Bmm { a, b, trans_b }, needs, "bmm")
    }

    fn unary(&mut self, a: Var, name: &str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, NumericsError> {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, op, needs, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, "relu", |x| x.max(T::zero()), Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let c = T::lit(SQRT_2_OVER_PI);
        let k = T::lit(GELU_COEFF);
        let half = T::lit(0.5);
        self.unary(a, "gelu", |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()), Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, "silu", |x| x / (T::one() + (-x).exp()), Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, "exp", |x| x.exp(), Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, "square", |x| x * x, Op::Square(a))
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let d = av.last_dim();
        let mut out = av.to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x = *x / s;
            }
        }
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        let needs = self.needs(a);
        self.push(value, Op::Softmax(a), needs, "softmax")
    }

    /// Layer normalization over the trailing dimension with optional affine terms.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var, NumericsError> {
        self.layer_norm_eps(x, gain, bias, LAYER_NORM_EPS)
    }

    pub fn layer_norm_eps(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var, NumericsError> {
        let d = self.value(x).last_dim();
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(shape_err(format!(
                    "layer_norm: parameter shape {:?} does not match width {d}",
                    self.shape(p)
                )));
            }
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let inv_d = T::lit(1.0 / d as f64);
        let eps = T::lit(eps);
        for row in xv.rows() {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let gv = self.value(g).data();
            for row in out.chunks_mut(d) {
                for (o, &gg) in row.iter_mut().zip(gv) {
                    *o *= gg;
                }
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let needs = self.needs(x) || gain.is_some_and(|g| self.needs(g)) || bias.is_some_and(|b| self.needs(b));
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, needs, "layer_norm")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(format!("permute: {perm:?} invalid for {shape:?}")));
        }
        let map = permute_index_map(&shape, perm);
        let src = self.value(x).data();
        let out: Vec<T> = map.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(out_shape, out), Op::Permute { x, perm: perm.to_vec() }, needs, "permute")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        self.nodes.push(Node { value, op: Op::Reshape(x), needs_grad: needs });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Maximum over axis 1 of a `[B, N, C]` tensor, giving `[B, C]`. Ties pick the first index.
    pub fn max_axis1(&mut self, x: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] == 0 {
            return Err(shape_err(format!("max_axis1 expects [B, N>0, C], got {shape:?}")));
        }
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        let xv = self.value(x).data();
        let mut out = vec![T::neg_infinity(); b * c];
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            for ni in 0..n {
                let row = &xv[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                for ci in 0..c {
                    let o = bi * c + ci;
                    if row[ci] > out[o] {
                        out[o] = row[ci];
                        argmax[o] = (bi * n + ni) * c + ci;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_parts(vec![b, c], out), Op::MaxAxis1 { x, argmax }, needs, "max_axis1")
    }

    /// Concatenation along the trailing dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat of zero parts"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != *lead {
                return Err(shape_err(format!("concat: {:?} vs {s:?}", self.shape(first))));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), needs, "concat")
    }

    /// Concatenation along the leading dimension.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat0 of zero parts"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != *tail {
                return Err(shape_err(format!("concat0: {:?} vs {s:?}", self.shape(first))));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_parts(shape, out), Op::Concat0(parts.to_vec()), needs, "concat0")
    }

    /// Rows `start..start + len` of the leading dimension.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(shape_err(format!("narrow0 {start}..{} of {shape:?}", start + len)));
        }
        let row: usize = shape[1..].iter().product();
        let out = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let needs = self.needs(x);
        self.push(Tensor::from_parts(out_shape, out), Op::Narrow0 { x, offset: start * row }, needs, "narrow0")
    }

    /// Columns `start..start + len` of the trailing dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("slice of a scalar"))?;
        if start + len > d {
            return Err(shape_err(format!("slice {start}..{} out of width {d}", start + len)));
        }
        let out: Vec<T> = self.value(x).rows().flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let needs = self.needs(x);
        self.push(Tensor::from_parts(out_shape, out), Op::Slice { x, start }, needs, "slice_last")
    }

    /// Broadcasts size-1 axes of `x` to `shape` (ranks must agree).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let src = self.shape(x).to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(shape_err(format!("expand {src:?} -> {shape:?}")));
        }
        let map = expand_index_map(&src, shape);
        let xv = self.value(x).data();
        let out = map.iter().map(|&i| xv[i]).collect();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape.to_vec(), out), Op::Expand(x), needs, "expand")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::lit(1.0 / n as f64))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NumericsError::NonFinite("gradient".into()));
            }
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect() })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(buf) = self.grad_buf(grads, v) {
            for (i, g) in buf.iter_mut().enumerate() {
                *g += f(i);
            }
        }
    }

    fn backprop_node(&self, node: &Node<T>, _idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), NumericsError> {
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| dy[i]);
                self.accumulate(grads, *b, |i| dy[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| dy[i]);
                self.accumulate(grads, *b, |i| -dy[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, |i| dy[i] * bv[i]);
                self.accumulate(grads, *b, |i| dy[i] * av[i]);
            }
            Op::AddSuffix(a, b) => {
                self.accumulate(grads, *a, |i| dy[i]);
                if let Some(buf) = self.grad_buf(grads, *b) {
                    let w = buf.len();
                    for chunk in dy.chunks(w) {
                        for (g, &d) in buf.iter_mut().zip(chunk) {
                            *g += d;
                        }
                    }
                }
            }
            Op::MulSuffix(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let w = bv.len();
                self.accumulate(grads, *a, |i| dy[i] * bv[i % w]);
                if let Some(buf) = self.grad_buf(grads, *b) {
                    for (chunk, achunk) in dy.chunks(w).zip(av.chunks(w)) {
                        for ((g, &d), &x) in buf.iter_mut().zip(chunk).zip(achunk) {
                            *g += d * x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |i| dy[i] * *s),
            Op::Offset(a) | Op::Reshape(a) => self.accumulate(grads, *a, |i| dy[i]),
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).len() / k.max(1);
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = self.grad_buf(grads, *a) {
                    unsafe {
                        T::gemm(m, n, k, T::one(), dy.as_ptr(), n as isize, 1, bv.as_ptr(), 1, n as isize, T::one(), da.as_mut_ptr(), k as isize, 1);
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    unsafe {
                        T::gemm(k, m, n, T::one(), av.as_ptr(), 1, k as isize, dy.as_ptr(), n as isize, 1, T::one(), db.as_mut_ptr(), n as isize, 1);
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { self.shape(*b)[1] } else { self.shape(*b)[2] };
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = self.grad_buf(grads, *a) {
                    // da = dy * b^T (or dy * b when b was transposed)
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for i in 0..batch {
                        unsafe {
                            T::gemm(m, n, k, T::one(), dy[i * m * n..].as_ptr(), n as isize, 1, bv[i * k * n..].as_ptr(), rsb, csb, T::one(), da[i * m * k..].as_mut_ptr(), k as isize, 1);
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for i in 0..batch {
                        unsafe {
                            if *trans_b {
                                // db[N,K] = dy^T a
                                T::gemm(n, m, k, T::one(), dy[i * m * n..].as_ptr(), 1, n as isize, av[i * m * k..].as_ptr(), k as isize, 1, T::one(), db[i * k * n..].as_mut_ptr(), k as isize, 1);
                            } else {
                                // db[K,N] = a^T dy
                                T::gemm(k, m, n, T::one(), av[i * m * k..].as_ptr(), 1, k as isize, dy[i * m * n..].as_ptr(), n as isize, 1, T::one(), db[i * k * n..].as_mut_ptr(), n as isize, 1);
                            }
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, |i| if av[i] > T::zero() { dy[i] } else { T::zero() });
            }
            Op::Gelu(a) => {
                let av = val(*a);
                let c = T::lit(SQRT_2_OVER_PI);
                let k = T::lit(GELU_COEFF);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                self.accumulate(grads, *a, |i| {
                    let x = av[i];
                    let th = (c * (x + k * x * x * x)).tanh();
                    let d = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
                    dy[i] * d
                });
            }
            Op::Silu(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, |i| {
                    let x = av[i];
                    let s = T::one() / (T::one() + (-x).exp());
                    dy[i] * s * (T::one() + x * (T::one() - s))
                });
            }
            Op::Exp(a) => {
                let yv = node.value.data();
                self.accumulate(grads, *a, |i| dy[i] * yv[i]);
            }
            Op::Square(a) => {
                let av = val(*a);
                let two = T::lit(2.0);
                self.accumulate(grads, *a, |i| dy[i] * two * av[i]);
            }
            Op::Softmax(a) => {
                let yv = node.value.data();
                let d = node.value.last_dim();
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for ((g, y), dyr) in buf.chunks_mut(d).zip(yv.chunks(d)).zip(dy.chunks(d)) {
                        let dot: T = y.iter().zip(dyr).map(|(&p, &q)| p * q).sum();
                        for j in 0..d {
                            g[j] += y[j] * (dyr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.last_dim();
                let gv = gain.map(val);
                if let Some(b) = bias {
                    if let Some(buf) = self.grad_buf(grads, *b) {
                        for row in dy.chunks(d) {
                            for (g, &v) in buf.iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                    }
                }
                if let Some(g) = gain {
                    if let Some(buf) = self.grad_buf(grads, *g) {
                        for (row, xr) in dy.chunks(d).zip(xhat.chunks(d)) {
                            for ((gg, &v), &xh) in buf.iter_mut().zip(row).zip(xr) {
                                *gg += v * xh;
                            }
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *x) {
                    let inv_d = T::lit(1.0 / d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((g, row), xr)) in buf.chunks_mut(d).zip(dy.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = row[j] * gv.map_or(T::one(), |gg| gg[j]);
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() * inv_d;
                        let mean_dx = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for j in 0..d {
                            g[j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                let map = permute_index_map(self.shape(*x), perm);
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (o, &src) in map.iter().enumerate() {
                        buf[src] += dy[o];
                    }
                }
            }
            Op::MaxAxis1 { x, argmax } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        buf[src] += dy[o];
                    }
                }
            }
            Op::Concat0(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |i| dy[at + i]);
                    at += n;
                }
            }
            Op::Narrow0 { x, offset } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (g, &d) in buf[*offset..].iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(buf) = self.grad_buf(grads, p) {
                        for (g, row) in buf.chunks_mut(w).zip(dy.chunks(total)) {
                            for (gg, &v) in g.iter_mut().zip(&row[col..col + w]) {
                                *gg += v;
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Slice { x, start } => {
                let w = node.value.last_dim();
                let d = self.value(*x).last_dim();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (g, row) in buf.chunks_mut(d).zip(dy.chunks(w)) {
                        for (gg, &v) in g[*start..*start + w].iter_mut().zip(row) {
                            *gg += v;
                        }
                    }
                }
            }
            Op::Expand(x) => {
                let map = expand_index_map(self.shape(*x), node.value.shape());
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (o, &src) in map.iter().enumerate() {
                        buf[src] += dy[o];
                    }
                }
            }
            Op::Sum(x) => {
                let d = dy[0];
                self.accumulate(grads, *x, |_| d);
            }
        }
        Ok(())
    }

    /// Gradients of every bound parameter, keyed by parameter path.
    pub fn param_grads(&self, grads: &Gradients<T>) -> ParameterStore<T> {
        let mut out = ParameterStore::new();
        for (name, v) in &self.params {
            out.insert(name.clone(), grads.get_or_zeros(*v));
        }
        out
    }
}
