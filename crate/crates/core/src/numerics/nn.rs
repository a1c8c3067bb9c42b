//! Network building blocks expressed on the tape, plus eager tensor versions of
//! the core operations.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Initializer, ParameterStore};
use super::tensor::{Real, Tensor};
use super::NumericsError;

type Res<T> = Result<T, NumericsError>;

/// `x . W + b` with `W = {prefix}.weight [in, out]` and `b = {prefix}.bias [out]`.
pub fn linear<T: Real>(g: &mut Graph<T>, p: &ParameterStore<T>, prefix: &str, x: Var) -> Res<Var> {
    let w = g.param(p, &format!("{prefix}.weight"))?;
    let b = g.param(p, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bcast(y, b)
}

pub fn layer_norm_affine<T: Real>(g: &mut Graph<T>, p: &ParameterStore<T>, prefix: &str, x: Var) -> Res<Var> {
    let gain = g.param(p, &format!("{prefix}.gain"))?;
    let bias = g.param(p, &format!("{prefix}.bias"))?;
    g.layer_norm(x, Some(gain), Some(bias))
}

/// `(1 + scale) * x + shift`, elementwise.
pub fn modulate<T: Real>(g: &mut Graph<T>, x: Var, scale: Var, shift: Var) -> Res<Var> {
    let s1 = g.offset(scale, T::one())?;
    let y = g.mul(x, s1)?;
    g.add(y, shift)
}

/// `(1 + scale) * LN(x) + shift` with a parameter-free layer norm.
pub fn adaptive_modulate_var<T: Real>(g: &mut Graph<T>, x: Var, scale: Var, shift: Var) -> Res<Var> {
    let n = g.layer_norm(x, None, None)?;
    modulate(g, n, scale, shift)
}

/// Scaled dot-product attention with `heads` heads over `[B, Jq, D]` queries and
/// `[B, Jk, D]` keys/values.
pub fn multi_head_attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Res<Var> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    if qs.len() != 3 || ks.len() != 3 || g.shape(v) != ks.as_slice() || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(NumericsError::Shape(format!(
            "attention: q {qs:?}, k {ks:?}, v {:?}",
            g.shape(v)
        )));
    }
    let (b, jq, d) = (qs[0], qs[1], qs[2]);
    let jk = ks[1];
    if heads == 0 || d % heads != 0 {
        return Err(NumericsError::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |g: &mut Graph<T>, x: Var, j: usize| -> Res<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let r = g.reshape(x, &[b, j, heads, dh])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, &[b * heads, j, dh])
    };
    let qh = split(g, q, jq)?;
    let kh = split(g, k, jk)?;
    let vh = split(g, v, jk)?;
    let scores = g.bmm(qh, kh, true)?;
    let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()))?;
    let weights = g.softmax(scores)?;
    let out = g.bmm(weights, vh, false)?;
    if heads == 1 {
        return Ok(out);
    }
    let r = g.reshape(out, &[b, heads, jq, dh])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[b, jq, d])
}

/// Attention sub-layer with learned projections `{prefix}.{q,k,v,o}`.
pub fn attention_layer<T: Real>(
    g: &mut Graph<T>,
    p: &ParameterStore<T>,
    prefix: &str,
    x: Var,
    context: Var,
    heads: usize,
) -> Res<Var> {
    let q = linear(g, p, &format!("{prefix}.q"), x)?;
    let k = linear(g, p, &format!("{prefix}.k"), context)?;
    let v = linear(g, p, &format!("{prefix}.v"), context)?;
    let a = multi_head_attention(g, q, k, v, heads)?;
    linear(g, p, &format!("{prefix}.o"), a)
}

pub fn feed_forward<T: Real>(g: &mut Graph<T>, p: &ParameterStore<T>, prefix: &str, x: Var) -> Res<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, p, &format!("{prefix}.fc2"), h)
}

/// Pre-norm transformer encoder block; with `context`, a cross-attention
/// sub-layer over it sits between self-attention and the feedforward.
pub fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    p: &ParameterStore<T>,
    prefix: &str,
    x: Var,
    context: Option<Var>,
    heads: usize,
) -> Res<Var> {
    let n = layer_norm_affine(g, p, &format!("{prefix}.ln1"), x)?;
    let a = attention_layer(g, p, &format!("{prefix}.attn"), n, n, heads)?;
    let mut x = g.add(x, a)?;
    if let Some(ctx) = context {
        let n = layer_norm_affine(g, p, &format!("{prefix}.ln_cross"), x)?;
        let a = attention_layer(g, p, &format!("{prefix}.cross"), n, ctx, heads)?;
        x = g.add(x, a)?;
    }
    let n = layer_norm_affine(g, p, &format!("{prefix}.ln2"), x)?;
    let f = feed_forward(g, p, &format!("{prefix}.mlp"), n)?;
    g.add(x, f)
}

pub fn init_attention<R: Rng, T: Real>(init: &mut Initializer<'_, R, T>, prefix: &str, width: usize) -> Res<()> {
    for part in ["q", "k", "v", "o"] {
        init.linear(&format!("{prefix}.{part}"), width, width)?;
    }
    Ok(())
}

pub fn init_feed_forward<R: Rng, T: Real>(
    init: &mut Initializer<'_, R, T>,
    prefix: &str,
    width: usize,
    mlp_ratio: usize,
) -> Res<()> {
    init.linear(&format!("{prefix}.fc1"), width, width * mlp_ratio)?;
    init.linear(&format!("{prefix}.fc2"), width * mlp_ratio, width)
}

pub fn init_transformer_block<R: Rng, T: Real>(
    init: &mut Initializer<'_, R, T>,
    prefix: &str,
    width: usize,
    mlp_ratio: usize,
    cross: bool,
) -> Res<()> {
    init.layer_norm(&format!("{prefix}.ln1"), width)?;
    init_attention(init, &format!("{prefix}.attn"), width)?;
    if cross {
        init.layer_norm(&format!("{prefix}.ln_cross"), width)?;
        init_attention(init, &format!("{prefix}.cross"), width)?;
    }
    init.layer_norm(&format!("{prefix}.ln2"), width)?;
    init_feed_forward(init, &format!("{prefix}.mlp"), width, mlp_ratio)
}

fn batched<T: Real>(x: &Tensor<T>, what: &str) -> Res<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(NumericsError::Shape(format!("{what} expects a [J, D] tensor, got {:?}", x.shape())));
    }
    let mut s = vec![1];
    s.extend_from_slice(x.shape());
    x.reshape(&s)
}

/// Multi-head scaled dot-product attention on `[J, D]` tensors.
pub fn attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Res<Tensor<T>> {
    let mut g = Graph::inference();
    let (qv, kv, vv) = (
        g.constant(batched(q, "attention")?),
        g.constant(batched(k, "attention")?),
        g.constant(batched(v, "attention")?),
    );
    let out = multi_head_attention(&mut g, qv, kv, vv, heads)?;
    let shape = [q.shape()[0], q.shape()[1]];
    g.value(out).reshape(&shape)
}

/// Row-wise layer normalization with gain and bias over the trailing dimension.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Res<Tensor<T>> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let gv = g.constant(gain.clone());
    let bv = g.constant(bias.clone());
    let y = g.layer_norm_eps(xv, Some(gv), Some(bv), eps)?;
    Ok(g.value(y).clone())
}

/// `(1 + scale) * LN(x) + shift` with the default epsilon.
pub fn adaptive_modulate<T: Real>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Res<Tensor<T>> {
    if x.shape() != scale.shape() || x.shape() != shift.shape() {
        return Err(NumericsError::Shape(format!(
            "adaptive_modulate: x {:?}, scale {:?}, shift {:?}",
            x.shape(),
            scale.shape(),
            shift.shape()
        )));
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let sv = g.constant(scale.clone());
    let hv = g.constant(shift.clone());
    let y = adaptive_modulate_var(&mut g, xv, sv, hv)?;
    Ok(g.value(y).clone())
}
