use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{AEConfig, ConditionMode};
use super::AutoencoderError;
use crate::latent::LatentPair;
use crate::numerics::{
    init_transformer_block, layer_norm_affine, linear, transformer_block, Graph, Initializer, ParameterStore, Real,
    Tensor, Var,
};

type Res<T> = Result<T, AutoencoderError>;

/// Name of the positional embedding shared by the mixing network and the decoder.
pub const POS_EMBEDDING: &str = "pos";

pub fn init_params<T: Real, R: Rng>(cfg: &AEConfig, rng: &mut R) -> Res<ParameterStore<T>> {
    cfg.validate()?;
    let (j, dz, dh) = (cfg.joints, cfg.d_z, cfg.d_h);
    let mut init = Initializer::new(rng);
    let mut prev = 3;
    for (i, &w) in cfg.point_hidden.iter().chain(std::iter::once(&cfg.d_g)).enumerate() {
        init.linear(&format!("enc.point.{i}"), prev, w)?;
        prev = w;
    }
    init.linear("enc.split.0", cfg.d_g, cfg.split_hidden)?;
    init.linear("enc.split.1", cfg.split_hidden, j * dz)?;
    init.linear("mix.proj", dz, dz)?;
    init.embedding(POS_EMBEDDING, &[j, dz])?;
    for i in 0..cfg.l_blocks {
        init_transformer_block(&mut init, &format!("mix.block{i}"), dz, cfg.mlp_ratio, false)?;
    }
    init.layer_norm("mix.ln_out", dz)?;
    init.linear("head_e.0", dz, dz)?;
    init.linear("head_e.1", dz, 3)?;
    init.linear("head_h.0", dz, dz)?;
    init.linear("head_h.1", dz, 2 * dh)?;
    match cfg.condition_mode {
        ConditionMode::Concat => init.linear("dec.in", 3 + dh, dz)?,
        ConditionMode::Add => {
            init.linear("dec.in_e", 3, dz)?;
            init.linear("dec.in_h", dh, dz)?;
        }
        ConditionMode::CrossAttention => {
            init.linear("dec.in_h", dh, dz)?;
            init.linear("dec.ctx", 3, dz)?;
        }
    }
    let cross = cfg.condition_mode == ConditionMode::CrossAttention;
    for i in 0..cfg.l_dec_blocks {
        init_transformer_block(&mut init, &format!("dec.block{i}"), dz, cfg.mlp_ratio, cross)?;
    }
    init.layer_norm("dec.ln_out", dz)?;
    init.linear("dec.head.0", dz, 2 * dz)?;
    init.linear("dec.head.1", 2 * dz, cfg.points_per_joint() * 3)?;
    Ok(init.finish())
}

fn expect_shape<T: Real>(g: &Graph<T>, v: Var, want: &[usize], what: &str) -> Res<()> {
    if g.shape(v) != want {
        return Err(AutoencoderError::Shape(format!("{what}: expected {want:?}, got {:?}", g.shape(v))));
    }
    Ok(())
}

fn batch_of<T: Real>(g: &Graph<T>, v: Var) -> usize {
    g.shape(v).first().copied().unwrap_or(0)
}

fn two_layer<T: Real>(g: &mut Graph<T>, p: &ParameterStore<T>, prefix: &str, x: Var) -> Res<Var> {
    let h = linear(g, p, &format!("{prefix}.0"), x)?;
    let h = g.gelu(h)?;
    Ok(linear(g, p, &format!("{prefix}.1"), h)?)
}

/// Shared per-point network followed by a max-pool over points: `[B, N, 3] -> [B, D_g]`.
pub fn global_latent_graph<T: Real>(g: &mut Graph<T>, p: &ParameterStore<T>, cfg: &AEConfig, x: Var) -> Res<Var> {
    let b = batch_of(g, x);
    expect_shape(g, x, &[b, cfg.n_points, 3], "point cloud")?;
    let layers = cfg.point_hidden.len() + 1;
    let mut h = x;
    for i in 0..layers {
        h = linear(g, p, &format!("enc.point.{i}"), h)?;
        if i + 1 < layers {
            h = g.relu(h)?;
        }
    }
    Ok(g.max_axis1(h)?)
}

/// `[B, N, 3] -> [B, J, D_z]`.
pub fn tokenize_graph<T: Real>(g: &mut Graph<T>, p: &ParameterStore<T>, cfg: &AEConfig, x: Var) -> Res<Var> {
    let b = batch_of(g, x);
    let z = global_latent_graph(g, p, cfg, x)?;
    let f = two_layer(g, p, "enc.split", z)?;
    Ok(g.reshape(f, &[b, cfg.joints, cfg.d_z])?)
}

/// Graph handles for the encoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub e: Var,
    pub mu: Var,
    pub logvar: Var,
}

pub fn mix_graph<T: Real>(g: &mut Graph<T>, p: &ParameterStore<T>, cfg: &AEConfig, tokens: Var) -> Res<EncodedVars> {
    let b = batch_of(g, tokens);
    expect_shape(g, tokens, &[b, cfg.joints, cfg.d_z], "tokens")?;
    let z = linear(g, p, "mix.proj", tokens)?;
    let pos = g.param(p, POS_EMBEDDING)?;
    let mut z = g.add_bcast(z, pos)?;
    for i in 0..cfg.l_blocks {
        z = transformer_block(g, p, &format!("mix.block{i}"), z, None, cfg.heads)?;
    }
    let z = layer_norm_affine(g, p, "mix.ln_out", z)?;
    let e = two_layer(g, p, "head_e", z)?;
    let stats = two_layer(g, p, "head_h", z)?;
    let mu = g.slice_last(stats, 0, cfg.d_h)?;
    let logvar = g.slice_last(stats, cfg.d_h, cfg.d_h)?;
    Ok(EncodedVars { e, mu, logvar })
}

pub fn encode_graph<T: Real>(g: &mut Graph<T>, p: &ParameterStore<T>, cfg: &AEConfig, x: Var) -> Res<EncodedVars> {
    let tokens = tokenize_graph(g, p, cfg, x)?;
    mix_graph(g, p, cfg, tokens)
}

/// `mu + exp(logvar / 2) * eps`.
pub fn reparameterize_graph<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var, eps: &Tensor<T>) -> Res<Var> {
    if g.shape(mu) != eps.shape() {
        return Err(AutoencoderError::Shape(format!("noise {:?} vs mean {:?}", eps.shape(), g.shape(mu))));
    }
    let half = g.scale(logvar, T::lit(0.5))?;
    let std = g.exp(half)?;
    let noise = g.constant(eps.clone());
    let spread = g.mul(std, noise)?;
    Ok(g.add(mu, spread)?)
}

/// `e: [B, J, 3]`, `h: [B, J, D_h]` to points `[B, N, 3]`.
pub fn decode_graph<T: Real>(g: &mut Graph<T>, p: &ParameterStore<T>, cfg: &AEConfig, e: Var, h: Var) -> Res<Var> {
    let b = batch_of(g, e);
    expect_shape(g, e, &[b, cfg.joints, 3], "extrinsics")?;
    expect_shape(g, h, &[b, cfg.joints, cfg.d_h], "intrinsics")?;
    let (tokens, context) = match cfg.condition_mode {
        ConditionMode::Concat => {
            let eh = g.concat(&[e, h])?;
            (linear(g, p, "dec.in", eh)?, None)
        }
        ConditionMode::Add => {
            let te = linear(g, p, "dec.in_e", e)?;
            let th = linear(g, p, "dec.in_h", h)?;
            (g.add(te, th)?, None)
        }
        ConditionMode::CrossAttention => {
            let th = linear(g, p, "dec.in_h", h)?;
            let ctx = linear(g, p, "dec.ctx", e)?;
            (th, Some(ctx))
        }
    };
    let pos = g.param(p, POS_EMBEDDING)?;
    let mut z = g.add_bcast(tokens, pos)?;
    for i in 0..cfg.l_dec_blocks {
        z = transformer_block(g, p, &format!("dec.block{i}"), z, context, cfg.heads)?;
    }
    let z = layer_norm_affine(g, p, "dec.ln_out", z)?;
    let out = two_layer(g, p, "dec.head", z)?;
    Ok(g.reshape(out, &[b, cfg.n_points, 3])?)
}

/// Encoder outputs as tensors, batched over the leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior<T> {
    pub e: Tensor<T>,
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

/// Autoencoder configuration with its parameters.
#[derive(Debug, Clone)]
pub struct AEModel<T = f32> {
    pub config: AEConfig,
    pub params: ParameterStore<T>,
}

fn batched<T: Real>(x: &Tensor<T>, inner: &[usize], what: &str) -> Res<Tensor<T>> {
    let s = x.shape();
    if s == inner {
        let mut b = vec![1];
        b.extend_from_slice(inner);
        return Ok(x.reshape(&b)?);
    }
    if s.len() == inner.len() + 1 && s[1..] == *inner {
        return Ok(x.clone());
    }
    Err(AutoencoderError::Shape(format!("{what}: expected [B, {inner:?}], got {s:?}")))
}

impl<T: Real> AEModel<T> {
    pub fn new(config: AEConfig, seed: u64) -> Res<Self> {
        let params = init_params(&config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking they have exactly the expected names and shapes.
    pub fn from_params(config: AEConfig, params: ParameterStore<T>) -> Res<Self> {
        let expected: ParameterStore<T> = init_params(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&expected, &params)?;
        Ok(Self { config, params })
    }

    fn run<F>(&self, f: F) -> Res<Tensor<T>>
    where
        F: FnOnce(&mut Graph<T>) -> Res<Var>,
    {
        let mut g = Graph::inference();
        let out = f(&mut g)?;
        Ok(g.value(out).clone())
    }

    /// `[B, N, 3]` (or a single `[N, 3]`) to `[B, D_g]`.
    pub fn global_latent(&self, x: &Tensor<T>) -> Res<Tensor<T>> {
        let x = batched(x, &[self.config.n_points, 3], "point cloud")?;
        self.run(|g| {
            let v = g.constant(x);
            global_latent_graph(g, &self.params, &self.config, v)
        })
    }

    pub fn tokenize(&self, x: &Tensor<T>) -> Res<Tensor<T>> {
        let x = batched(x, &[self.config.n_points, 3], "point cloud")?;
        self.run(|g| {
            let v = g.constant(x);
            tokenize_graph(g, &self.params, &self.config, v)
        })
    }

    fn posterior(&self, build: impl FnOnce(&mut Graph<T>) -> Res<EncodedVars>) -> Res<Posterior<T>> {
        let mut g = Graph::inference();
        let out = build(&mut g)?;
        Ok(Posterior {
            e: g.value(out.e).clone(),
            mu: g.value(out.mu).clone(),
            logvar: g.value(out.logvar).clone(),
        })
    }

    pub fn mix(&self, tokens: &Tensor<T>) -> Res<Posterior<T>> {
        let t = batched(tokens, &[self.config.joints, self.config.d_z], "tokens")?;
        self.posterior(|g| {
            let v = g.constant(t);
            mix_graph(g, &self.params, &self.config, v)
        })
    }

    pub fn encode(&self, x: &Tensor<T>) -> Res<Posterior<T>> {
        let x = batched(x, &[self.config.n_points, 3], "point cloud")?;
        self.posterior(|g| {
            let v = g.constant(x);
            encode_graph(g, &self.params, &self.config, v)
        })
    }

    pub fn decode(&self, e: &Tensor<T>, h: &Tensor<T>) -> Res<Tensor<T>> {
        let e = batched(e, &[self.config.joints, 3], "extrinsics")?;
        let h = batched(h, &[self.config.joints, self.config.d_h], "intrinsics")?;
        if e.shape()[0] != h.shape()[0] {
            return Err(AutoencoderError::Shape(format!("batch {} vs {}", e.shape()[0], h.shape()[0])));
        }
        self.run(|g| {
            let (ev, hv) = (g.constant(e), g.constant(h));
            decode_graph(g, &self.params, &self.config, ev, hv)
        })
    }
}

impl AEModel<f32> {
    /// Posterior-mean latent of one cloud.
    pub fn encode_cloud(&self, points: &[[f32; 3]]) -> Res<LatentPair> {
        Ok(self.encode_clouds(&[points])?.remove(0))
    }

    pub fn encode_clouds(&self, clouds: &[&[[f32; 3]]]) -> Res<Vec<LatentPair>> {
        let n = self.config.n_points;
        if let Some(bad) = clouds.iter().find(|c| c.len() != n) {
            return Err(AutoencoderError::Shape(format!("expected {n} points, got {}", bad.len())));
        }
        let flat: Vec<f32> = clouds.iter().flat_map(|c| c.iter().flatten().copied()).collect();
        let x = Tensor::new(&[clouds.len(), n, 3], flat)?;
        let post = self.encode(&x)?;
        post.e
            .unstack()
            .into_iter()
            .zip(post.mu.unstack())
            .map(|(e, h)| LatentPair::new(e, h).map_err(|err| AutoencoderError::Shape(err.to_string())))
            .collect()
    }

    pub fn decode_latent(&self, latent: &LatentPair) -> Res<Vec<[f32; 3]>> {
        Ok(self.decode_latents(std::slice::from_ref(latent))?.remove(0))
    }

    pub fn decode_latents(&self, latents: &[LatentPair]) -> Res<Vec<Vec<[f32; 3]>>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let e = Tensor::stack(&latents.iter().map(|l| l.e.clone()).collect::<Vec<_>>())?;
        let h = Tensor::stack(&latents.iter().map(|l| l.h.clone()).collect::<Vec<_>>())?;
        let out = self.decode(&e, &h)?;
        Ok(out.unstack().iter().map(|t| t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()).collect())
    }
}

/// Sampling mode for the intrinsic posterior.
pub enum Sampling<'a, R> {
    Eval,
    Train(&'a mut R),
}

/// `mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)`; evaluation returns `mu`.
pub fn reparameterize<T: Real, R: Rng>(mu: &Tensor<T>, logvar: &Tensor<T>, mode: Sampling<'_, R>) -> Res<Tensor<T>> {
    if mu.shape() != logvar.shape() {
        return Err(AutoencoderError::Shape(format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape())));
    }
    match mode {
        Sampling::Eval => Ok(mu.clone()),
        Sampling::Train(rng) => {
            let eps = standard_normal::<T, R>(mu.shape(), rng);
            Ok(Tensor::from_fn(mu.shape(), |i| {
                mu.data()[i] + (logvar.data()[i] * T::lit(0.5)).exp() * eps.data()[i]
            }))
        }
    }
}

pub fn standard_normal<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(StandardNormal.sample(rng)))
}

pub fn check_layout<T: Real>(expected: &ParameterStore<T>, actual: &ParameterStore<T>) -> Res<()> {
    match actual.layout_mismatch(expected) {
        Some(m) => Err(AutoencoderError::Layout(m)),
        None => Ok(()),
    }
}
