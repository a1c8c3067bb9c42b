use serde::{Deserialize, Serialize};

use super::config::AEConfig;
use super::model::{decode_graph, encode_graph, reparameterize_graph, AEModel, EncodedVars};
use super::AutoencoderError;
use crate::geometry::BodySample;
use crate::numerics::{Graph, ParameterStore, Real, Tensor, Var};

type Res<T> = Result<T, AutoencoderError>;

/// A batch of same-subject pose pairs: clouds `[B, N, 3]` and joints `[B, J, 3]`.
#[derive(Debug, Clone)]
pub struct PairBatch<T> {
    pub x1: Tensor<T>,
    pub j1: Tensor<T>,
    pub x2: Tensor<T>,
    pub j2: Tensor<T>,
}

fn flatten<T: Real>(rows: impl Iterator<Item = [f32; 3]>) -> Vec<T> {
    rows.flat_map(|p| p.map(|c| T::lit(c as f64))).collect()
}

impl<T: Real> PairBatch<T> {
    pub fn from_pairs(pairs: &[(&BodySample, &BodySample)]) -> Res<Self> {
        let first = pairs.first().ok_or_else(|| AutoencoderError::Contract("empty pair batch".into()))?;
        let (n, j) = (first.0.vertices.len(), first.0.joints.len());
        for (a, b) in pairs {
            if a.subject_id != b.subject_id {
                return Err(AutoencoderError::Contract(format!(
                    "pair mixes subjects {} and {}",
                    a.subject_id, b.subject_id
                )));
            }
            for s in [a, b] {
                if s.vertices.len() != n || s.joints.len() != j {
                    return Err(AutoencoderError::Shape("samples in a batch differ in size".into()));
                }
            }
        }
        let b = pairs.len();
        let pick = |first: bool, joints: bool| -> Res<Tensor<T>> {
            let data = flatten(pairs.iter().flat_map(|(a, b)| {
                let s = if first { a } else { b };
                if joints { s.joints.clone() } else { s.vertices.clone() }
            }));
            Ok(Tensor::new(&[b, if joints { j } else { n }, 3], data)?)
        };
        Ok(Self { x1: pick(true, false)?, j1: pick(true, true)?, x2: pick(false, false)?, j2: pick(false, true)? })
    }

    pub fn len(&self) -> usize {
        self.x1.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Real>(&self) -> PairBatch<U> {
        PairBatch { x1: self.x1.cast(), j1: self.j1.cast(), x2: self.x2.cast(), j2: self.j2.cast() }
    }
}

/// Loss terms with their weights applied; `total = rec + dis + prior`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<V> {
    pub rec: V,
    pub dis: V,
    pub prior: V,
    pub total: V,
}

impl LossBreakdown<Var> {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossBreakdown<f64> {
        let v = |x: Var| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        LossBreakdown { rec: v(self.rec), dis: v(self.dis), prior: v(self.prior), total: v(self.total) }
    }
}

fn sum_sq<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Res<Var> {
    let d = g.sub(a, b)?;
    let s = g.square(d)?;
    Ok(g.sum(s)?)
}

/// `(1/N) sum ||x - x_hat||^2 + lambda_j (1/J) sum ||J - e||^2`, averaged over the batch.
pub fn loss_rec_graph<T: Real>(g: &mut Graph<T>, x: Var, x_hat: Var, joints: Var, e: Var, lambda_j: f64) -> Res<Var> {
    let xs = g.shape(x).to_vec();
    let js = g.shape(joints).to_vec();
    if xs.len() != 3 || g.shape(x_hat) != xs.as_slice() || g.shape(e) != js.as_slice() || js.len() != 3 || js[0] != xs[0] {
        return Err(AutoencoderError::Shape(format!(
            "rec loss: x {xs:?}, x_hat {:?}, joints {js:?}, e {:?}",
            g.shape(x_hat),
            g.shape(e)
        )));
    }
    let (b, n, j) = (xs[0] as f64, xs[1] as f64, js[1] as f64);
    let verts = sum_sq(g, x, x_hat)?;
    let verts = g.scale(verts, T::lit(1.0 / (b * n)))?;
    let jnt = sum_sq(g, joints, e)?;
    let jnt = g.scale(jnt, T::lit(lambda_j / (b * j)))?;
    Ok(g.add(verts, jnt)?)
}

/// `(lambda_kl / J) sum_i 0.5 sum_d (mu^2 + sigma^2 - log sigma^2 - 1)`, averaged over the batch.
pub fn loss_prior_graph<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var, lambda_kl: f64) -> Res<Var> {
    let s = g.shape(mu).to_vec();
    if s.len() != 3 || g.shape(logvar) != s.as_slice() {
        return Err(AutoencoderError::Shape(format!("prior loss: mu {s:?}, logvar {:?}", g.shape(logvar))));
    }
    let mu2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let a = g.add(mu2, var)?;
    let a = g.sub(a, logvar)?;
    let a = g.offset(a, -T::one())?;
    let total = g.sum(a)?;
    Ok(g.scale(total, T::lit(0.5 * lambda_kl / (s[0] * s[1]) as f64))?)
}

/// Builds the full objective on `g`. With `eps: Some([2B, J, D_h])` intrinsics are
/// sampled by reparameterization (pair order: first clouds, then second clouds);
/// with `None` posterior means are used.
pub fn loss_total_graph<T: Real>(
    g: &mut Graph<T>,
    p: &ParameterStore<T>,
    cfg: &AEConfig,
    batch: &PairBatch<T>,
    eps: Option<&Tensor<T>>,
) -> Res<LossBreakdown<Var>> {
    let b = batch.len();
    let x1 = g.constant(batch.x1.clone());
    let x2 = g.constant(batch.x2.clone());
    let j1 = g.constant(batch.j1.clone());
    let j2 = g.constant(batch.j2.clone());
    let x = g.concat0(&[x1, x2])?;
    let joints = g.concat0(&[j1, j2])?;
    let EncodedVars { e, mu, logvar } = encode_graph(g, p, cfg, x)?;
    let h = match eps {
        Some(eps) => reparameterize_graph(g, mu, logvar, eps)?,
        None => mu,
    };

    let with_cross = cfg.lambda_c > 0.0;
    let (e_in, h_in) = if with_cross {
        let (e1, e2) = (g.narrow0(e, 0, b)?, g.narrow0(e, b, b)?);
        let (h1, h2) = (g.narrow0(h, 0, b)?, g.narrow0(h, b, b)?);
        (g.concat0(&[e, e1, e2])?, g.concat0(&[h, h2, h1])?)
    } else {
        (e, h)
    };
    let decoded = decode_graph(g, p, cfg, e_in, h_in)?;

    let direct = if with_cross { g.narrow0(decoded, 0, 2 * b)? } else { decoded };
    // a batch of 2B direct reconstructions: the per-pair sum is twice the per-sample mean
    let rec = loss_rec_graph(g, x, direct, joints, e, cfg.lambda_j)?;
    let rec = g.scale(rec, T::lit(2.0))?;

    let dis = if with_cross {
        let crossed = g.narrow0(decoded, 2 * b, 2 * b)?;
        let err = sum_sq(g, crossed, x)?;
        g.scale(err, T::lit(cfg.lambda_c / (b * cfg.n_points) as f64))?
    } else {
        g.constant(Tensor::scalar(T::zero()))
    };

    let prior = loss_prior_graph(g, mu, logvar, cfg.lambda_kl)?;
    let prior = g.scale(prior, T::lit(2.0))?;
    let total = g.add(rec, dis)?;
    let total = g.add(total, prior)?;
    Ok(LossBreakdown { rec, dis, prior, total })
}

fn eval_scalar<T: Real>(build: impl FnOnce(&mut Graph<T>) -> Res<Var>) -> Res<f64> {
    let mut g = Graph::inference();
    let v = build(&mut g)?;
    Ok(g.value(v).item().to_f64().unwrap_or(f64::NAN))
}

/// Reconstruction loss of one sample: `x, x_hat: [N, 3]`, `joints, e: [J, 3]`.
pub fn loss_rec<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>, joints: &Tensor<T>, e: &Tensor<T>, lambda_j: f64) -> Res<f64> {
    eval_scalar(|g| {
        let lift = |g: &mut Graph<T>, t: &Tensor<T>| -> Res<Var> {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            Ok(g.constant(t.reshape(&s)?))
        };
        let (x, xh, j, e) = (lift(g, x)?, lift(g, x_hat)?, lift(g, joints)?, lift(g, e)?);
        loss_rec_graph(g, x, xh, j, e, lambda_j)
    })
}

/// Weighted KL of one sample: `mu, logvar: [J, D_h]`.
pub fn loss_prior<T: Real>(mu: &Tensor<T>, logvar: &Tensor<T>, lambda_kl: f64) -> Res<f64> {
    eval_scalar(|g| {
        let mut s = vec![1];
        s.extend_from_slice(mu.shape());
        let m = g.constant(mu.reshape(&s)?);
        let lv = g.constant(logvar.reshape(&s)?);
        loss_prior_graph(g, m, lv, lambda_kl)
    })
}

/// Unweighted cross-reconstruction error
/// `mse(f_dec(E1, H2), X1) + mse(f_dec(E2, H1), X2)` using posterior means.
pub fn loss_cross<T: Real>(x1: &BodySample, x2: &BodySample, model: &AEModel<T>) -> Res<f64> {
    let batch = PairBatch::<T>::from_pairs(&[(x1, x2)])?;
    let cfg = &model.config;
    let post = model.encode(&Tensor::stack(&[batch.x1.reshape(&[cfg.n_points, 3])?, batch.x2.reshape(&[cfg.n_points, 3])?])?)?;
    let (e, h) = (post.e.unstack(), post.mu.unstack());
    let crossed = model.decode(&Tensor::stack(&[e[0].clone(), e[1].clone()])?, &Tensor::stack(&[h[1].clone(), h[0].clone()])?)?;
    let target = Tensor::stack(&[batch.x1.reshape(&[cfg.n_points, 3])?, batch.x2.reshape(&[cfg.n_points, 3])?])?;
    eval_scalar(|g| {
        let a = g.constant(crossed);
        let t = g.constant(target);
        let s = sum_sq(g, a, t)?;
        Ok(g.scale(s, T::lit(1.0 / cfg.n_points as f64))?)
    })
}

/// The objective evaluated without recording gradients.
pub fn loss_total<T: Real>(model: &AEModel<T>, batch: &PairBatch<T>, eps: Option<&Tensor<T>>) -> Res<LossBreakdown<f64>> {
    let mut g = Graph::inference();
    let terms = loss_total_graph(&mut g, &model.params, &model.config, batch, eps)?;
    Ok(terms.values(&g))
}
