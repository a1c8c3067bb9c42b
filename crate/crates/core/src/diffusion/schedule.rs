use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::numerics::{Real, Tensor};

/// Variance schedule tables, indexed by step `t` in `1..=T` through the accessors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `beta_t = beta_1 + (t - 1) / (T - 1) (beta_T - beta_1)`.
pub fn linear_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::Config("schedule needs at least one step".into()));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(DiffusionError::Config(format!("need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}")));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_1]
    } else {
        (0..steps)
            .map(|i| {
                // the endpoint-weighted form reproduces both ends bit-exactly
                let u = i as f64 / (steps - 1) as f64;
                (1.0 - u) * beta_1 + u * beta_t
            })
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut acc = 1.0;
    let alpha_bar = alpha
        .iter()
        .map(|a| {
            acc *= a;
            acc
        })
        .collect();
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar, sigma })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Step { t, steps: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.sigma[self.index(t)?])
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample<T: Real>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>, DiffusionError> {
    same_shape(x0, eps, "q_sample")?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// One ancestral step: `x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_pred) / sqrt(alpha_t) + sigma_t z`,
/// with `z` ignored at `t = 1`.
pub fn p_sample_step<T: Real>(
    x_t: &Tensor<T>,
    t: usize,
    eps_pred: &Tensor<T>,
    z: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>, DiffusionError> {
    same_shape(x_t, eps_pred, "p_sample_step prediction")?;
    same_shape(x_t, z, "p_sample_step noise")?;
    let (beta, alpha, ab) = (schedule.beta(t)?, schedule.alpha(t)?, schedule.alpha_bar(t)?);
    let inv = 1.0 / alpha.sqrt();
    let coef = beta / (1.0 - ab).sqrt();
    let sigma = if t == 1 { 0.0 } else { schedule.sigma(t)? };
    Ok(Tensor::from_fn(x_t.shape(), |i| {
        let x = x_t.data()[i].to_f64().unwrap_or(f64::NAN);
        let e = eps_pred.data()[i].to_f64().unwrap_or(f64::NAN);
        let zi = z.data()[i].to_f64().unwrap_or(f64::NAN);
        let mean = inv * (x - coef * e);
        T::lit(if sigma == 0.0 { mean } else { mean + sigma * zi })
    }))
}

/// Sinusoidal embedding: entries `2k, 2k + 1` are `sin(t w_k), cos(t w_k)` with
/// `w_k = 10000^(-2k / width)`; an odd trailing entry holds the next sine.
pub fn time_embed(t: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let k = i / 2;
            let w = 10000f64.powf(-2.0 * k as f64 / width as f64);
            let a = t as f64 * w;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}
