use super::DiffusionError;
use crate::numerics::{ParameterStore, Real};

/// Exponential moving average of parameters, kept in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: ParameterStore<f64>,
    pub ratio: f64,
}

impl EmaState {
    pub fn new<T: Real>(params: &ParameterStore<T>, ratio: f64) -> Result<Self, DiffusionError> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(DiffusionError::Config(format!("EMA ratio {ratio} outside [0, 1]")));
        }
        Ok(Self { shadow: params.cast(), ratio })
    }

    /// `shadow <- ratio * shadow + (1 - ratio) * param` for every path.
    pub fn update<T: Real>(&mut self, params: &ParameterStore<T>) -> Result<(), DiffusionError> {
        let probe: ParameterStore<f64> = params.cast();
        if let Some(m) = probe.layout_mismatch(&self.shadow) {
            return Err(DiffusionError::Contract(format!("EMA paths differ from model: {m}")));
        }
        let (r, q) = (self.ratio, 1.0 - self.ratio);
        for ((_, s), (_, p)) in self.shadow.iter_mut().zip(probe.iter()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = r * *a + q * b;
            }
        }
        Ok(())
    }

    pub fn weights<T: Real>(&self) -> ParameterStore<T> {
        self.shadow.cast()
    }
}
