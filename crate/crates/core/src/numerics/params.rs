//! Named parameter storage and initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::{Real, Tensor};
use super::NumericsError;

/// Parameters keyed by dotted path. Iteration order is lexicographic by path,
/// which keeps checkpoint layouts stable.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for ParameterStore<T> {
    fn default() -> Self {
        Self { tensors: BTreeMap::new() }
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new parameter; a path may only be registered once.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<(), NumericsError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// `(path, shape)` pairs in iteration order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    /// Same paths with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.manifest() == other.manifest()
    }

    /// Describes the first name or shape difference from `expected`, if any.
    pub fn layout_mismatch(&self, expected: &Self) -> Option<String> {
        let (want, got) = (expected.manifest(), self.manifest());
        for i in 0..want.len().max(got.len()) {
            match (want.get(i), got.get(i)) {
                (Some(w), Some(a)) if w == a => {}
                (Some(w), Some(a)) if w.0 == a.0 => {
                    return Some(format!("`{}` has shape {:?}, expected {:?}", w.0, a.1, w.1));
                }
                (Some(w), Some(a)) if w.0 < a.0 => return Some(format!("missing parameter `{}`", w.0)),
                (_, Some(a)) => return Some(format!("unexpected parameter `{}`", a.0)),
                (Some(w), None) => return Some(format!("missing parameter `{}`", w.0)),
                (None, None) => unreachable!(),
            }
        }
        None
    }

    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Scales every tensor in place.
    pub fn scale_all(&mut self, s: T) {
        for t in self.tensors.values_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| {
                let v = x.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Draws initial parameter values in 64-bit and stores them at precision `T`,
/// so 32- and 64-bit models built from the same seed agree up to rounding.
pub struct Initializer<'a, R: Rng, T: Real> {
    rng: &'a mut R,
    store: ParameterStore<T>,
}

impl<'a, R: Rng, T: Real> Initializer<'a, R, T> {
    pub fn new(rng: &'a mut R) -> Self {
        Self { rng, store: ParameterStore::new() }
    }

    pub fn finish(self) -> ParameterStore<T> {
        self.store
    }

    fn put(&mut self, name: String, shape: &[usize], values: Vec<f64>) -> Result<(), NumericsError> {
        let t = Tensor::new(shape, values.into_iter().map(T::lit).collect())?;
        self.store.register(name, t)
    }

    /// `weight [fan_in, fan_out] ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, `bias = 0`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<(), NumericsError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = (0..fan_in * fan_out).map(|_| dist.sample(self.rng)).collect();
        self.put(format!("{prefix}.weight"), &[fan_in, fan_out], w)?;
        self.put(format!("{prefix}.bias"), &[fan_out], vec![0.0; fan_out])
    }

    /// Linear layer with weight and bias both zero.
    pub fn zero_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<(), NumericsError> {
        self.put(format!("{prefix}.weight"), &[fan_in, fan_out], vec![0.0; fan_in * fan_out])?;
        self.put(format!("{prefix}.bias"), &[fan_out], vec![0.0; fan_out])
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) -> Result<(), NumericsError> {
        self.put(format!("{prefix}.gain"), &[width], vec![1.0; width])?;
        self.put(format!("{prefix}.bias"), &[width], vec![0.0; width])
    }

    /// `N(0, 0.02^2)` entries.
    pub fn embedding(&mut self, name: &str, shape: &[usize]) -> Result<(), NumericsError> {
        let dist = Normal::new(0.0, 0.02).expect("valid normal");
        let n = shape.iter().product();
        let v = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.put(name.to_string(), shape, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = ParameterStore::<f32>::new();
        s.register("a", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(s.register("a", Tensor::zeros(&[1])), Err(NumericsError::DuplicateParameter(_))));
    }

    #[test]
    fn iteration_order_is_sorted() {
        let mut s = ParameterStore::<f32>::new();
        for n in ["z.w", "a.b", "m"] {
            s.register(n, Tensor::zeros(&[1])).unwrap();
        }
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a.b", "m", "z.w"]);
    }

    #[test]
    fn linear_init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Initializer::<_, f64>::new(&mut rng);
        init.linear("l", 16, 8).unwrap();
        let s = init.finish();
        let bound = 0.25;
        assert!(s.get("l.weight").unwrap().data().iter().all(|w| w.abs() <= bound));
        assert!(s.get("l.bias").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn f32_and_f64_inits_agree() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let mut ia = Initializer::<_, f32>::new(&mut a);
        let mut ib = Initializer::<_, f64>::new(&mut b);
        ia.embedding("p", &[4, 4]).unwrap();
        ib.embedding("p", &[4, 4]).unwrap();
        assert_eq!(ia.finish(), ib.finish().cast::<f32>());
    }
}
