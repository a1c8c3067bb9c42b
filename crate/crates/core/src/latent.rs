//! The joint-aware latent: per-joint positions `e` (extrinsics) and per-joint
//! feature vectors `h` (intrinsics), plus editing arithmetic and the
//! standardization used by the diffusion models.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::numerics::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum LatentError {
    #[error("latent shape mismatch: {0}")]
    Shape(String),
    #[error("interpolation weight {0} outside [0, 1]")]
    Alpha(f64),
    #[error("non-finite latent value")]
    NonFinite,
}

/// `e: [J, 3]`, `h: [J, D_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub e: Tensor<f32>,
    pub h: Tensor<f32>,
}

/// Which half of a latent an edit applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Extrinsics,
    Intrinsics,
    Both,
}

impl std::str::FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "extrinsics" => Ok(Self::Extrinsics),
            "intrinsics" => Ok(Self::Intrinsics),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown component `{other}` (expected extrinsics, intrinsics or both)")),
        }
    }
}

impl LatentPair {
    pub fn new(e: Tensor<f32>, h: Tensor<f32>) -> Result<Self, LatentError> {
        let pair = Self { e, h };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<(), LatentError> {
        let (es, hs) = (self.e.shape(), self.h.shape());
        if es.len() != 2 || es[1] != 3 || hs.len() != 2 || hs[0] != es[0] {
            return Err(LatentError::Shape(format!("e {es:?}, h {hs:?}")));
        }
        if !self.e.all_finite() || !self.h.all_finite() {
            return Err(LatentError::NonFinite);
        }
        Ok(())
    }

    pub fn joints(&self) -> usize {
        self.e.shape()[0]
    }

    pub fn intrinsic_width(&self) -> usize {
        self.h.shape()[1]
    }

    fn check_compatible(&self, other: &Self) -> Result<(), LatentError> {
        if self.e.shape() != other.e.shape() || self.h.shape() != other.h.shape() {
            return Err(LatentError::Shape(format!(
                "({:?}, {:?}) vs ({:?}, {:?})",
                self.e.shape(),
                self.h.shape(),
                other.e.shape(),
                other.h.shape()
            )));
        }
        Ok(())
    }

    /// Joint positions as rows.
    pub fn joint_positions(&self) -> Vec<[f32; 3]> {
        self.e.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }
}

fn lerp(a: &Tensor<f32>, b: &Tensor<f32>, alpha: f32) -> Tensor<f32> {
    a.zip_map(b, |x, y| (1.0 - alpha) * x + alpha * y).expect("shapes checked")
}

/// `(1 - alpha) a + alpha b` on the selected component; the other is copied from `a`.
pub fn interpolate(a: &LatentPair, b: &LatentPair, alpha: f64, which: Component) -> Result<LatentPair, LatentError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LatentError::Alpha(alpha));
    }
    a.check_compatible(b)?;
    let t = alpha as f32;
    let e = match which {
        Component::Extrinsics | Component::Both => lerp(&a.e, &b.e, t),
        Component::Intrinsics => a.e.clone(),
    };
    let h = match which {
        Component::Intrinsics | Component::Both => lerp(&a.h, &b.h, t),
        Component::Extrinsics => a.h.clone(),
    };
    Ok(LatentPair { e, h })
}

/// Returns `(E_a, H_b)` and `(E_b, H_a)`.
pub fn swap_intrinsics(a: &LatentPair, b: &LatentPair) -> Result<(LatentPair, LatentPair), LatentError> {
    a.check_compatible(b)?;
    Ok((LatentPair { e: a.e.clone(), h: b.h.clone() }, LatentPair { e: b.e.clone(), h: a.h.clone() }))
}

pub const MIN_STD: f64 = 1e-6;

/// Per-dimension mean and standard deviation over a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub joints: usize,
    pub intrinsic_width: usize,
    pub e_mean: Vec<f64>,
    pub e_std: Vec<f64>,
    pub h_mean: Vec<f64>,
    pub h_std: Vec<f64>,
}

fn moments<'a>(rows: impl Iterator<Item = &'a [f32]> + Clone, width: usize) -> (Vec<f64>, Vec<f64>) {
    let count = rows.clone().count().max(1) as f64;
    let mut mean = vec![0.0; width];
    for r in rows.clone() {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; width];
    for r in rows {
        for ((v, &x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x as f64 - m).powi(2);
        }
    }
    let std = var.into_iter().map(|v| (v / count).sqrt().max(MIN_STD)).collect();
    (mean, std)
}

impl LatentStats {
    pub fn compute(latents: &[LatentPair]) -> Result<Self, LatentError> {
        let first = latents.first().ok_or_else(|| LatentError::Shape("no latents".into()))?;
        for l in latents {
            first.check_compatible(l)?;
        }
        let (j, dh) = (first.joints(), first.intrinsic_width());
        let (e_mean, e_std) = moments(latents.iter().map(|l| l.e.data()), j * 3);
        let (h_mean, h_std) = moments(latents.iter().map(|l| l.h.data()), j * dh);
        Ok(Self { joints: j, intrinsic_width: dh, e_mean, e_std, h_mean, h_std })
    }

    fn check(&self, x: &LatentPair) -> Result<(), LatentError> {
        if x.e.shape() != [self.joints, 3] || x.h.shape() != [self.joints, self.intrinsic_width] {
            return Err(LatentError::Shape(format!(
                "stats for J={} D_h={}, latent e {:?} h {:?}",
                self.joints,
                self.intrinsic_width,
                x.e.shape(),
                x.h.shape()
            )));
        }
        Ok(())
    }

    pub fn standardize_e(&self, e: &Tensor<f32>) -> Tensor<f32> {
        affine(e, &self.e_mean, &self.e_std, true)
    }

    pub fn destandardize_e(&self, e: &Tensor<f32>) -> Tensor<f32> {
        affine(e, &self.e_mean, &self.e_std, false)
    }

    pub fn standardize_h(&self, h: &Tensor<f32>) -> Tensor<f32> {
        affine(h, &self.h_mean, &self.h_std, true)
    }

    pub fn destandardize_h(&self, h: &Tensor<f32>) -> Tensor<f32> {
        affine(h, &self.h_mean, &self.h_std, false)
    }
}

/// Applies per-dimension `(x - mean) / std` (or its inverse) to every trailing
/// block of `mean.len()` values, so batched `[B, J, D]` tensors work too.
fn affine(x: &Tensor<f32>, mean: &[f64], std: &[f64], forward: bool) -> Tensor<f32> {
    let w = mean.len();
    Tensor::from_fn(x.shape(), |i| {
        let (v, m, s) = (x.data()[i] as f64, mean[i % w], std[i % w]);
        (if forward { (v - m) / s } else { v * s + m }) as f32
    })
}

pub fn standardize(x: &LatentPair, stats: &LatentStats) -> Result<LatentPair, LatentError> {
    stats.check(x)?;
    Ok(LatentPair { e: stats.standardize_e(&x.e), h: stats.standardize_h(&x.h) })
}

pub fn destandardize(x: &LatentPair, stats: &LatentStats) -> Result<LatentPair, LatentError> {
    stats.check(x)?;
    Ok(LatentPair { e: stats.destandardize_e(&x.e), h: stats.destandardize_h(&x.h) })
}

#[derive(Serialize, Deserialize)]
struct LatentJson {
    e: Vec<Vec<f32>>,
    h: Vec<Vec<f32>>,
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    t.rows().map(<[f32]>::to_vec).collect()
}

fn from_rows(rows: Vec<Vec<f32>>, what: &str) -> Result<Tensor<f32>, String> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(format!("ragged `{what}` rows"));
    }
    let n = rows.len();
    Tensor::new(&[n, width], rows.into_iter().flatten().collect()).map_err(|e| e.to_string())
}

impl Serialize for LatentPair {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        LatentJson { e: rows(&self.e), h: rows(&self.h) }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LatentPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = LatentJson::deserialize(d)?;
        let e = from_rows(raw.e, "e").map_err(serde::de::Error::custom)?;
        let h = from_rows(raw.h, "h").map_err(serde::de::Error::custom)?;
        LatentPair::new(e, h).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_pair(rng: &mut ChaCha8Rng, j: usize, dh: usize) -> LatentPair {
        let mut t = |shape: &[usize]| Tensor::from_fn(shape, |_| StandardNormal.sample(rng));
        LatentPair::new(t(&[j, 3]), t(&[j, dh])).unwrap()
    }

    #[test]
    fn interpolation_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = (random_pair(&mut rng, 4, 5), random_pair(&mut rng, 4, 5));
        assert_eq!(interpolate(&a, &b, 0.0, Component::Both).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0, Component::Both).unwrap(), b);
        assert!(matches!(interpolate(&a, &b, 1.5, Component::Both), Err(LatentError::Alpha(_))));
    }

    #[test]
    fn midpoint_with_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_pair(&mut rng, 3, 2).h;
        let a = LatentPair::new(Tensor::zeros(&[3, 3]), h.clone()).unwrap();
        let b = LatentPair::new(Tensor::full(&[3, 3], 2.0), random_pair(&mut rng, 3, 2).h).unwrap();
        let m = interpolate(&a, &b, 0.5, Component::Extrinsics).unwrap();
        assert!(m.e.data().iter().all(|&x| x == 1.0));
        assert_eq!(m.h, h);
        let m = interpolate(&a, &b, 0.3, Component::Intrinsics).unwrap();
        assert_eq!(m.e, a.e);
    }

    #[test]
    fn shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random_pair(&mut rng, 3, 2), random_pair(&mut rng, 3, 4));
        assert!(interpolate(&a, &b, 0.5, Component::Both).is_err());
        assert!(swap_intrinsics(&a, &b).is_err());
        assert!(LatentPair::new(Tensor::zeros(&[3, 2]), Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn swap_definition_and_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_pair(&mut rng, 4, 3), random_pair(&mut rng, 4, 3));
        let (ab, ba) = swap_intrinsics(&a, &b).unwrap();
        assert_eq!(ab.e, a.e);
        assert_eq!(ab.h, b.h);
        assert_eq!(ba.e, b.e);
        assert_eq!(ba.h, a.h);
        let (a2, b2) = swap_intrinsics(&ab, &ba).unwrap();
        assert_eq!((a2, b2), (a.clone(), b));
        let (x, y) = swap_intrinsics(&a, &a).unwrap();
        assert_eq!(x, a);
        assert_eq!(y, a);
    }

    #[test]
    fn standardization_round_trip_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set: Vec<LatentPair> = (0..50)
            .map(|_| {
                let p = random_pair(&mut rng, 3, 4);
                LatentPair { e: p.e.map(|x| 0.2 * x + 0.5), h: p.h.map(|x| 3.0 * x - 1.0) }
            })
            .collect();
        let stats = LatentStats::compute(&set).unwrap();
        let mean_pair = LatentPair::new(
            Tensor::new(&[3, 3], stats.e_mean.iter().map(|&m| m as f32).collect()).unwrap(),
            Tensor::new(&[3, 4], stats.h_mean.iter().map(|&m| m as f32).collect()).unwrap(),
        )
        .unwrap();
        let z = standardize(&mean_pair, &stats).unwrap();
        assert!(z.e.data().iter().chain(z.h.data()).all(|x| x.abs() < 1e-6));

        let standardized: Vec<LatentPair> = set.iter().map(|x| standardize(x, &stats).unwrap()).collect();
        for x in &set {
            let back = destandardize(&standardize(x, &stats).unwrap(), &stats).unwrap();
            assert!(back.e.max_abs_diff(&x.e) <= 1e-6 && back.h.max_abs_diff(&x.h) <= 1e-6);
        }
        // recompute the statistics of the transformed set independently
        let dims = 3 * 3 + 3 * 4;
        for d in 0..dims {
            let vals: Vec<f64> = standardized
                .iter()
                .map(|p| if d < 9 { p.e.data()[d] as f64 } else { p.h.data()[d - 9] as f64 })
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-6, "dim {d} mean {mean}");
            assert!((std - 1.0).abs() < 1e-6, "dim {d} std {std}");
        }
    }

    #[test]
    fn std_is_clamped() {
        let p = LatentPair::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 2])).unwrap();
        let stats = LatentStats::compute(&[p.clone(), p]).unwrap();
        assert!(stats.e_std.iter().chain(&stats.h_std).all(|&s| s == MIN_STD));
    }

    #[test]
    fn json_layout() {
        let p = LatentPair::new(
            Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            Tensor::new(&[2, 1], vec![0.5, -0.25]).unwrap(),
        )
        .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"e":[[1.0,2.0,3.0],[4.0,5.0,6.0]],"h":[[0.5],[-0.25]]}"#);
        let back: LatentPair = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<LatentPair>(r#"{"e":[[1,2]],"h":[[1]]}"#).is_err());
    }

    proptest! {
        #[test]
        fn interpolation_is_linear(alpha in 0.0f64..=1.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_pair(&mut rng, 3, 4), random_pair(&mut rng, 3, 4));
            let x = interpolate(&a, &b, alpha, Component::Both).unwrap();
            let y = interpolate(&a, &b, 1.0 - alpha, Component::Both).unwrap();
            for (t, (u, (p, q))) in [(&x.e, (&y.e, (&a.e, &b.e))), (&x.h, (&y.h, (&a.h, &b.h)))] {
                for i in 0..t.len() {
                    let lhs = t.data()[i] + u.data()[i];
                    let rhs = p.data()[i] + q.data()[i];
                    prop_assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + rhs.abs()));
                }
            }
        }

        #[test]
        fn json_round_trip(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_pair(&mut rng, 3, 5);
            let back: LatentPair = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
