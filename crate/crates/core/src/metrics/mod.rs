//! Reconstruction error, sample diversity, self-intersection rate and latent
//! statistics, each with a brute-force reference used by the tests.

mod intersect;

pub use intersect::{triangles_intersect, unit_normal};

use serde::{Deserialize, Serialize};

use crate::geometry::TriangleMesh;
use crate::numerics::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("size mismatch: {0}")]
    Size(String),
    #[error("need at least {need} items, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("degenerate face {0}")]
    DegenerateFace(usize),
    #[error("invalid mesh: {0}")]
    Mesh(String),
}

fn dist(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    let d: [f64; 3] = std::array::from_fn(|i| a[i] as f64 - b[i] as f64);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Mean Euclidean distance between corresponding points.
pub fn mpvpe(x: &[[f32; 3]], x_hat: &[[f32; 3]]) -> Result<f64, MetricsError> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(MetricsError::Size(format!("{} vs {} points", x.len(), x_hat.len())));
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| dist(a, b)).sum::<f64>() / x.len() as f64)
}

/// Mean over unordered sample pairs of the mean per-joint distance.
pub fn apd(samples: &[Vec<[f32; 3]>]) -> Result<f64, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFew { need: 2, got: samples.len() });
    }
    let j = samples[0].len();
    if j == 0 || samples.iter().any(|s| s.len() != j) {
        return Err(MetricsError::Size("samples differ in joint count".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a_idx, a) in samples.iter().enumerate() {
        for b in &samples[a_idx + 1..] {
            total += a.iter().zip(b).map(|(p, q)| dist(p, q)).sum::<f64>() / j as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

fn face_points(mesh: &TriangleMesh, f: usize) -> [[f64; 3]; 3] {
    mesh.faces[f].map(|v| mesh.vertices[v])
}

fn shares_vertex(a: &[usize; 3], b: &[usize; 3]) -> bool {
    a.iter().any(|v| b.contains(v))
}

fn check_mesh(mesh: &TriangleMesh) -> Result<(), MetricsError> {
    mesh.validate().map_err(|e| MetricsError::Mesh(e.to_string()))?;
    for f in 0..mesh.faces.len() {
        if unit_normal(&face_points(mesh, f)).is_none() {
            return Err(MetricsError::DegenerateFace(f));
        }
    }
    Ok(())
}

/// Sorted indices of faces that intersect at least one face sharing none of their vertices,
/// found with a sweep over axis-aligned bounding boxes.
pub fn intersecting_faces(mesh: &TriangleMesh) -> Result<Vec<usize>, MetricsError> {
    check_mesh(mesh)?;
    let boxes: Vec<([f64; 3], [f64; 3])> = (0..mesh.faces.len())
        .map(|f| {
            let p = face_points(mesh, f);
            let lo = std::array::from_fn(|k| p.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min) - intersect::EPS);
            let hi = std::array::from_fn(|k| p.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max) + intersect::EPS);
            (lo, hi)
        })
        .collect();
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[a].0[0].total_cmp(&boxes[b].0[0]));
    let mut hit = vec![false; boxes.len()];
    for (k, &a) in order.iter().enumerate() {
        for &b in &order[k + 1..] {
            if boxes[b].0[0] > boxes[a].1[0] {
                break;
            }
            let overlap = (1..3).all(|d| boxes[a].0[d] <= boxes[b].1[d] && boxes[b].0[d] <= boxes[a].1[d]);
            if overlap
                && !shares_vertex(&mesh.faces[a], &mesh.faces[b])
                && triangles_intersect(&face_points(mesh, a), &face_points(mesh, b))
            {
                hit[a] = true;
                hit[b] = true;
            }
        }
    }
    Ok((0..hit.len()).filter(|&f| hit[f]).collect())
}

/// All-pairs version of [`intersecting_faces`] without the broad phase.
pub fn intersecting_faces_all_pairs(mesh: &TriangleMesh) -> Result<Vec<usize>, MetricsError> {
    check_mesh(mesh)?;
    let n = mesh.faces.len();
    let mut hit = vec![false; n];
    for a in 0..n {
        for b in a + 1..n {
            if !shares_vertex(&mesh.faces[a], &mesh.faces[b])
                && triangles_intersect(&face_points(mesh, a), &face_points(mesh, b))
            {
                hit[a] = true;
                hit[b] = true;
            }
        }
    }
    Ok((0..n).filter(|&f| hit[f]).collect())
}

/// Percentage of faces that intersect a non-adjacent face.
pub fn self_intersection_rate(mesh: &TriangleMesh) -> Result<f64, MetricsError> {
    if mesh.faces.is_empty() {
        return Ok(0.0);
    }
    Ok(100.0 * intersecting_faces(mesh)?.len() as f64 / mesh.faces.len() as f64)
}

/// Per-dimension statistics of intrinsics pooled over joints and samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Population mean and variance of each intrinsic dimension over `[J, D_h]` latents.
pub fn latent_moments(latents: &[Tensor<f32>]) -> Result<LatentMoments, MetricsError> {
    if latents.len() < 2 {
        return Err(MetricsError::TooFew { need: 2, got: latents.len() });
    }
    let width = latents[0].last_dim();
    if width == 0 || latents.iter().any(|t| t.shape().len() != 2 || t.last_dim() != width) {
        return Err(MetricsError::Size("latents differ in width".into()));
    }
    let rows = || latents.iter().flat_map(|t| t.rows());
    let count = rows().count() as f64;
    let mut mean = vec![0.0; width];
    for r in rows() {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x as f64 / count;
        }
    }
    let mut var = vec![0.0; width];
    for r in rows() {
        for ((v, &x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x as f64 - m).powi(2) / count;
        }
    }
    Ok(LatentMoments { mean, var })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpvpe: f64,
    pub apd: f64,
    pub si_rate: f64,
    pub latent_moments: LatentMoments,
    pub sample_count: usize,
}

impl EvalReport {
    /// True when every number is finite and non-negative (means may be negative).
    pub fn is_valid(&self) -> bool {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        ok(self.mpvpe)
            && ok(self.apd)
            && ok(self.si_rate)
            && self.latent_moments.var.iter().all(|&v| ok(v))
            && self.latent_moments.mean.iter().all(|m| m.is_finite())
    }
}

/// Brute-force twins used as oracles.
pub mod reference {
    pub fn mpvpe(x: &[[f32; 3]], x_hat: &[[f32; 3]]) -> f64 {
        let mut total = 0.0;
        for n in 0..x.len() {
            let mut s = 0.0;
            for c in 0..3 {
                let d = x[n][c] as f64 - x_hat[n][c] as f64;
                s += d * d;
            }
            total += s.sqrt();
        }
        total / x.len() as f64
    }

    /// Averages over ordered pairs, which counts each unordered pair twice.
    pub fn apd(samples: &[Vec<[f32; 3]>]) -> f64 {
        let (s, j) = (samples.len(), samples[0].len());
        let mut total = 0.0;
        for a in 0..s {
            for b in 0..s {
                if a == b {
                    continue;
                }
                let mut per = 0.0;
                for i in 0..j {
                    per += mpvpe(&samples[a][i..=i], &samples[b][i..=i]);
                }
                total += per / j as f64;
            }
        }
        total / (s * (s - 1)) as f64
    }
}

#[cfg(test)]
mod tests;
