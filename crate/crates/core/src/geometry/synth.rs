//! Procedural articulated bodies: capsule templates skinned to a humanoid skeleton.
//!
//! Every bone carries `RINGS_PER_BONE` rings of `ring_points` vertices, so a body
//! has `J * RINGS_PER_BONE * ring_points` vertices laid out bone-major. Bone `j`
//! spans from its parent joint to joint `j` (the root carries a short upward
//! stub) and is skinned to its own frame, blending linearly into the parent
//! frame over the first 20% of its length.

use nalgebra::{Isometry3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::skeleton::{forward_kinematics, Pose, Skeleton, HUMANOID_RADIUS};
use super::{pelvis_normalize, BodySample, GeometryError};

pub const RINGS_PER_BONE: usize = 8;
const ROOT_STUB_LENGTH: f64 = 0.10;
const BLEND_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthBodySpec {
    pub skeleton: Skeleton,
    pub bone_scale: Vec<f64>,
    /// Multipliers on the base capsule radius of each bone.
    pub capsule_radius: Vec<f64>,
    pub ring_points: usize,
    /// Row-major `N x J`, rows sum to one.
    pub skin_weights: Vec<f64>,
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl SynthBodySpec {
    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    pub fn vertex_count(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn weights_row(&self, n: usize) -> &[f64] {
        let j = self.joint_count();
        &self.skin_weights[n * j..(n + 1) * j]
    }

    /// `max z - min z` of the rest template.
    pub fn body_height(&self) -> f64 {
        body_height(&self.template_vertices)
    }
}

pub fn body_height(vertices: &[[f64; 3]]) -> f64 {
    let (lo, hi) = vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[2]), hi.max(v[2])));
    hi - lo
}

fn perpendicular_frame(axis: Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if axis.x.abs() > 0.9 { Vector3::y() } else { Vector3::x() };
    let b1 = (helper - axis * helper.dot(&axis)).normalize();
    let b2 = axis.cross(&b1);
    (b1, b2)
}

/// Deterministic template construction from skeleton and identity parameters.
pub fn build_spec(
    skeleton: &Skeleton,
    bone_scale: &[f64],
    capsule_radius: &[f64],
    ring_points: usize,
) -> Result<SynthBodySpec, GeometryError> {
    let j = skeleton.joint_count();
    if j < 2 || ring_points < 4 {
        return Err(GeometryError::Structure(format!(
            "need at least 2 joints and 4 ring points, got {j} and {ring_points}"
        )));
    }
    if capsule_radius.len() != j || capsule_radius.iter().chain(bone_scale).any(|&v| !(v > 0.0)) {
        return Err(GeometryError::Structure("bone scales and radii must be positive, one per joint".into()));
    }
    let (joints, _) = forward_kinematics(skeleton, bone_scale, &Pose::zero(j))?;
    let per_bone = RINGS_PER_BONE * ring_points;
    let n = j * per_bone;
    let mut vertices = Vec::with_capacity(n);
    let mut weights = vec![0.0; n * j];
    let mut faces = Vec::with_capacity(j * 2 * ring_points * (RINGS_PER_BONE - 1));

    for bone in 0..j {
        let end = Vector3::from(joints[bone]);
        let (start, parent) = if bone == 0 {
            (end, None)
        } else {
            let p = skeleton.parent[bone] as usize;
            (Vector3::from(joints[p]), Some(p))
        };
        let end = if bone == 0 { end + Vector3::z() * (ROOT_STUB_LENGTH * bone_scale[0]) } else { end };
        let axis = (end - start).try_normalize(1e-12).unwrap_or_else(Vector3::z);
        let (b1, b2) = perpendicular_frame(axis);
        let base_radius = HUMANOID_RADIUS.get(bone).copied().unwrap_or(0.04) * capsule_radius[bone];

        for r in 0..RINGS_PER_BONE {
            let u = (r as f64 + 0.5) / RINGS_PER_BONE as f64;
            let centre = start + (end - start) * u;
            let radius = base_radius * (0.75 + 0.25 * (std::f64::consts::PI * u).sin());
            let (w_parent, w_self) = match parent {
                Some(_) if u < BLEND_FRACTION => {
                    let wp = 0.5 * (1.0 - u / BLEND_FRACTION);
                    (wp, 1.0 - wp)
                }
                _ => (0.0, 1.0),
            };
            for m in 0..ring_points {
                let theta = 2.0 * std::f64::consts::PI * m as f64 / ring_points as f64;
                let p = centre + (b1 * theta.cos() + b2 * theta.sin()) * radius;
                let idx = vertices.len();
                vertices.push([p.x, p.y, p.z]);
                weights[idx * j + bone] = w_self;
                if let Some(pj) = parent {
                    weights[idx * j + pj] += w_parent;
                }
            }
        }
        let base = bone * per_bone;
        for r in 0..RINGS_PER_BONE - 1 {
            for m in 0..ring_points {
                let a = base + r * ring_points + m;
                let b = base + r * ring_points + (m + 1) % ring_points;
                let c = base + (r + 1) * ring_points + m;
                let d = base + (r + 1) * ring_points + (m + 1) % ring_points;
                faces.push([a, c, d]);
                faces.push([a, d, b]);
            }
        }
    }

    Ok(SynthBodySpec {
        skeleton: skeleton.clone(),
        bone_scale: bone_scale.to_vec(),
        capsule_radius: capsule_radius.to_vec(),
        ring_points,
        skin_weights: weights,
        template_vertices: vertices,
        faces,
    })
}

/// Samples identity parameters (`bone_scale` in [0.8, 1.2], radius factor in
/// [0.7, 1.3]) and builds the subject's template.
pub fn synth_subject(seed: u64, joints: usize, ring_points: usize) -> Result<SynthBodySpec, GeometryError> {
    let skeleton = Skeleton::humanoid(joints)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bone_scale: Vec<f64> = (0..joints).map(|_| rng.random_range(0.8..=1.2)).collect();
    let radius: Vec<f64> = (0..joints).map(|_| rng.random_range(0.7..=1.3)).collect();
    build_spec(&skeleton, &bone_scale, &radius, ring_points)
}

/// `x_n = sum_j w_nj (T_j * inverse(rest T_j)) x_rest_n`, then pelvis normalization.
pub fn linear_blend_skin(spec: &SynthBodySpec, pose: &Pose) -> Result<BodySample, GeometryError> {
    let j = spec.joint_count();
    let (_, rest) = forward_kinematics(&spec.skeleton, &spec.bone_scale, &Pose::zero(j))?;
    let (joints, posed) = forward_kinematics(&spec.skeleton, &spec.bone_scale, pose)?;
    let deltas: Vec<Isometry3<f64>> = posed.iter().zip(&rest).map(|(p, r)| p * r.inverse()).collect();
    let vertices = spec
        .template_vertices
        .iter()
        .enumerate()
        .map(|(n, v)| {
            let x = Point3::new(v[0], v[1], v[2]);
            let mut acc = Vector3::zeros();
            for (w, d) in spec.weights_row(n).iter().zip(&deltas) {
                if *w != 0.0 {
                    acc += (d * x).coords * *w;
                }
            }
            [acc.x as f32, acc.y as f32, acc.z as f32]
        })
        .collect();
    let joints = joints.iter().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect();
    Ok(pelvis_normalize(&BodySample { vertices, joints, subject_id: 0, pose_id: 0 }))
}

/// Pose prior of the generator: each axis-angle component is normal with
/// standard deviation `sigma`, clipped to `[-limit, limit]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePrior {
    pub sigma: f64,
    pub limit: f64,
}

impl Default for PosePrior {
    fn default() -> Self {
        Self { sigma: 0.35, limit: 1.2 }
    }
}

impl PosePrior {
    pub fn sample<R: Rng>(&self, joints: usize, rng: &mut R) -> Pose {
        let normal = Normal::new(0.0, self.sigma).expect("positive sigma");
        Pose {
            rotation: (0..joints)
                .map(|_| std::array::from_fn(|_| normal.sample(rng).clamp(-self.limit, self.limit)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects: usize,
    pub poses_per_subject: usize,
    pub joints: usize,
    pub ring_points: usize,
    pub seed: u64,
    #[serde(default)]
    pub pose_prior: PosePrior,
}

impl SynthConfig {
    pub fn new(subjects: usize, poses_per_subject: usize, joints: usize, ring_points: usize, seed: u64) -> Self {
        Self { subjects, poses_per_subject, joints, ring_points, seed, pose_prior: PosePrior::default() }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub samples: Vec<BodySample>,
    pub specs: Vec<SynthBodySpec>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of subject `subject` inside a dataset generated from `dataset_seed`.
pub fn subject_seed(dataset_seed: u64, subject: usize) -> u64 {
    splitmix64(dataset_seed ^ splitmix64(subject as u64 + 1))
}

pub fn synth_dataset(config: &SynthConfig) -> Result<SynthDataset, GeometryError> {
    if config.subjects == 0 || config.poses_per_subject == 0 {
        return Err(GeometryError::Structure("subject and pose counts must be at least 1".into()));
    }
    if !(config.pose_prior.sigma > 0.0 && config.pose_prior.limit > 0.0) {
        return Err(GeometryError::Structure("pose prior needs positive sigma and limit".into()));
    }
    let mut samples = Vec::with_capacity(config.subjects * config.poses_per_subject);
    let mut specs = Vec::with_capacity(config.subjects);
    for s in 0..config.subjects {
        let seed = subject_seed(config.seed, s);
        let spec = synth_subject(seed, config.joints, config.ring_points)?;
        let mut pose_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x504F_5345));
        for p in 0..config.poses_per_subject {
            let pose = config.pose_prior.sample(config.joints, &mut pose_rng);
            let mut sample = linear_blend_skin(&spec, &pose)?;
            sample.subject_id = s as u32;
            sample.pose_id = p as u32;
            samples.push(sample);
        }
        specs.push(spec);
    }
    Ok(SynthDataset { samples, specs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn to_f64(v: &[f32; 3]) -> Vector3<f64> {
        Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64)
    }

    #[test]
    fn subject_is_deterministic() {
        assert_eq!(synth_subject(7, 8, 8).unwrap(), synth_subject(7, 8, 8).unwrap());
        assert_ne!(synth_subject(7, 8, 8).unwrap(), synth_subject(8, 8, 8).unwrap());
    }

    #[test]
    fn construction_counts() {
        let spec = synth_subject(1, 2, 4).unwrap();
        assert_eq!(spec.vertex_count(), 2 * RINGS_PER_BONE * 4);
        assert_eq!(spec.faces.len(), 2 * 2 * 4 * (RINGS_PER_BONE - 1));
        for n in 0..spec.vertex_count() {
            let row = spec.weights_row(n);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-7);
            assert!(row.iter().filter(|&&w| w != 0.0).count() <= 2);
        }
        assert!(synth_subject(1, 1, 4).is_err());
        assert!(synth_subject(1, 2, 3).is_err());
    }

    #[test]
    fn weights_cover_only_bone_and_parent() {
        let spec = synth_subject(3, 24, 6).unwrap();
        let per_bone = RINGS_PER_BONE * 6;
        for n in 0..spec.vertex_count() {
            let bone = n / per_bone;
            for (jj, &w) in spec.weights_row(n).iter().enumerate() {
                if w != 0.0 {
                    assert!(jj == bone || jj as i32 == spec.skeleton.parent[bone]);
                }
            }
        }
    }

    #[test]
    fn rest_pose_is_identity() {
        let spec = synth_subject(11, 8, 8).unwrap();
        let s = linear_blend_skin(&spec, &Pose::zero(8)).unwrap();
        for (a, b) in s.vertices.iter().zip(&spec.template_vertices) {
            for c in 0..3 {
                assert!((a[c] as f64 - b[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_bone_rigid_rotation() {
        let spec = synth_subject(5, 8, 8).unwrap();
        // bone 4 (left knee) hinges at joint 1 (left hip)
        let bone = 4;
        let hinge = forward_kinematics(&spec.skeleton, &spec.bone_scale, &Pose::zero(8)).unwrap().0[1];
        let mut pose = Pose::zero(8);
        pose.rotation[bone] = [0.3, -0.2, 0.5];
        let s = linear_blend_skin(&spec, &pose).unwrap();
        let rot = UnitQuaternion::from_scaled_axis(Vector3::new(0.3, -0.2, 0.5));
        let hinge = Vector3::from(hinge);
        let mut checked = 0;
        for n in 0..spec.vertex_count() {
            if spec.weights_row(n)[bone] == 1.0 {
                let x = Vector3::from(spec.template_vertices[n]);
                let expect = hinge + rot * (x - hinge);
                assert!((to_f64(&s.vertices[n]) - expect).norm() < 1e-5);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn blended_vertex_averages_rigid_images() {
        let spec = synth_subject(5, 8, 8).unwrap();
        let bone = 4;
        let hinge = Vector3::from(forward_kinematics(&spec.skeleton, &spec.bone_scale, &Pose::zero(8)).unwrap().0[1]);
        let mut pose = Pose::zero(8);
        pose.rotation[bone] = [0.0, 0.9, 0.0];
        let s = linear_blend_skin(&spec, &pose).unwrap();
        let rot = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.9, 0.0));
        let mut checked = 0;
        for n in 0..spec.vertex_count() {
            let row = spec.weights_row(n);
            if row[bone] > 0.0 && row[bone] < 1.0 && row[1] > 0.0 {
                let (wc, wp) = (row[bone], row[1]);
                let x = Vector3::from(spec.template_vertices[n]);
                let expect = (hinge + rot * (x - hinge)) * wc + x * wp;
                assert!((to_f64(&s.vertices[n]) - expect).norm() < 1e-5);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn dataset_counts_and_identity() {
        let cfg = SynthConfig::new(2, 3, 8, 4, 99);
        let ds = synth_dataset(&cfg).unwrap();
        assert_eq!(ds.samples.len(), 6);
        for s in 0..2u32 {
            assert_eq!(ds.samples.iter().filter(|x| x.subject_id == s).count(), 3);
            let regenerated = synth_subject(subject_seed(99, s as usize), 8, 4).unwrap();
            assert_eq!(regenerated.bone_scale, ds.specs[s as usize].bone_scale);
        }
        for s in &ds.samples {
            assert_eq!(s.joints[0], [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn zero_pose_sample_equals_template() {
        let cfg = SynthConfig::new(1, 1, 8, 4, 5);
        let ds = synth_dataset(&cfg).unwrap();
        let s = linear_blend_skin(&ds.specs[0], &Pose::zero(8)).unwrap();
        for (a, b) in s.vertices.iter().zip(&ds.specs[0].template_vertices) {
            for c in 0..3 {
                assert!((a[c] as f64 - b[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pose_angles_respect_limits() {
        let prior = PosePrior { sigma: 2.0, limit: 1.2 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let p = prior.sample(8, &mut rng);
            assert!(p.rotation.iter().flatten().all(|a| a.abs() <= 1.2));
        }
    }

    #[test]
    fn fk_joints_ignore_capsules() {
        let s = Skeleton::humanoid(8).unwrap();
        let a = build_spec(&s, &[1.1; 8], &[0.8; 8], 4).unwrap();
        let b = build_spec(&s, &[1.1; 8], &[1.3; 8], 4).unwrap();
        let pose = PosePrior::default().sample(8, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(linear_blend_skin(&a, &pose).unwrap().joints, linear_blend_skin(&b, &pose).unwrap().joints);
    }
}
