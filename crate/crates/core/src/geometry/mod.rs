//! Bodies, meshes, file formats and the synthetic articulated-body generator.

mod obj;
mod pack;
mod skeleton;
mod synth;

pub use obj::{load_obj, parse_obj, save_obj, write_obj};
pub use pack::{pack_dataset, read_pack, unpack_dataset, write_pack, PACK_MAGIC};
pub use skeleton::{forward_kinematics, JointTransform, Pose, Skeleton, MAX_HUMANOID_JOINTS};
pub use synth::{
    body_height, build_spec, linear_blend_skin, subject_seed, synth_dataset, synth_subject, PosePrior,
    SynthBodySpec, SynthConfig, SynthDataset, RINGS_PER_BONE,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid structure: {0}")]
    Structure(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Registered surface points; vertex `n` corresponds across samples.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().flatten().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    /// Checks index bounds and rejects faces that repeat a vertex.
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn from_points(points: &[[f32; 3]], faces: &[[usize; 3]]) -> Result<Self, GeometryError> {
        Self::new(points.iter().map(|p| p.map(f64::from)).collect(), faces.to_vec())
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let n = self.vertices.len();
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(GeometryError::Structure(format!("face {i} indexes past {n} vertices")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(GeometryError::Structure(format!("face {i} is degenerate: {f:?}")));
            }
        }
        Ok(())
    }
}

/// One posed body with ground-truth joints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodySample {
    pub vertices: Vec<[f32; 3]>,
    pub joints: Vec<[f32; 3]>,
    pub subject_id: u32,
    pub pose_id: u32,
}

/// Translates vertices and joints so that joint 0 sits at the origin.
pub fn pelvis_normalize(sample: &BodySample) -> BodySample {
    let Some(&root) = sample.joints.first() else {
        return sample.clone();
    };
    let shift = |p: &[f32; 3]| [p[0] - root[0], p[1] - root[1], p[2] - root[2]];
    BodySample {
        vertices: sample.vertices.iter().map(shift).collect(),
        joints: sample.joints.iter().map(shift).collect(),
        subject_id: sample.subject_id,
        pose_id: sample.pose_id,
    }
}
