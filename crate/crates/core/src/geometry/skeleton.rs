//! Kinematic trees and forward kinematics.

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Joint tree: `parent[0] == -1`, every other entry indexes an earlier-processed joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub parent: Vec<i32>,
    /// Bone vector of each joint, expressed in its parent's frame.
    pub rest_offset: Vec<[f64; 3]>,
}

/// Per-joint axis-angle rotations in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Vec<[f64; 3]>,
}

impl Pose {
    pub fn zero(joints: usize) -> Self {
        Self { rotation: vec![[0.0; 3]; joints] }
    }
}

/// Rest offsets of a 24-joint humanoid (z up, x to the body's left, meters).
const HUMANOID_PARENT: [i32; 24] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];
const HUMANOID_OFFSET: [[f64; 3]; 24] = [
    [0.0, 0.0, 0.0],
    [0.07, 0.0, -0.09],
    [-0.07, 0.0, -0.09],
    [0.0, 0.0, 0.11],
    [0.04, 0.0, -0.38],
    [-0.04, 0.0, -0.38],
    [0.0, 0.0, 0.13],
    [0.0, 0.0, -0.40],
    [0.0, 0.0, -0.40],
    [0.0, 0.0, 0.05],
    [0.0, 0.12, -0.06],
    [0.0, 0.12, -0.06],
    [0.0, 0.0, 0.21],
    [0.08, 0.0, 0.11],
    [-0.08, 0.0, 0.11],
    [0.0, 0.03, 0.09],
    [0.12, 0.0, 0.03],
    [-0.12, 0.0, 0.03],
    [0.26, 0.0, 0.0],
    [-0.26, 0.0, 0.0],
    [0.25, 0.0, 0.0],
    [-0.25, 0.0, 0.0],
    [0.08, 0.0, 0.0],
    [-0.08, 0.0, 0.0],
];

/// Base capsule radius of each humanoid bone.
pub(crate) const HUMANOID_RADIUS: [f64; 24] = [
    0.10, 0.075, 0.075, 0.09, 0.065, 0.065, 0.09, 0.05, 0.05, 0.08, 0.04, 0.04, 0.05, 0.045, 0.045, 0.07,
    0.045, 0.045, 0.04, 0.04, 0.035, 0.035, 0.03, 0.03,
];

pub const MAX_HUMANOID_JOINTS: usize = 24;

impl Skeleton {
    /// The first `joints` joints of the built-in humanoid; every prefix is a valid tree.
    pub fn humanoid(joints: usize) -> Result<Self, GeometryError> {
        if !(1..=MAX_HUMANOID_JOINTS).contains(&joints) {
            return Err(GeometryError::Structure(format!(
                "humanoid skeleton supports 1..={MAX_HUMANOID_JOINTS} joints, got {joints}"
            )));
        }
        Ok(Self { parent: HUMANOID_PARENT[..joints].to_vec(), rest_offset: HUMANOID_OFFSET[..joints].to_vec() })
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    /// Joints ordered so every parent precedes its children. Fails on cycles,
    /// out-of-range parents, or a root other than joint 0.
    pub fn topological_order(&self) -> Result<Vec<usize>, GeometryError> {
        let j = self.parent.len();
        if j == 0 || self.parent[0] != -1 {
            return Err(GeometryError::Structure("joint 0 must be the root (parent -1)".into()));
        }
        if self.rest_offset.len() != j {
            return Err(GeometryError::Structure(format!(
                "{} rest offsets for {j} joints",
                self.rest_offset.len()
            )));
        }
        let mut children = vec![Vec::new(); j];
        for (i, &p) in self.parent.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j || p as usize == i {
                return Err(GeometryError::Structure(format!("joint {i} has invalid parent {p}")));
            }
            children[p as usize].push(i);
        }
        let mut order = Vec::with_capacity(j);
        let mut stack = vec![0];
        while let Some(n) = stack.pop() {
            order.push(n);
            stack.extend(children[n].iter().rev());
        }
        if order.len() != j {
            return Err(GeometryError::Structure("parent array contains a cycle".into()));
        }
        Ok(order)
    }
}

/// Rigid transform of one joint frame.
pub type JointTransform = Isometry3<f64>;

pub(crate) fn axis_angle(r: [f64; 3]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(Vector3::new(r[0], r[1], r[2]))
}

/// `T_i = T_parent(i) * Rot(r_i) * Trans(s_i * offset_i)`; joint positions are the
/// translation parts.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    bone_scale: &[f64],
    pose: &Pose,
) -> Result<(Vec<[f64; 3]>, Vec<JointTransform>), GeometryError> {
    let order = skeleton.topological_order()?;
    let j = skeleton.joint_count();
    if bone_scale.len() != j || pose.rotation.len() != j {
        return Err(GeometryError::Structure(format!(
            "expected {j} scales and rotations, got {} and {}",
            bone_scale.len(),
            pose.rotation.len()
        )));
    }
    let mut transforms = vec![Isometry3::identity(); j];
    for &i in &order {
        let o = skeleton.rest_offset[i];
        let local = Isometry3::from_parts(
            Translation3::identity(),
            axis_angle(pose.rotation[i]),
        ) * Isometry3::translation(bone_scale[i] * o[0], bone_scale[i] * o[1], bone_scale[i] * o[2]);
        transforms[i] = if i == 0 { local } else { transforms[skeleton.parent[i] as usize] * local };
    }
    let joints = transforms
        .iter()
        .map(|t| {
            let v = t.translation.vector;
            [v.x, v.y, v.z]
        })
        .collect();
    Ok((joints, transforms))
}
