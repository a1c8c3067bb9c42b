use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::geometry::{
    load_obj, pack_dataset, save_obj, synth_dataset, unpack_dataset, BodySample, Skeleton, SynthConfig, TriangleMesh,
};

pub const DATA_FILE: &str = "samples.jds";
pub const META_FILE: &str = "dataset.json";
pub const TEMPLATE_FILE: &str = "template.obj";

/// Side information stored next to the packed samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub joints: usize,
    pub vertices: usize,
    /// Kinematic parent of each joint, -1 for the root.
    pub parents: Vec<i32>,
    /// Rest-template height (`max z - min z`) of each subject id.
    pub body_heights: BTreeMap<u32, f64>,
    pub synth: Option<SynthConfig>,
}

/// Registered bodies sharing one topology.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<BodySample>,
    /// Rest template of the first subject; its faces serve every sample.
    pub template: TriangleMesh,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn from_synth(config: &SynthConfig) -> Result<Self, PipelineError> {
        let data = synth_dataset(config)?;
        let skeleton = Skeleton::humanoid(config.joints)?;
        let template = TriangleMesh::new(data.specs[0].template_vertices.clone(), data.specs[0].faces.clone())?;
        let body_heights = data.specs.iter().enumerate().map(|(i, s)| (i as u32, s.body_height())).collect();
        let meta = DatasetMeta {
            joints: config.joints,
            vertices: data.specs[0].vertex_count(),
            parents: skeleton.parent,
            body_heights,
            synth: Some(config.clone()),
        };
        let ds = Self { samples: data.samples, template, meta };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the samples, the metadata and a template mesh carrying the faces.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        pack_dataset(&self.samples, dir.join(DATA_FILE))?;
        std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&self.meta)?)?;
        save_obj(&self.template, dir.join(TEMPLATE_FILE))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let dir = dir.as_ref();
        let samples = unpack_dataset(dir.join(DATA_FILE))?;
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        let template = load_obj(dir.join(TEMPLATE_FILE))?;
        let ds = Self { samples, template, meta };
        ds.validate()?;
        Ok(ds)
    }

    /// Sizes agree, every subject has a known height and at least two poses.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Data(m));
        if self.samples.is_empty() {
            return bad("dataset is empty".into());
        }
        if self.meta.parents.len() != self.meta.joints {
            return bad(format!("{} parents for {} joints", self.meta.parents.len(), self.meta.joints));
        }
        for s in &self.samples {
            if s.vertices.len() != self.meta.vertices || s.joints.len() != self.meta.joints {
                return bad(format!(
                    "sample (subject {}, pose {}) has {} vertices and {} joints, expected {} and {}",
                    s.subject_id,
                    s.pose_id,
                    s.vertices.len(),
                    s.joints.len(),
                    self.meta.vertices,
                    self.meta.joints
                ));
            }
        }
        if self.template.vertices.len() != self.meta.vertices {
            return bad(format!("template has {} vertices, expected {}", self.template.vertices.len(), self.meta.vertices));
        }
        if let Some(f) = self.template.faces.iter().flatten().find(|&&i| i >= self.meta.vertices) {
            return bad(format!("face index {f} out of range"));
        }
        for (subject, poses) in self.poses_by_subject() {
            if poses.len() < 2 {
                return bad(format!("subject {subject} has {} pose(s); pairs need at least 2", poses.len()));
            }
            if !self.meta.body_heights.contains_key(&subject) {
                return bad(format!("no body height for subject {subject}"));
            }
        }
        Ok(())
    }

    /// Sample indices per subject, ordered by pose id.
    pub fn poses_by_subject(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.subject_id).or_default().push(i);
        }
        for idx in map.values_mut() {
            idx.sort_by_key(|&i| self.samples[i].pose_id);
        }
        map
    }

    /// Mean rest-template height over the subjects present.
    pub fn body_height(&self) -> f64 {
        let subjects = self.poses_by_subject();
        let total: f64 = subjects.keys().map(|s| self.meta.body_heights[s]).sum();
        total / subjects.len() as f64
    }

    /// Holds out the last `ceil(10%)` pose ids of each subject, keeping at least two training poses.
    pub fn split(&self) -> (Dataset, Dataset) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for idx in self.poses_by_subject().values() {
            let n = idx.len();
            let out = n.div_ceil(10).min(n.saturating_sub(2));
            for (k, &i) in idx.iter().enumerate() {
                if k < n - out {
                    train.push(self.samples[i].clone());
                } else {
                    held.push(self.samples[i].clone());
                }
            }
        }
        let part = |samples| Dataset { samples, template: self.template.clone(), meta: self.meta.clone() };
        (part(train), part(held))
    }
}

/// Same-subject, distinct-pose pair sampling over a fixed sample list.
#[derive(Debug, Clone)]
pub struct PairSampler {
    groups: Vec<Vec<usize>>,
}

impl PairSampler {
    pub fn new(samples: &[BodySample]) -> Result<Self, PipelineError> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            map.entry(s.subject_id).or_default().push(i);
        }
        if map.is_empty() {
            return Err(PipelineError::Data("no samples to pair".into()));
        }
        for (subject, idx) in &mut map {
            idx.sort_by_key(|&i| samples[i].pose_id);
            if idx.windows(2).any(|w| samples[w[0]].pose_id == samples[w[1]].pose_id) {
                return Err(PipelineError::Data(format!("subject {subject} repeats a pose id")));
            }
            if idx.len() < 2 {
                return Err(PipelineError::Data(format!("subject {subject} has a single pose")));
            }
        }
        Ok(Self { groups: map.into_values().collect() })
    }

    /// Uniform subject, then a uniform ordered pair of distinct poses. Returns sample indices.
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<(usize, usize)> {
        (0..batch)
            .map(|_| {
                let g = &self.groups[rng.random_range(0..self.groups.len())];
                let a = rng.random_range(0..g.len());
                let mut b = rng.random_range(0..g.len() - 1);
                if b >= a {
                    b += 1;
                }
                (g[a], g[b])
            })
            .collect()
    }
}

pub fn pair_sampler<'a, R: Rng>(
    dataset: &'a Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(&'a BodySample, &'a BodySample)>, PipelineError> {
    let sampler = PairSampler::new(&dataset.samples)?;
    Ok(sampler.sample(batch_size, rng).into_iter().map(|(a, b)| (&dataset.samples[a], &dataset.samples[b])).collect())
}
