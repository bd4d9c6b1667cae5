//! Disjoint class-incremental task sequences served as seen-once chunks.

mod manifest;
mod stream;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub use manifest::{export_manifest, load_manifest, Manifest, ManifestItem};
pub use stream::{ChunkStream, StreamChunk, StreamSession};
pub use synthetic::{make_synthetic, SyntheticSpec};

pub type ClassId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[side, side, channels]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: ClassId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(contract("class_count must be positive"));
        }
        if let Some(first) = samples.first() {
            let shape = first.image.shape().to_vec();
            if shape.len() != 3 {
                return Err(contract(format!("images must be HxWxC, got {shape:?}")));
            }
            for (i, s) in samples.iter().enumerate() {
                if s.label >= class_count {
                    return Err(contract(format!(
                        "sample {i}: label {} >= class_count {class_count}",
                        s.label
                    )));
                }
                if s.image.shape() != shape.as_slice() {
                    return Err(contract(format!(
                        "sample {i}: shape {:?} differs from {shape:?}",
                        s.image.shape()
                    )));
                }
            }
        }
        Ok(Self { samples, class_count })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    /// Keeps only `classes`, relabelled to `0..classes.len()` in the given order.
    pub fn subset_classes(&self, classes: &[ClassId]) -> Result<Self> {
        let mut remap = vec![None; self.class_count];
        for (new, &old) in classes.iter().enumerate() {
            if old >= self.class_count {
                return Err(contract(format!("class {old} out of range")));
            }
            remap[old] = Some(new);
        }
        let samples = self
            .samples
            .iter()
            .filter_map(|s| remap[s.label].map(|label| Sample { image: s.image.clone(), label }))
            .collect();
        Self::new(samples, classes.len())
    }

    /// Per-class held-out split; returns `(train, test)`.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(contract("test_fraction must lie in [0, 1)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.class_count];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        let mut is_test = vec![false; self.samples.len()];
        for idx in &mut by_class {
            idx.shuffle(&mut rng);
            let n_test = (idx.len() as f64 * test_fraction).round() as usize;
            for &i in &idx[..n_test] {
                is_test[i] = true;
            }
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (s, t) in self.samples.iter().zip(is_test) {
            if t {
                test.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        Ok((Self::new(train, self.class_count)?, Self::new(test, self.class_count)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskDescriptor {
    /// 1-based.
    pub task_id: usize,
    pub classes: Vec<ClassId>,
    /// Indices into the dataset, in dataset order.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskDescriptor>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, task_id: usize) -> Option<&TaskDescriptor> {
        self.tasks.get(task_id.checked_sub(1)?)
    }

    /// Class ids of tasks `1..=task_id`.
    pub fn classes_through(&self, task_id: usize) -> Vec<ClassId> {
        self.tasks.iter().take(task_id).flat_map(|t| t.classes.iter().copied()).collect()
    }
}

/// Shuffles class ids by `seed` and deals them out in contiguous blocks;
/// when `class_count % tasks != 0` the earliest tasks get one extra class.
pub fn split_tasks(dataset: &LabeledDataset, tasks: usize, seed: u64) -> Result<TaskSequence> {
    if tasks == 0 {
        return Err(Error::InvalidSplit("task count must be at least 1".into()));
    }
    let class_count = dataset.class_count();
    if tasks > class_count {
        return Err(Error::InvalidSplit(format!(
            "{tasks} tasks requested for only {class_count} classes"
        )));
    }
    let mut order: Vec<ClassId> = (0..class_count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = class_count / tasks;
    let extra = class_count % tasks;
    let mut owner = vec![0usize; class_count];
    let mut out = Vec::with_capacity(tasks);
    let mut cursor = 0;
    for t in 0..tasks {
        let size = base + usize::from(t < extra);
        let mut classes = order[cursor..cursor + size].to_vec();
        classes.sort_unstable();
        for &c in &classes {
            owner[c] = t;
        }
        cursor += size;
        out.push(TaskDescriptor { task_id: t + 1, classes, indices: Vec::new() });
    }
    for (i, s) in dataset.samples().iter().enumerate() {
        out[owner[s.label]].indices.push(i);
    }
    Ok(TaskSequence { tasks: out })
}
