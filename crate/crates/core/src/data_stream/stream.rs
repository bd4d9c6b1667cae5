use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassId, LabeledDataset, TaskDescriptor};
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct StreamChunk {
    pub task_id: usize,
    pub chunk_id: usize,
    /// Dataset indices of the pairs, aligned with `images` and `labels`.
    pub indices: Vec<usize>,
    pub images: Vec<Tensor>,
    pub labels: Vec<ClassId>,
}

impl StreamChunk {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-run ledger of which tasks were streamed and which samples emitted.
///
/// Every sample index is recorded in a bitmap the moment its chunk leaves
/// the iterator; a second emission is reported as a [`Error::SeenOnce`].
#[derive(Debug)]
pub struct StreamSession {
    visited: Vec<bool>,
    streamed: HashSet<usize>,
    violations: usize,
}

impl StreamSession {
    pub fn new(dataset_len: usize) -> Self {
        Self { visited: vec![false; dataset_len], streamed: HashSet::new(), violations: 0 }
    }

    /// Number of samples emitted so far.
    pub fn visited_count(&self) -> usize {
        self.visited.iter().filter(|v| **v).count()
    }

    pub fn violations(&self) -> usize {
        self.violations
    }

    /// Opens the one-shot chunk stream for `task`. Samples are shuffled by
    /// `seed` within the task; the last chunk may be partial.
    pub fn stream_chunks<'a>(
        &'a mut self,
        dataset: &'a LabeledDataset,
        task: &TaskDescriptor,
        chunk_size: usize,
        seed: u64,
    ) -> Result<ChunkStream<'a>> {
        if chunk_size == 0 {
            return Err(contract("chunk_size must be at least 1"));
        }
        if dataset.len() != self.visited.len() {
            return Err(contract("stream session was sized for a different dataset"));
        }
        if !self.streamed.insert(task.task_id) {
            return Err(Error::SeenOnce(format!("task {} was already streamed", task.task_id)));
        }
        let mut order = task.indices.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (task.task_id as u64).wrapping_mul(0x9e37_79b9)));
        Ok(ChunkStream {
            session: self,
            dataset,
            task_id: task.task_id,
            order,
            chunk_size,
            cursor: 0,
            next_chunk: 0,
        })
    }
}

pub struct ChunkStream<'a> {
    session: &'a mut StreamSession,
    dataset: &'a LabeledDataset,
    task_id: usize,
    order: Vec<usize>,
    chunk_size: usize,
    cursor: usize,
    next_chunk: usize,
}

impl ChunkStream<'_> {
    pub fn remaining(&self) -> usize {
        self.order.len() - self.cursor
    }

    /// Like [`Iterator::next`] but surfaces seen-once violations.
    pub fn try_next(&mut self) -> Result<Option<StreamChunk>> {
        if self.cursor >= self.order.len() {
            return Ok(None);
        }
        let end = (self.cursor + self.chunk_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        for &i in &indices {
            if std::mem::replace(&mut self.session.visited[i], true) {
                self.session.violations += 1;
                return Err(Error::SeenOnce(format!("sample {i} emitted twice")));
            }
        }
        let samples = self.dataset.samples();
        let chunk = StreamChunk {
            task_id: self.task_id,
            chunk_id: self.next_chunk,
            images: indices.iter().map(|&i| samples[i].image.clone()).collect(),
            labels: indices.iter().map(|&i| samples[i].label).collect(),
            indices,
        };
        self.next_chunk += 1;
        Ok(Some(chunk))
    }
}

impl Iterator for ChunkStream<'_> {
    type Item = Result<StreamChunk>;

    fn next(&mut self) -> Option<Self::Item> {
        self.try_next().transpose()
    }
}
