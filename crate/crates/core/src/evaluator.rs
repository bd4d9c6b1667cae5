//! Inference, the task-accuracy matrix and the summary metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, forward_prompted, BackboneCheckpoint};
use crate::data_stream::{ClassId, LabeledDataset, TaskDescriptor};
use crate::error::{contract, Error, Result};
use crate::learner::LearnerState;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 32;

/// Held-out images of one task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TestSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<ClassId>,
}

impl TestSet {
    /// Every sample of `dataset` whose label belongs to `task`.
    pub fn for_task(dataset: &LabeledDataset, task: &TaskDescriptor) -> Self {
        let mut out = Self::default();
        for s in dataset.samples().iter().filter(|s| task.classes.contains(&s.label)) {
            out.images.push(s.image.clone());
            out.labels.push(s.label);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Top-1 prediction over registered classes for each image.
pub fn predict_batch(state: &LearnerState, backbone: &BackboneCheckpoint, images: &[&Tensor]) -> Result<Vec<ClassId>> {
    if state.registered().is_empty() {
        return Err(contract("no classes registered; nothing to predict"));
    }
    let (q, f_plain) = state.query_features(backbone, images)?;
    let mut prompts = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        if let Some(p) = state.inference_prompt(q.row(i))? {
            prompts.push(p);
        }
    }
    let feats = if prompts.is_empty() { f_plain } else { forward_prompted(backbone, images, &prompts)? };
    let (w, b) = state.head_matrix();
    let logits = feats.matmul_nt(&w);
    Ok((0..images.len())
        .map(|i| {
            let row: Vec<f64> = logits.row(i).iter().zip(b.data()).map(|(l, b)| l + b).collect();
            state.registered()[argmax(&row)]
        })
        .collect())
}

pub fn predict(state: &LearnerState, backbone: &BackboneCheckpoint, image: &Tensor) -> Result<ClassId> {
    Ok(predict_batch(state, backbone, &[image])?[0])
}

/// Accuracy in percent.
pub fn accuracy(state: &LearnerState, backbone: &BackboneCheckpoint, set: &TestSet) -> Result<f64> {
    if set.is_empty() {
        return Err(contract("empty test set"));
    }
    let mut correct = 0usize;
    for (imgs, labels) in set.images.chunks(EVAL_BATCH).zip(set.labels.chunks(EVAL_BATCH)) {
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let pred = predict_batch(state, backbone, &refs)?;
        correct += pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    }
    Ok(100.0 * correct as f64 / set.len() as f64)
}

/// Column `t` of the accuracy matrix: accuracy on tasks `1..=t`.
pub fn evaluate_after_task(
    state: &LearnerState,
    backbone: &BackboneCheckpoint,
    t: usize,
    test_sets: &[TestSet],
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(contract("tasks are numbered from 1"));
    }
    if test_sets.len() < t {
        return Err(contract(format!("missing test set: {} given for {t} tasks", test_sets.len())));
    }
    if let Some(i) = test_sets[..t].iter().position(TestSet::is_empty) {
        return Err(contract(format!("test set for task {} is empty", i + 1)));
    }
    test_sets[..t].iter().map(|s| accuracy(state, backbone, s)).collect()
}

/// `A[i][t]`: accuracy (%) on task `i` after training task `t`, for `i ≤ t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub tasks: usize,
    a: Vec<Vec<Option<f64>>>,
}

impl MetricsLedger {
    pub fn new(tasks: usize) -> Self {
        Self { tasks, a: vec![vec![None; tasks]; tasks] }
    }

    /// Builds a complete ledger from columns: `columns[t-1]` holds
    /// `A[1..=t][t]`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let mut l = Self::new(columns.len());
        for (t, col) in columns.iter().enumerate() {
            l.record_column(t + 1, col)?;
        }
        Ok(l)
    }

    pub fn record_column(&mut self, t: usize, accuracies: &[f64]) -> Result<()> {
        if t == 0 || t > self.tasks || accuracies.len() != t {
            return Err(contract(format!("column {t} needs exactly {t} accuracies, got {}", accuracies.len())));
        }
        for (i, &acc) in accuracies.iter().enumerate() {
            if !(0.0..=100.0).contains(&acc) {
                return Err(contract(format!("accuracy {acc} outside [0, 100]")));
            }
            self.a[i][t - 1] = Some(acc);
        }
        Ok(())
    }

    /// `A[i][t]` with 1-based indices.
    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        self.a.get(i.checked_sub(1)?)?.get(t.checked_sub(1)?).copied().flatten()
    }

    /// Number of leading columns that are fully recorded.
    pub fn completed(&self) -> usize {
        (1..=self.tasks).take_while(|&t| (1..=t).all(|i| self.get(i, t).is_some())).count()
    }

    pub fn check_complete(&self) -> Result<()> {
        let done = self.completed();
        if done < self.tasks {
            let t = done + 1;
            let i = (1..=t).find(|&i| self.get(i, t).is_none()).unwrap_or(t);
            return Err(Error::Report(format!("ledger incomplete: A[{i}][{t}] missing")));
        }
        Ok(())
    }

    pub fn aa(&self, t: usize) -> Result<f64> {
        let col: Option<Vec<f64>> = (1..=t).map(|i| self.get(i, t)).collect();
        let col = col.ok_or_else(|| contract(format!("column {t} incomplete")))?;
        if t == 0 {
            return Err(contract("tasks are numbered from 1"));
        }
        Ok(col.iter().sum::<f64>() / t as f64)
    }

    pub fn aa_curve(&self) -> Result<Vec<f64>> {
        (1..=self.tasks).map(|t| self.aa(t)).collect()
    }

    pub fn faa(&self) -> Result<f64> {
        self.aa(self.tasks)
    }

    pub fn caa(&self) -> Result<f64> {
        let curve = self.aa_curve()?;
        Ok(curve.iter().sum::<f64>() / curve.len() as f64)
    }

    /// `(1/(T−1)) Σ_{i<T} max_{t∈1..T−1} (A[i][t] − A[i][T])`; the inner
    /// max only ranges over columns where task `i` has been seen.
    pub fn ffm(&self) -> Result<f64> {
        self.forgetting_at(self.tasks)
    }

    /// Forgetting measured as if the run ended after task `t`.
    pub fn forgetting_at(&self, t: usize) -> Result<f64> {
        if t < 2 {
            return Err(contract("forgetting needs at least two tasks"));
        }
        self.check_prefix(t)?;
        let mut total = 0.0;
        for i in 1..t {
            let last = self.get(i, t).expect("checked");
            let best = (i..t).map(|s| self.get(i, s).expect("checked") - last).fold(f64::NEG_INFINITY, f64::max);
            total += best;
        }
        Ok(total / (t - 1) as f64)
    }

    fn check_prefix(&self, t: usize) -> Result<()> {
        for s in 1..=t {
            for i in 1..=s {
                if self.get(i, s).is_none() {
                    return Err(contract(format!("A[{i}][{s}] missing")));
                }
            }
        }
        Ok(())
    }

    /// `task_i,after_t,accuracy` rows for every recorded entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_i,after_t,accuracy\n");
        for t in 1..=self.tasks {
            for i in 1..=t {
                if let Some(a) = self.get(i, t) {
                    out.push_str(&format!("{i},{t},{a}\n"));
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str, tasks: usize) -> Result<Self> {
        let mut l = Self::new(tasks);
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::Report(format!("ledger line {}: `{line}`", n + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            let i: usize = parts[0].parse().map_err(|_| bad())?;
            let t: usize = parts[1].parse().map_err(|_| bad())?;
            let a: f64 = parts[2].parse().map_err(|_| bad())?;
            if i == 0 || t == 0 || i > t || t > tasks {
                return Err(bad());
            }
            l.a[i - 1][t - 1] = Some(a);
        }
        Ok(l)
    }

    pub fn metrics(&self) -> Result<Metrics> {
        self.check_complete()?;
        Ok(Metrics {
            faa: self.faa()?,
            caa: self.caa()?,
            ffm: if self.tasks >= 2 { Some(self.ffm()?) } else { None },
            aa: self.aa_curve()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "FAA")]
    pub faa: f64,
    #[serde(rename = "CAA")]
    pub caa: f64,
    /// Undefined for single-task runs.
    #[serde(rename = "FFM")]
    pub ffm: Option<f64>,
    #[serde(rename = "AA")]
    pub aa: Vec<f64>,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain metrics")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub task_id: usize,
    pub samples: usize,
    pub train_seconds: f64,
    pub inference_seconds: f64,
    /// Training samples per second.
    pub throughput: f64,
}

impl TimingRecord {
    pub fn new(task_id: usize, samples: usize, train_seconds: f64, inference_seconds: f64) -> Self {
        let throughput = if train_seconds > 0.0 { samples as f64 / train_seconds } else { f64::INFINITY };
        Self { task_id, samples, train_seconds, inference_seconds, throughput }
    }
}

/// Disjoint wall clocks for the training and inference phases of one task.
#[derive(Debug, Default)]
pub struct PhaseTimer {
    train: f64,
    infer: f64,
}

impl PhaseTimer {
    pub fn train<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.train += start.elapsed().as_secs_f64();
        out
    }

    pub fn infer<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.infer += start.elapsed().as_secs_f64();
        out
    }

    pub fn finish(self, task_id: usize, samples: usize) -> TimingRecord {
        TimingRecord::new(task_id, samples, self.train, self.infer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        let l = MetricsLedger::from_columns(&[vec![100.0], vec![90.0, 80.0]]).unwrap();
        assert_eq!(l.faa().unwrap(), 85.0);
        assert_eq!(l.caa().unwrap(), 92.5);
        assert_eq!(l.ffm().unwrap(), 10.0);
    }

    #[test]
    fn constant_ledger_has_no_forgetting() {
        let cols: Vec<Vec<f64>> = (1..=4).map(|t| vec![50.0; t]).collect();
        let l = MetricsLedger::from_columns(&cols).unwrap();
        assert_eq!((l.faa().unwrap(), l.caa().unwrap(), l.ffm().unwrap()), (50.0, 50.0, 0.0));
    }

    #[test]
    fn improvement_gives_negative_forgetting() {
        let l = MetricsLedger::from_columns(&[vec![60.0], vec![70.0, 70.0]]).unwrap();
        assert_eq!(l.ffm().unwrap(), -10.0);
    }

    #[test]
    fn aa_and_single_task() {
        let l = MetricsLedger::from_columns(&[vec![42.0]]).unwrap();
        assert_eq!(l.aa(1).unwrap(), 42.0);
        assert!(l.ffm().is_err());
        assert_eq!(l.metrics().unwrap().ffm, None);
        let l = MetricsLedger::from_columns(&[vec![90.0], vec![80.0, 60.0]]).unwrap();
        assert_eq!(l.aa(2).unwrap(), 70.0);
    }

    #[test]
    fn incomplete_ledger_names_the_gap() {
        let mut l = MetricsLedger::new(3);
        l.record_column(1, &[50.0]).unwrap();
        let err = l.metrics().unwrap_err().to_string();
        assert!(err.contains("A[1][2]"), "{err}");
        assert!(l.record_column(2, &[1.0]).is_err());
        assert!(l.record_column(2, &[1.0, 101.0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let l = MetricsLedger::from_columns(&[vec![100.0], vec![90.0, 80.5]]).unwrap();
        let csv = l.to_csv();
        assert!(csv.starts_with("task_i,after_t,accuracy\n1,1,100\n"));
        assert_eq!(MetricsLedger::from_csv(&csv, 2).unwrap(), l);
    }

    #[test]
    fn metrics_json_keys() {
        let l = MetricsLedger::from_columns(&[vec![100.0], vec![90.0, 80.0]]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&l.metrics().unwrap().to_json()).unwrap();
        for k in ["FAA", "CAA", "FFM", "AA"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn throughput_definition() {
        let r = TimingRecord::new(1, 200, 4.0, 0.5);
        assert_eq!(r.throughput, 50.0);
    }
}
