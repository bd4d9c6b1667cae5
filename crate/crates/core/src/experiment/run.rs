use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{validate_config, ExperimentConfig};
use super::report::{emit_plots, emit_tables};
use crate::backbone::{load_checkpoint_as, pretrain_base, save_checkpoint, BackboneCheckpoint, PretrainReport};
use crate::data_stream::{load_manifest, make_synthetic, split_tasks, LabeledDataset, StreamSession, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_after_task, Metrics, MetricsLedger, PhaseTimer, TestSet, TimingRecord};
use crate::learner::{LearnerState, StepRecord};

/// Base-class data for pretraining and the continual classes split into
/// train and test portions.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub base: Option<LabeledDataset>,
    pub cl_train: LabeledDataset,
    pub cl_test: LabeledDataset,
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let (base, cl) = match &config.manifest {
        Some(path) => {
            let cl = load_manifest(path)?;
            let base = config.base_manifest.as_ref().map(load_manifest).transpose()?;
            (base, cl)
        }
        None => {
            let total = config.base_classes + config.cl_classes;
            let per_class = config.per_class.max(config.base_per_class);
            let all = make_synthetic(&SyntheticSpec {
                classes: total,
                per_class,
                image_side: config.image_side,
                separation: config.separation,
                seed: config.data_seed,
            })?;
            let base_ids: Vec<usize> = (0..config.base_classes).collect();
            let cl_ids: Vec<usize> = (config.base_classes..total).collect();
            let base = (!base_ids.is_empty())
                .then(|| take_per_class(&all.subset_classes(&base_ids)?, config.base_per_class))
                .transpose()?;
            let cl = take_per_class(&all.subset_classes(&cl_ids)?, config.per_class)?;
            (base, cl)
        }
    };
    let (cl_train, cl_test) = cl.train_test_split(config.test_fraction, config.data_seed)?;
    Ok(PreparedData { base, cl_train, cl_test })
}

fn take_per_class(ds: &LabeledDataset, n: usize) -> Result<LabeledDataset> {
    let mut counts = vec![0usize; ds.class_count()];
    let samples = ds
        .samples()
        .iter()
        .filter(|s| {
            counts[s.label] += 1;
            counts[s.label] <= n
        })
        .cloned()
        .collect();
    LabeledDataset::new(samples, ds.class_count())
}

/// Loads `config.pretrained` when set, otherwise pretrains on the base data.
pub fn prepare_backbone(
    config: &ExperimentConfig,
    data: &PreparedData,
) -> Result<(BackboneCheckpoint, Option<PretrainReport>)> {
    if let Some(path) = &config.pretrained {
        return Ok((load_checkpoint_as(path, &config.backbone())?, None));
    }
    let base = data
        .base
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["no pretrained checkpoint and no base data to pretrain on".into()]))?;
    let (ckpt, report) = pretrain_base(&config.backbone(), base, &config.pretrain_options())?;
    Ok((ckpt, Some(report)))
}

/// What the mechanical invariants looked like over one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub backbone_digest_before: String,
    pub backbone_digest_after: String,
    /// Tasks `t >= 2` whose generator digest changed during training.
    pub generator_changes_after_task1: Vec<usize>,
    pub bound_violations: usize,
    pub revisits: usize,
    pub samples_trained: usize,
    pub dataset_len: usize,
}

impl InvariantReport {
    pub fn violations(&self) -> usize {
        usize::from(self.backbone_digest_before != self.backbone_digest_after)
            + self.generator_changes_after_task1.len()
            + self.bound_violations
            + self.revisits
            + usize::from(self.samples_trained != self.dataset_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ledger: MetricsLedger,
    pub metrics: Metrics,
    pub timing: Vec<TimingRecord>,
    pub invariants: InvariantReport,
    #[serde(skip)]
    pub steps: Vec<StepRecord>,
    pub dir: Option<PathBuf>,
}

/// One continual run: stream every task once, evaluate after each.
/// With `dir`, per-seed artefacts are written there, including partial
/// ledgers if the run fails midway.
pub fn run_seed(
    config: &ExperimentConfig,
    backbone: &BackboneCheckpoint,
    data: &PreparedData,
    seed: u64,
    dir: Option<&Path>,
) -> Result<SeedResult> {
    let tasks = split_tasks(&data.cl_train, config.tasks, seed)?;
    let test_sets: Vec<TestSet> = tasks.tasks.iter().map(|t| TestSet::for_task(&data.cl_test, t)).collect();
    let mut learner = LearnerState::new(config.learner(seed)?, backbone)?;
    let mut session = StreamSession::new(data.cl_train.len());
    let mut ledger = MetricsLedger::new(config.tasks);
    let mut timing = Vec::new();
    let mut steps = Vec::new();
    let mut inv = InvariantReport {
        backbone_digest_before: backbone.digest(),
        dataset_len: data.cl_train.len(),
        ..Default::default()
    };
    let mut log = match dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(BufWriter::new(File::create(d.join("train.log.jsonl"))?))
        }
        None => None,
    };

    let mut outcome = Ok(());
    for task in &tasks.tasks {
        let mut timer = PhaseTimer::default();
        let mut io_err = None;
        let trained = timer.train(|| {
            let chunks = session.stream_chunks(&data.cl_train, task, config.chunk_size, seed)?;
            learner.train_task(backbone, task, chunks, &mut |r: &StepRecord| {
                if let Some(w) = log.as_mut() {
                    if let Err(e) = writeln!(w, "{}", r.to_json_line()) {
                        io_err.get_or_insert(e);
                    }
                }
                steps.push(r.clone());
            })
        });
        if let Some(e) = io_err {
            outcome = Err(e.into());
            break;
        }
        let report = match trained {
            Ok(r) => r,
            Err(e) => {
                outcome = Err(e);
                break;
            }
        };
        if task.task_id >= 2 && report.generator_digest_before != report.generator_digest_after {
            inv.generator_changes_after_task1.push(task.task_id);
        }
        inv.bound_violations += report.bound_violations;
        inv.samples_trained += report.samples;
        let column = timer.infer(|| evaluate_after_task(&learner, backbone, task.task_id, &test_sets));
        match column {
            Ok(col) => ledger.record_column(task.task_id, &col)?,
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
        timing.push(timer.finish(task.task_id, report.samples));
    }
    inv.revisits = learner.revisits + session.violations();
    inv.backbone_digest_after = backbone.digest();
    if let Some(mut w) = log {
        w.flush()?;
    }

    if let Some(d) = dir {
        std::fs::write(d.join("ledger.csv"), ledger.to_csv())?;
        std::fs::write(d.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
        std::fs::write(d.join("invariants.json"), serde_json::to_string_pretty(&inv)?)?;
    }
    outcome.map_err(|e| match e {
        Error::Diverged(m) => Error::Diverged(format!("seed {seed}: {m}")),
        other => other,
    })?;
    let metrics = ledger.metrics()?;
    if let Some(d) = dir {
        std::fs::write(d.join("metrics.json"), metrics.to_json())?;
    }
    Ok(SeedResult { seed, ledger, metrics, timing, invariants: inv, steps, dir: dir.map(Path::to_path_buf) })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(rename = "FAA")]
    pub faa: MeanStd,
    #[serde(rename = "CAA")]
    pub caa: MeanStd,
    #[serde(rename = "FFM")]
    pub ffm: Option<MeanStd>,
    #[serde(rename = "AA")]
    pub aa: Vec<MeanStd>,
    /// Forgetting measured after each task `t >= 2`.
    pub forgetting: Vec<MeanStd>,
    pub seeds: Vec<u64>,
}

impl Aggregate {
    pub fn from_seeds(results: &[SeedResult]) -> Result<Self> {
        let col = |f: &dyn Fn(&SeedResult) -> f64| results.iter().map(f).collect::<Vec<_>>();
        let tasks = results.first().map_or(0, |r| r.ledger.tasks);
        let aa = (0..tasks).map(|t| MeanStd::of(&col(&|r| r.metrics.aa[t]))).collect();
        let mut forgetting = Vec::new();
        for t in 2..=tasks {
            let vals: Result<Vec<f64>> = results.iter().map(|r| r.ledger.forgetting_at(t)).collect();
            forgetting.push(MeanStd::of(&vals?));
        }
        Ok(Self {
            faa: MeanStd::of(&col(&|r| r.metrics.faa)),
            caa: MeanStd::of(&col(&|r| r.metrics.caa)),
            ffm: (tasks >= 2).then(|| MeanStd::of(&col(&|r| r.metrics.ffm.unwrap_or(f64::NAN)))),
            aa,
            forgetting,
            seeds: results.iter().map(|r| r.seed).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
    pub aggregate: Aggregate,
    pub outdir: Option<PathBuf>,
}

/// Pretrain (or load), then one continual run per seed, then aggregates,
/// tables and plots. Every seed is attempted; the first failure is
/// returned after the others finish.
pub fn run_experiment(config: &ExperimentConfig, outdir: Option<&Path>) -> Result<RunResult> {
    let normalized = validate_config(config)?;
    let config = normalized.config;
    let data = prepare_data(&config)?;
    let (backbone, pre) = prepare_backbone(&config, &data)?;
    run_with_backbone(&config, &backbone, &data, outdir, pre.as_ref(), &normalized.notes)
}

pub fn run_with_backbone(
    config: &ExperimentConfig,
    backbone: &BackboneCheckpoint,
    data: &PreparedData,
    outdir: Option<&Path>,
    pretrain: Option<&PretrainReport>,
    notes: &[String],
) -> Result<RunResult> {
    let hash = config.hash();
    if let Some(d) = outdir {
        std::fs::create_dir_all(d)?;
        let mut header = format!("# config hash {hash}\n");
        for n in notes {
            header.push_str(&format!("# {n}\n"));
        }
        std::fs::write(d.join("config.toml"), header + &config.to_toml())?;
        if let Some(p) = pretrain {
            std::fs::write(d.join("pretrain.json"), serde_json::to_string_pretty(p)?)?;
        }
        if config.pretrained.is_none() {
            save_checkpoint(backbone, d.join("backbone.ckpt"))?;
        }
    }
    let mut results = Vec::new();
    let mut first_err = None;
    for &seed in &config.seeds {
        let dir = outdir.map(|d| d.join(format!("seed_{seed}")));
        match run_seed(config, backbone, data, seed, dir.as_deref()) {
            Ok(r) => results.push(r),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let aggregate = Aggregate::from_seeds(&results)?;
    let result = RunResult {
        config: config.clone(),
        config_hash: hash,
        seeds: results,
        aggregate,
        outdir: outdir.map(Path::to_path_buf),
    };
    if let Some(d) = outdir {
        std::fs::write(d.join("metrics.json"), serde_json::to_string_pretty(&result.aggregate)?)?;
        emit_tables(&result, d)?;
        emit_plots(&result, d)?;
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lr: f64,
    #[serde(rename = "FAA")]
    pub faa: f64,
    #[serde(rename = "CAA")]
    pub caa: f64,
    #[serde(rename = "FFM")]
    pub ffm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_lr: f64,
    pub rows: Vec<GridRow>,
}

/// Highest FAA; ties go to lower FFM, then to the lower rate.
pub fn select_best(rows: &[GridRow]) -> Option<f64> {
    rows.iter()
        .min_by(|a, b| {
            b.faa
                .total_cmp(&a.faa)
                .then(a.ffm.unwrap_or(0.0).total_cmp(&b.ffm.unwrap_or(0.0)))
                .then(a.lr.total_cmp(&b.lr))
        })
        .map(|r| r.lr)
}

/// One single-seed run per learning rate on a shared backbone.
pub fn grid_search_lr(config: &ExperimentConfig, grid: &[f64], outdir: Option<&Path>) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::Config(vec!["learning-rate grid is empty".into()]));
    }
    let normalized = validate_config(config)?;
    let config = normalized.config;
    let data = prepare_data(&config)?;
    let (backbone, _) = prepare_backbone(&config, &data)?;
    let seed = config.seeds[0];
    let mut rows = Vec::with_capacity(grid.len());
    for &lr in grid {
        let cfg = ExperimentConfig { lr, seeds: vec![seed], ..config.clone() };
        let dir = outdir.map(|d| d.join(format!("lr_{lr}")));
        let r = run_seed(&cfg, &backbone, &data, seed, dir.as_deref())?;
        rows.push(GridRow { lr, faa: r.metrics.faa, caa: r.metrics.caa, ffm: r.metrics.ffm });
    }
    let best_lr = select_best(&rows).expect("non-empty grid");
    let result = GridResult { best_lr, rows };
    if let Some(d) = outdir {
        std::fs::create_dir_all(d)?;
        let mut csv = String::from("lr,FAA,CAA,FFM\n");
        for r in &result.rows {
            csv.push_str(&format!("{},{},{},{}\n", r.lr, r.faa, r.caa, r.ffm.map_or(String::new(), |v| v.to_string())));
        }
        std::fs::write(d.join("grid.csv"), csv)?;
        std::fs::write(d.join("grid.json"), serde_json::to_string_pretty(&result)?)?;
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    #[serde(rename = "FAA")]
    pub faa: MeanStd,
    #[serde(rename = "CAA")]
    pub caa: MeanStd,
    #[serde(rename = "FFM")]
    pub ffm: Option<MeanStd>,
}

/// Every cumulative component row over all seeds, sharing one backbone.
pub fn ablate(config: &ExperimentConfig, outdir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let normalized = validate_config(config)?;
    let config = normalized.config;
    let data = prepare_data(&config)?;
    let (backbone, _) = prepare_backbone(&config, &data)?;
    ablate_with_backbone(&config, &backbone, &data, outdir)
}

pub fn ablate_with_backbone(
    config: &ExperimentConfig,
    backbone: &BackboneCheckpoint,
    data: &PreparedData,
    outdir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, _) in crate::learner::AblationFlags::ablation_rows() {
        let cfg = ExperimentConfig { ablation: name.to_string(), ..config.clone() };
        let dir = outdir.map(|d| d.join(sanitize(name)));
        let r = run_with_backbone(&cfg, backbone, data, dir.as_deref(), None, &[])?;
        rows.push(AblationRow {
            name: name.to_string(),
            faa: r.aggregate.faa,
            caa: r.aggregate.caa,
            ffm: r.aggregate.ffm,
        });
    }
    if let Some(d) = outdir {
        let mut csv = String::from("method,FAA,FAA_std,CAA,CAA_std,FFM,FFM_std\n");
        for r in &rows {
            let (f, fs) = r.ffm.map_or((String::new(), String::new()), |m| (m.mean.to_string(), m.std.to_string()));
            csv.push_str(&format!("{},{},{},{},{},{f},{fs}\n", r.name, r.faa.mean, r.faa.std, r.caa.mean, r.caa.std));
        }
        std::fs::write(d.join("ablation.csv"), csv)?;
    }
    Ok(rows)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(lr: f64, faa: f64, ffm: f64) -> GridRow {
        GridRow { lr, faa, caa: faa, ffm: Some(ffm) }
    }

    #[test]
    fn grid_tie_breaks() {
        assert_eq!(select_best(&[row(0.01, 50.0, 3.0)]), Some(0.01));
        assert_eq!(select_best(&[row(0.01, 50.0, 3.0), row(0.05, 60.0, 9.0)]), Some(0.05));
        assert_eq!(select_best(&[row(0.01, 60.0, 3.0), row(0.005, 60.0, 1.0)]), Some(0.005));
        assert_eq!(select_best(&[row(0.1, 60.0, 1.0), row(0.05, 60.0, 1.0)]), Some(0.05));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
    }
}
