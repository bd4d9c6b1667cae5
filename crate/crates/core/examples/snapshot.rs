//! Trains one task, snapshots the learner, restores it and checks that
//! the next task trains identically from both copies.
use prol::backbone::{pretrain_base, PretrainOptions};
use prol::data_stream::{split_tasks, StreamSession};
use prol::experiment::{prepare_data, ExperimentConfig};
use prol::learner::LearnerState;

fn main() -> prol::Result<()> {
    let config = ExperimentConfig {
        tasks: 2,
        cl_classes: 4,
        per_class: 30,
        base_per_class: 40,
        layers: 2,
        dim: 32,
        heads: 2,
        ..Default::default()
    };
    let data = prepare_data(&config)?;
    let opts = PretrainOptions { epochs: 3, ..config.pretrain_options() };
    let (backbone, _) = pretrain_base(&config.backbone(), data.base.as_ref().expect("synthetic base"), &opts)?;
    let tasks = split_tasks(&data.cl_train, 2, 0)?;

    let mut session = StreamSession::new(data.cl_train.len());
    let mut learner = LearnerState::new(config.learner(0)?, &backbone)?;
    let chunks = session.stream_chunks(&data.cl_train, &tasks.tasks[0], config.chunk_size, 0)?;
    learner.train_task(&backbone, &tasks.tasks[0], chunks, &mut |_| {})?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("learner.st");
    learner.snapshot(&path)?;
    let mut restored = LearnerState::restore(&path)?;
    println!("restored equal: {}", restored == learner);

    let second: Vec<_> = session.stream_chunks(&data.cl_train, &tasks.tasks[1], config.chunk_size, 0)?.collect::<prol::Result<_>>()?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    learner.train_task(&backbone, &tasks.tasks[1], second.iter().cloned().map(Ok), &mut |r| a.push(r.total))?;
    restored.train_task(&backbone, &tasks.tasks[1], second.into_iter().map(Ok), &mut |r| b.push(r.total))?;
    println!("{} steps, losses identical: {}", a.len(), a == b);
    Ok(())
}
