//! Builds a synthetic dataset, splits it into disjoint tasks and streams
//! every task once in fixed-size chunks.
use prol::data_stream::{make_synthetic, split_tasks, StreamSession, SyntheticSpec};

fn main() -> prol::Result<()> {
    let ds = make_synthetic(&SyntheticSpec { classes: 10, per_class: 23, image_side: 16, separation: 3.0, seed: 1 })?;
    let tasks = split_tasks(&ds, 5, 0)?;
    let mut session = StreamSession::new(ds.len());
    for task in &tasks.tasks {
        let sizes: Vec<usize> = session
            .stream_chunks(&ds, task, 10, 0)?
            .map(|c| c.map(|c| c.len()))
            .collect::<prol::Result<_>>()?;
        println!("task {} classes {:?}: chunks {:?}", task.task_id, task.classes, sizes);
    }
    println!("{} of {} samples emitted, {} violations", session.visited_count(), ds.len(), session.violations());

    // a second pass over a task is refused
    let again = session.stream_chunks(&ds, &tasks.tasks[0], 10, 0);
    println!("re-streaming task 1: {}", again.err().map(|e| e.to_string()).unwrap_or_default());
    Ok(())
}
