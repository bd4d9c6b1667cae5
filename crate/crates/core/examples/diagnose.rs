//! Trains a learner task by task and reports, per task, the final losses,
//! key-match rate and head accuracy with oracle, matched and no prompt.
//! Usage: diagnose <backbone.ckpt> [config.toml]
use prol::backbone::{forward_prompted, load_checkpoint};
use prol::data_stream::{split_tasks, StreamSession};
use prol::evaluator::TestSet;
use prol::experiment::{prepare_data, ExperimentConfig};
use prol::learner::LearnerState;
use prol::prompt::generate_prompt;
use prol::Tensor;

fn main() -> prol::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = load_checkpoint(&args[1])?;
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = args.get(2) {
        cfg = ExperimentConfig::load(p)?;
    }
    let data = prepare_data(&cfg)?;
    let seed = 0;
    let tasks = split_tasks(&data.cl_train, cfg.tasks, seed)?;
    let mut st = LearnerState::new(cfg.learner(seed)?, &ckpt)?;
    let mut sess = StreamSession::new(data.cl_train.len());
    for task in &tasks.tasks {
        let chunks = sess.stream_chunks(&data.cl_train, task, cfg.chunk_size, seed)?;
        let mut last = None;
        st.train_task(&ckpt, task, chunks, &mut |r| last = Some(r.clone()))?;
        let r = last.unwrap();
        println!("task {} last step: intra {:.3} inter {:.3} sim {:.3} ort {:.3} gen {:.3} lr {:.4} {:?}", task.task_id, r.intra, r.inter, r.sim, r.ort, r.gen, r.lr, r.mode);
    }
    let all: Vec<TestSet> = tasks.tasks.iter().map(|t| TestSet::for_task(&data.cl_test, t)).collect();
    let (w, b) = st.head_matrix();
    let (mut key_ok, mut oracle_ok, mut plain_ok, mut matched_ok, mut n) = (0, 0, 0, 0, 0);
    let mut shift = 0.0;
    for set in &all {
        for (img, &y) in set.images.iter().zip(&set.labels) {
            let (q, f) = st.query_features(&ckpt, &[img])?;
            let head = |feat: &Tensor| {
                let l = feat.matmul_nt(&w);
                let row: Vec<f64> = l.row(0).iter().zip(b.data()).map(|(a, b)| a + b).collect();
                let j = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                st.registered()[j]
            };
            n += 1;
            plain_ok += usize::from(head(&f) == y);
            if st.config.flags.use_scaler_shifter_keys {
                let (c, _) = st.prompt.match_key(q.row(0))?;
                key_ok += usize::from(c == y);
                let s = prol::prompt::cosine(q.row(0), st.prompt.classes[&y].key.data());
                let p = generate_prompt(q.row(0), &st.prompt.classes[&y], s, &st.prompt.generator, &st.config.prompt)?;
                let fo = forward_prompted(&ckpt, &[img], &[p])?;
                oracle_ok += usize::from(head(&fo) == y);
                shift += fo.max_abs_diff(&f);
            }
            if let Some(p) = st.inference_prompt(q.row(0))? {
                let fm = forward_prompted(&ckpt, &[img], &[p])?;
                matched_ok += usize::from(head(&fm) == y);
            }
        }
    }
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    println!("key match {:.1}%  oracle-prompt head {:.1}%  matched-prompt head {:.1}%  plain head {:.1}%  mean max|f_P - f| {:.3}", pct(key_ok), pct(oracle_ok), pct(matched_ok), pct(plain_ok), shift / n as f64);
    Ok(())
}
