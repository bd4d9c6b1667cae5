//! Nearest-class-mean accuracy of frozen backbone features on the
//! continual classes: an offline ceiling for key matching.
//! Usage: feature_probe <backbone.ckpt> [config.toml]

use prol::backbone::{forward_plain, load_checkpoint};
use prol::experiment::{prepare_data, ExperimentConfig};
use prol::Tensor;

fn main() -> prol::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = args.get(2) {
        cfg = ExperimentConfig::load(p)?;
    }
    let ckpt = load_checkpoint(&args[1])?;
    let data = prepare_data(&cfg)?;
    let feats = |ds: &prol::data_stream::LabeledDataset| -> prol::Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for chunk in ds.samples().chunks(64) {
            let imgs: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
            let f = forward_plain(&ckpt, &imgs)?;
            out.extend((0..imgs.len()).map(|i| f.row(i).to_vec()));
        }
        Ok(out)
    };
    let (ftr, fte) = (feats(&data.cl_train)?, feats(&data.cl_test)?);
    let k = data.cl_train.class_count();
    let d = ftr[0].len();
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0.0; k];
    for (f, s) in ftr.iter().zip(data.cl_train.samples()) {
        counts[s.label] += 1.0;
        for j in 0..d {
            means[s.label][j] += f[j];
        }
    }
    for c in 0..k {
        means[c].iter_mut().for_each(|v| *v /= counts[c]);
    }
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut correct = 0;
    for (f, s) in fte.iter().zip(data.cl_test.samples()) {
        let best = (0..k).max_by(|&a, &b| cos(f, &means[a]).total_cmp(&cos(f, &means[b]))).unwrap();
        correct += usize::from(best == s.label);
    }
    println!("NCM (cosine) accuracy over {k} classes: {:.2}%", 100.0 * correct as f64 / fte.len() as f64);
    Ok(())
}
