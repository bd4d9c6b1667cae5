//! Cumulative component ablation on a small config, sharing one backbone.
use prol::experiment::{ablate, ExperimentConfig};

fn main() -> prol::Result<()> {
    let config = ExperimentConfig {
        seeds: vec![0],
        tasks: 4,
        cl_classes: 8,
        per_class: 60,
        base_per_class: 60,
        layers: 2,
        dim: 32,
        heads: 2,
        pretrain_epochs: 5,
        ..Default::default()
    };
    println!("{:<22} {:>8} {:>8} {:>8}", "method", "FAA", "CAA", "FFM");
    for row in ablate(&config, None)? {
        let ffm = row.ffm.map_or("-".into(), |m| format!("{:.2}", m.mean));
        println!("{:<22} {:>8.2} {:>8.2} {:>8}", row.name, row.faa.mean, row.caa.mean, ffm);
    }
    Ok(())
}
