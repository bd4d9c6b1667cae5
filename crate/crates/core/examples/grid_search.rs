//! Learning-rate grid search on a single seed.
use prol::experiment::{grid_search_lr, ExperimentConfig};

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
    let grid = [0.001, 0.01, 0.1];
    let result = grid_search_lr(&config, &grid, None)?;
    for r in &result.rows {
        println!("lr {:<6} FAA {:>6.2} CAA {:>6.2} FFM {:?}", r.lr, r.faa, r.caa, r.ffm);
    }
    println!("best lr {}", result.best_lr);
    Ok(())
}
