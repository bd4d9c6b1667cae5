//! Full pipeline on a small config: pretrain, stream every task once,
//! evaluate after each. Writes config, metrics, ledgers, timing, step
//! logs, tables and plots under the output directory.
//! Usage: continual_run [outdir]
use prol::experiment::{run_experiment, ExperimentConfig};

fn main() -> prol::Result<()> {
    let outdir = std::env::args().nth(1).unwrap_or_else(|| "runs/continual_example".into());
    let config = ExperimentConfig {
        seeds: vec![0, 1],
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
    let result = run_experiment(&config, Some(outdir.as_ref()))?;
    for s in &result.seeds {
        println!("seed {}: FAA {:.2} CAA {:.2} FFM {:?}, invariant violations {}",
            s.seed, s.metrics.faa, s.metrics.caa, s.metrics.ffm, s.invariants.violations());
    }
    println!("{}", serde_json::to_string_pretty(&result.aggregate)?);
    println!("artefacts in {outdir}");
    Ok(())
}
