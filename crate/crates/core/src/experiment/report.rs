use std::path::Path;

use plotters::prelude::*;

use super::config::ExperimentConfig;
use super::run::{Aggregate, InvariantReport, MeanStd, RunResult, SeedResult};
use crate::error::{Error, Result};
use crate::evaluator::{MetricsLedger, TimingRecord};

/// `tables/accuracy.csv`: AA after each task per seed plus the mean, with an
/// AVG column; `tables/forgetting.csv` likewise for forgetting after task t.
pub fn emit_tables(result: &RunResult, dir: &Path) -> Result<()> {
    for s in &result.seeds {
        s.ledger.check_complete().map_err(|e| Error::Report(format!("seed {}: {e}", s.seed)))?;
    }
    let tables = dir.join("tables");
    std::fs::create_dir_all(&tables)?;
    let t = result.aggregate.aa.len();
    let header = |first: usize| {
        let cols: Vec<String> = (first..=t).map(|i| format!("task{i}")).collect();
        format!("run,{},AVG\n", cols.join(","))
    };
    let line = |name: &str, vals: &[f64]| {
        let avg = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        let cells: Vec<String> = vals.iter().map(|v| format!("{v:.4}")).collect();
        format!("{name},{},{avg:.4}\n", cells.join(","))
    };

    let mut acc = header(1);
    for s in &result.seeds {
        acc.push_str(&line(&format!("seed_{}", s.seed), &s.metrics.aa));
    }
    let means: Vec<f64> = result.aggregate.aa.iter().map(|m| m.mean).collect();
    acc.push_str(&line("mean", &means));
    let stds: Vec<f64> = result.aggregate.aa.iter().map(|m| m.std).collect();
    acc.push_str(&line("std", &stds));
    std::fs::write(tables.join("accuracy.csv"), acc)?;

    if t >= 2 {
        let mut fm = header(2);
        for s in &result.seeds {
            let vals: Result<Vec<f64>> = (2..=t).map(|k| s.ledger.forgetting_at(k)).collect();
            fm.push_str(&line(&format!("seed_{}", s.seed), &vals?));
        }
        let means: Vec<f64> = result.aggregate.forgetting.iter().map(|m| m.mean).collect();
        fm.push_str(&line("mean", &means));
        std::fs::write(tables.join("forgetting.csv"), fm)?;
    }
    Ok(())
}

/// `plots/aa.svg` and `plots/ffm.svg`: mean curves with a ±std band.
pub fn emit_plots(result: &RunResult, dir: &Path) -> Result<()> {
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    line_plot(&plots.join("aa.svg"), "Average accuracy after each task", "AA (%)", 1, &result.aggregate.aa)?;
    line_plot(&plots.join("ffm.svg"), "Forgetting after each task", "FM (%)", 2, &result.aggregate.forgetting)?;
    Ok(())
}

fn line_plot(path: &Path, title: &str, y_label: &str, first_task: usize, series: &[MeanStd]) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| Error::Report(format!("{}: {e}", path.display()));
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let last = first_task + series.len().max(1) - 1;
    let (mut lo, mut hi) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| (lo.min(m.mean - m.std), hi.max(m.mean + m.std)));
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 100.0);
    }
    let pad = ((hi - lo) * 0.1).max(1.0);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((first_task as f64 - 0.5)..(last as f64 + 0.5), (lo - pad)..(hi + pad))
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("task")
        .y_desc(y_label)
        .x_labels(series.len().clamp(2, 12))
        .draw()
        .map_err(|e| err(&e))?;
    let xs = || (first_task..).map(|t| t as f64);
    if series.len() > 1 {
        let mut band: Vec<(f64, f64)> = xs().zip(series).map(|(x, m)| (x, m.mean + m.std)).collect();
        band.extend(xs().zip(series).map(|(x, m)| (x, m.mean - m.std)).collect::<Vec<_>>().into_iter().rev());
        chart
            .draw_series(std::iter::once(Polygon::new(band, BLUE.mix(0.2).filled())))
            .map_err(|e| err(&e))?;
    }
    chart
        .draw_series(LineSeries::new(xs().zip(series).map(|(x, m)| (x, m.mean)), BLUE.stroke_width(2)))
        .map_err(|e| err(&e))?;
    chart
        .draw_series(xs().zip(series).map(|(x, m)| Circle::new((x, m.mean), 4, BLUE.filled())))
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// Rebuilds a [`RunResult`] from a result directory written by a run.
pub fn load_result(dir: &Path) -> Result<RunResult> {
    let config = ExperimentConfig::load(dir.join("config.toml"))?;
    let mut seeds = Vec::new();
    for &seed in &config.seeds {
        let sd = dir.join(format!("seed_{seed}"));
        let read = |name: &str| {
            std::fs::read_to_string(sd.join(name)).map_err(|e| Error::Report(format!("{}: {e}", sd.join(name).display())))
        };
        let ledger = MetricsLedger::from_csv(&read("ledger.csv")?, config.tasks)?;
        let metrics = ledger.metrics().map_err(|e| Error::Report(format!("seed {seed}: {e}")))?;
        let timing: Vec<TimingRecord> = serde_json::from_str(&read("timing.json")?)?;
        let invariants: InvariantReport = serde_json::from_str(&read("invariants.json")?)?;
        seeds.push(SeedResult { seed, ledger, metrics, timing, invariants, steps: Vec::new(), dir: Some(sd) });
    }
    let aggregate = Aggregate::from_seeds(&seeds)?;
    Ok(RunResult { config_hash: config.hash(), config, seeds, aggregate, outdir: Some(dir.to_path_buf()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::MetricsLedger;

    fn fake(seed: u64, cols: &[Vec<f64>]) -> SeedResult {
        let ledger = MetricsLedger::from_columns(cols).unwrap();
        SeedResult {
            seed,
            metrics: ledger.metrics().unwrap(),
            ledger,
            timing: Vec::new(),
            invariants: InvariantReport::default(),
            steps: Vec::new(),
            dir: None,
        }
    }

    fn result(seeds: Vec<SeedResult>) -> RunResult {
        RunResult {
            config: ExperimentConfig::default(),
            config_hash: String::new(),
            aggregate: Aggregate::from_seeds(&seeds).unwrap(),
            seeds,
            outdir: None,
        }
    }

    #[test]
    fn ten_task_table_has_avg_column() {
        let cols: Vec<Vec<f64>> = (1..=10).map(|t| vec![50.0; t]).collect();
        let r = result(vec![fake(0, &cols)]);
        let dir = tempfile::tempdir().unwrap();
        emit_tables(&r, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("tables/accuracy.csv")).unwrap();
        let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
        assert_eq!(header.len(), 12);
        assert_eq!(header[10], "task10");
        assert_eq!(header[11], "AVG");
    }

    #[test]
    fn single_task_plot_and_band() {
        let dir = tempfile::tempdir().unwrap();
        let one = result(vec![fake(0, &[vec![70.0]])]);
        emit_plots(&one, dir.path()).unwrap();
        assert!(dir.path().join("plots/aa.svg").exists());

        let cols_a = vec![vec![90.0], vec![80.0, 70.0]];
        let cols_b = vec![vec![70.0], vec![60.0, 50.0]];
        let three = result(vec![fake(0, &cols_a), fake(1, &cols_b), fake(2, &cols_a)]);
        emit_plots(&three, dir.path()).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("plots/aa.svg")).unwrap();
        assert!(svg.contains("polygon"), "expected a shaded band");
    }

    #[test]
    fn incomplete_ledger_is_reported() {
        let mut r = result(vec![fake(0, &[vec![70.0], vec![60.0, 50.0]])]);
        r.seeds[0].ledger = MetricsLedger::new(2);
        let dir = tempfile::tempdir().unwrap();
        let err = emit_tables(&r, dir.path()).unwrap_err().to_string();
        assert!(err.contains("A[1][1]"), "{err}");
    }
}
