use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prol::backbone::save_checkpoint;
use prol::experiment::{
    ablate, grid_search_lr, load_result, prepare_backbone, prepare_data, run_experiment, validate_config,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "prol", version, about = "Rehearsal-free online class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone on the base classes and save the checkpoint.
    Pretrain(Common),
    /// Continual run over every configured seed.
    Run(Common),
    /// Single-seed run per learning rate; picks the best by FAA.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Comma-separated rates; defaults to the config's grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Every cumulative component row over every seed.
    Ablate(Common),
    /// Rebuild tables and plots from an existing result directory.
    Report {
        #[arg(long)]
        outdir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    prompt_length: Option<usize>,
    /// Injected layers: a count `n` (layers 0..n) or a comma-separated list.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lthres: Option<f64>,
    /// `full`, `ft`, or a component row such as `FT+G`.
    #[arg(long)]
    ablation: Option<String>,
    /// Result directory; defaults to `$PROL_OUTDIR/<command>`.
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Existing backbone checkpoint.
    #[arg(long)]
    pretrain: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, command: &str) -> Result<(ExperimentConfig, PathBuf), String> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(|e| e.to_string())?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(v) = self.tasks {
            cfg.tasks = v;
        }
        if let Some(v) = self.chunk_size {
            cfg.chunk_size = v;
        }
        if let Some(v) = self.prompt_length {
            cfg.prompt_length = v;
        }
        if let Some(v) = &self.layers {
            cfg.injected_layers = Some(parse_layers(v)?);
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.lthres {
            cfg.lthres = v;
        }
        if let Some(v) = &self.ablation {
            cfg.ablation = v.clone();
        }
        if let Some(v) = &self.pretrain {
            cfg.pretrained = Some(v.clone());
        }
        let outdir = self
            .outdir
            .clone()
            .or_else(|| cfg.outdir.clone())
            .unwrap_or_else(|| default_root().join(command));
        Ok((cfg, outdir))
    }
}

fn default_root() -> PathBuf {
    std::env::var_os("PROL_OUTDIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn parse_layers(s: &str) -> Result<Vec<usize>, String> {
    let parts: Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
    let parts = parts.map_err(|e| format!("--layers `{s}`: {e}"))?;
    Ok(if parts.len() == 1 { (0..parts[0]).collect() } else { parts })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    let s = |e: prol::Error| e.to_string();
    match cli.command {
        Command::Pretrain(common) => {
            let (cfg, outdir) = common.resolve("pretrain")?;
            let cfg = validate_config(&cfg).map_err(s)?.config;
            let data = prepare_data(&cfg).map_err(s)?;
            let (ckpt, report) = prepare_backbone(&cfg, &data).map_err(s)?;
            std::fs::create_dir_all(&outdir).map_err(|e| e.to_string())?;
            let path = outdir.join("backbone.ckpt");
            save_checkpoint(&ckpt, &path).map_err(s)?;
            if let Some(r) = report {
                println!("train accuracy {:.2}%", 100.0 * r.train_accuracy);
                let json = serde_json::to_string_pretty(&r).map_err(|e| e.to_string())?;
                std::fs::write(outdir.join("pretrain.json"), json).map_err(|e| e.to_string())?;
            }
            println!("backbone {} -> {}", ckpt.digest(), path.display());
        }
        Command::Run(common) => {
            let (cfg, outdir) = common.resolve("run")?;
            let r = run_experiment(&cfg, Some(&outdir)).map_err(s)?;
            for seed in &r.seeds {
                println!("seed {}: FAA {:.2} CAA {:.2} FFM {}", seed.seed, seed.metrics.faa, seed.metrics.caa, fmt_opt(seed.metrics.ffm));
            }
            let a = &r.aggregate;
            println!(
                "mean: FAA {:.2} ± {:.2}  CAA {:.2} ± {:.2}  FFM {}",
                a.faa.mean,
                a.faa.std,
                a.caa.mean,
                a.caa.std,
                a.ffm.map_or("n/a".into(), |m| format!("{:.2} ± {:.2}", m.mean, m.std))
            );
            println!("results in {}", outdir.display());
        }
        Command::Grid { common, grid } => {
            let (cfg, outdir) = common.resolve("grid")?;
            let grid = grid.unwrap_or_else(|| cfg.lr_grid.clone());
            let r = grid_search_lr(&cfg, &grid, Some(&outdir)).map_err(s)?;
            for row in &r.rows {
                println!("lr {:<8} FAA {:.2} CAA {:.2} FFM {}", row.lr, row.faa, row.caa, fmt_opt(row.ffm));
            }
            println!("best lr {}", r.best_lr);
        }
        Command::Ablate(common) => {
            let (cfg, outdir) = common.resolve("ablate")?;
            let rows = ablate(&cfg, Some(&outdir)).map_err(s)?;
            println!("{:<22} {:>14} {:>14} {:>14}", "method", "FAA", "CAA", "FFM");
            for r in rows {
                let ffm = r.ffm.map_or("n/a".into(), |m| format!("{:.2}±{:.2}", m.mean, m.std));
                println!(
                    "{:<22} {:>14} {:>14} {:>14}",
                    r.name,
                    format!("{:.2}±{:.2}", r.faa.mean, r.faa.std),
                    format!("{:.2}±{:.2}", r.caa.mean, r.caa.std),
                    ffm
                );
            }
        }
        Command::Report { outdir } => {
            let r = load_result(&outdir).map_err(s)?;
            prol::experiment::emit_tables(&r, &outdir).map_err(s)?;
            prol::experiment::emit_plots(&r, &outdir).map_err(s)?;
            println!(
                "{} seeds, FAA {:.2} ± {:.2}; tables and plots refreshed in {}",
                r.seeds.len(),
                r.aggregate.faa.mean,
                r.aggregate.faa.std,
                outdir.display()
            );
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.2}"))
}
