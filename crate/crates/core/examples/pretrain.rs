//! Pretrains a small backbone on base classes and saves the checkpoint.
//! Usage: pretrain [out.ckpt]
use prol::backbone::{forward_plain, load_checkpoint, pretrain_base, save_checkpoint, BackboneConfig, PretrainOptions};
use prol::data_stream::{make_synthetic, SyntheticSpec};

fn main() -> prol::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "backbone.ckpt".into());
    let config = BackboneConfig { layers: 2, heads: 2, dim: 32, patch_size: 4, image_side: 16, mlp_ratio: 2.0, channels: 3 };
    let base = make_synthetic(&SyntheticSpec { classes: 4, per_class: 60, image_side: 16, separation: 3.0, seed: 7 })?;
    let opts = PretrainOptions { epochs: 6, base_class_ids: vec![0, 1, 2, 3], ..Default::default() };
    let (ckpt, report) = pretrain_base(&config, &base, &opts)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>2} loss {l:.4}", e + 1);
    }
    println!("train accuracy {:.1}%", 100.0 * report.train_accuracy);
    save_checkpoint(&ckpt, &out)?;
    let back = load_checkpoint(&out)?;
    let f = forward_plain(&back, &[&base.samples()[0].image])?;
    println!("saved {out} (digest {}), feature shape {:?}", back.digest(), f.shape());
    Ok(())
}
