//! Generates a class-conditioned prefix from a backbone feature and shows
//! how it moves the prompted feature.
use prol::backbone::{forward_plain, forward_prompted, BackboneCheckpoint, BackboneConfig};
use prol::data_stream::{make_synthetic, SyntheticSpec};
use prol::prompt::{generate_prompt, PromptConfig, PromptGenerator, PromptState};

fn main() -> prol::Result<()> {
    let cfg = BackboneConfig::default();
    let ckpt = BackboneCheckpoint::init(&cfg, 3)?;
    let big = PromptGenerator::init(&(0..12).collect::<Vec<_>>(), 12, 0)?;
    println!("generator parameters at 12 layers x 12 heads: {}", big.param_count());

    let pc = PromptConfig::for_layers(cfg.layers);
    let mut state = PromptState::new(pc.clone(), cfg.dim, cfg.heads, 0)?;
    println!("injected layers {:?}, {} generator parameters, {} scalers/shifters per class",
        pc.injected_layers, state.generator.param_count(), pc.scaler_shifter_count());
    for c in 0..3 {
        state.register_class(c, 1)?;
    }

    let ds = make_synthetic(&SyntheticSpec { classes: 3, per_class: 2, image_side: cfg.image_side, separation: 3.0, seed: 0 })?;
    let x = &ds.samples()[0].image;
    let q = forward_plain(&ckpt, &[x])?;
    let (c, s) = state.match_key(q.row(0))?;
    println!("matched class {c} with similarity {s:.4}");
    for gate in [0.0, s, 1.0] {
        let p = generate_prompt(q.row(0), &state.classes[&c], gate, &state.generator, &pc)?;
        let f = forward_prompted(&ckpt, &[x], &[p.clone()])?;
        println!("s = {gate:.3}: prefix {:?} per layer, max |f_P - f| = {:.4}", p.keys[0].shape(), f.max_abs_diff(&q));
    }
    Ok(())
}
