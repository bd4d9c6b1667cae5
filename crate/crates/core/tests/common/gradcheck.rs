//! Central finite-difference checks; each function panics on a mismatch.

use prol::autograd::{Tape, Var};
use prol::backbone::{encode, BackboneCheckpoint, BackboneConfig, PromptVars};
use prol::objectives::{
    cosine, gen_matrix, loss_gen, loss_inter, loss_intra, loss_ort, loss_ort_squared, loss_sim,
};
use prol::prompt::{generate_prompt_vars, PromptInputs};
use prol::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Compares tape gradients of `f` against central differences for every
/// element of every input.
fn check(name: &str, inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &leaves);
    let grads = tape.backward(out);
    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vs: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vs).item()
    };
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(leaves[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        for i in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += H;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * H;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < TOL, "{name}: input {k} element {i}: analytic {a} vs numeric {numeric} (rel {rel:.2e})");
        }
    }
}

pub fn intra_and_inter_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = random(&[4, 6], &mut rng);
    let targets = [0, 2, 3, 2];
    check("intra", &[logits.clone()], |_, v| loss_intra(v[0], &targets, &[0, 2, 3]).unwrap());
    check("inter", &[logits], |_, v| loss_inter(v[0], &targets, &[0, 1, 2, 3, 5]).unwrap());
}

pub fn similarity_and_orthogonality_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = random(&[8], &mut rng);
    let key = random(&[8], &mut rng);
    check("sim", &[q, key], |_, v| loss_sim(v[0], v[1]));

    let keys: Vec<Tensor> = (0..4).map(|_| random(&[8], &mut rng)).collect();
    let old: Vec<Tensor> = (0..4).map(|_| random(&[8], &mut rng)).collect();
    check("ort", &keys[..3], |tape, v| ort(tape, v, &old, false));
    check("ort_squared", &keys[..3], |tape, v| ort(tape, v, &old, true));
}

/// Key 0 appears twice, as two samples of one class would.
fn ort<'t>(tape: &'t Tape, v: &[Var<'t>], old: &[Tensor], squared: bool) -> Var<'t> {
    let olds: Vec<Var<'t>> = old.iter().map(|t| tape.constant(t.clone())).collect();
    let news = vec![v[0], v[1], v[2], v[0]];
    if squared {
        loss_ort_squared(tape, &news, &olds).unwrap()
    } else {
        loss_ort(tape, &news, &olds).unwrap()
    }
}

pub fn generalisation_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plain = random(&[4, 5], &mut rng);
    let prompted = random(&[4, 5], &mut rng);
    for standardize in [true, false] {
        check("gen", &[plain.clone(), prompted.clone()], |_, v| {
            loss_gen(gen_matrix(v[0], v[1], standardize).unwrap()).unwrap()
        });
    }
}

fn tiny() -> (BackboneConfig, BackboneCheckpoint) {
    let cfg = BackboneConfig { layers: 1, heads: 2, dim: 8, patch_size: 2, image_side: 4, mlp_ratio: 2.0, channels: 3 };
    let ckpt = BackboneCheckpoint::init(&cfg, 11).unwrap();
    (cfg, ckpt)
}

fn images(cfg: &BackboneConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    (0..n).map(|_| random(&cfg.image_shape(), rng).map(|v| 0.5 + 0.5 * v)).collect()
}

/// Weighted sum of the prompted features so every output element matters.
fn readout<'t>(tape: &'t Tape, feature: Var<'t>, weights: &Tensor) -> Var<'t> {
    feature.mul(tape.constant(weights.clone())).sum()
}

pub fn prompted_forward_wrt_prefix_keys_and_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (cfg, ckpt) = tiny();
    let imgs = images(&cfg, 3, &mut rng);
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let l = 3;
    let prefixes: Vec<Tensor> = (0..6).map(|_| random(&[cfg.heads, l, cfg.head_dim()], &mut rng)).collect();
    let weights = random(&[3, cfg.dim], &mut rng);
    check("prefix", &prefixes, |tape, v| {
        let theta = ckpt.vars(tape, false);
        let prompts: Vec<PromptVars<'_>> = (0..3)
            .map(|b| PromptVars { injected_layers: vec![0], keys: vec![v[2 * b]], values: vec![v[2 * b + 1]] })
            .collect();
        let f = encode(tape, &cfg, &theta, &refs, Some(&prompts), None).unwrap();
        readout(tape, f, &weights)
    });
}

pub fn prompted_forward_wrt_generator_scalers_shifters_and_key() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (cfg, ckpt) = tiny();
    let imgs = images(&cfg, 2, &mut rng);
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let q = {
        let tape = Tape::new();
        let theta = ckpt.vars(&tape, false);
        encode(&tape, &cfg, &theta, &refs, None, None).unwrap().value().as_ref().clone()
    };
    let l = 4;
    let inputs = vec![
        random(&[1, 2, cfg.heads, 3], &mut rng),
        random(&[cfg.dim], &mut rng),
        random(&[l - 1], &mut rng).map(|v| 1.0 + 0.2 * v),
        random(&[l - 1], &mut rng).map(|v| 0.1 * v),
        random(&[l - 1], &mut rng).map(|v| 1.0 + 0.2 * v),
        random(&[l - 1], &mut rng).map(|v| 0.1 * v),
    ];
    let weights = random(&[2, cfg.dim], &mut rng);
    check("generator", &inputs, |tape, v| {
        let theta = ckpt.vars(tape, false);
        let prompts: Vec<PromptVars<'_>> = (0..2)
            .map(|b| {
                let qb = tape.constant(Tensor::vector(q.row(b).to_vec()));
                let pi = PromptInputs { kernels: v[0], s: cosine(qb, v[1]), a_k: v[2], b_k: v[3], a_v: v[4], b_v: v[5] };
                generate_prompt_vars(q.row(b), &pi, &[0], cfg.heads, l).unwrap()
            })
            .collect();
        let f = encode(tape, &cfg, &theta, &refs, Some(&prompts), None).unwrap();
        readout(tape, f, &weights)
    });
}
