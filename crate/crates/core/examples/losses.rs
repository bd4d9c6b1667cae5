//! Evaluates each term of the joint objective on a toy batch.
use prol::autograd::Tape;
use prol::objectives::{gen_matrix, loss_gen, loss_inter, loss_intra, loss_ort, loss_sim, loss_total, LossComponents, LossWeights};
use prol::Tensor;

fn main() -> prol::Result<()> {
    let tape = Tape::new();
    // six registered classes; the current task owns 4 and 5
    let logits = tape.constant(Tensor::matrix(2, 6, vec![0.2, 1.0, -0.5, 0.3, 2.0, 0.1, 1.5, 0.0, 0.4, -0.2, 0.3, 1.1]));
    let y = [4, 5];
    let intra = loss_intra(logits, &y, &[4, 5])?.item();
    let inter = loss_inter(logits, &y, &[0, 1, 2, 3, 4, 5])?.item();

    let q = tape.constant(Tensor::vector(vec![1.0, 0.5, -0.2, 0.0]));
    let key = tape.constant(Tensor::vector(vec![0.8, 0.6, 0.0, 0.1]));
    let sim = loss_sim(q, key).item();
    let old = tape.constant(Tensor::vector(vec![0.0, 0.2, 1.0, 0.0]));
    let ort = loss_ort(&tape, &[key], &[old])?.item();

    let plain = tape.constant(Tensor::matrix(3, 3, vec![1.0, 0.0, 2.0, 0.5, 1.0, 0.0, -1.0, 2.0, 1.0]));
    let prompted = tape.constant(Tensor::matrix(3, 3, vec![1.1, 0.1, 1.8, 0.4, 1.2, 0.1, -0.9, 2.1, 0.8]));
    let gen = loss_gen(gen_matrix(plain, prompted, true)?)?.item();

    let comps = LossComponents { intra, inter, sim, ort, gen };
    let report = loss_total(&comps, &LossWeights::default());
    println!("{report:#?}");
    Ok(())
}
