//! Loss terms of the joint objective and the feature cross-correlation
//! matrix they regularise.
//!
//! Every term is a tape operation with a hand-written backward so the
//! learner can differentiate the weighted sum in one sweep.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Guard in the cosine denominator.
pub const SIM_EPS: f64 = 1e-8;
/// Guard added to the column variance before standardising.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub intra: f64,
    pub inter: f64,
    pub sim: f64,
    pub ort: f64,
    pub gen: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { intra: 1.0, inter: 0.01, sim: 1.0, ort: 1.0, gen: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Vec<String> {
        let all = [
            ("lambda_intra", self.intra),
            ("lambda_inter", self.inter),
            ("lambda_sim", self.sim),
            ("lambda_ort", self.ort),
            ("lambda_gen", self.gen),
        ];
        all.iter()
            .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
            .map(|(k, v)| format!("{k} must be finite and >= 0, got {v}"))
            .collect()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            intra: self.intra * k,
            inter: self.inter * k,
            sim: self.sim * k,
            ort: self.ort * k,
            gen: self.gen * k,
        }
    }
}

/// Raw values of the five terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub intra: f64,
    pub inter: f64,
    pub sim: f64,
    pub ort: f64,
    pub gen: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub intra: f64,
    pub inter: f64,
    pub sim: f64,
    pub ort: f64,
    pub gen: f64,
    /// `λ1·intra + λ2·inter`, the signal the hard/soft switch watches.
    pub ce: f64,
    pub total: f64,
}

pub fn loss_total(c: &LossComponents, w: &LossWeights) -> LossReport {
    let ce = w.intra * c.intra + w.inter * c.inter;
    LossReport {
        intra: c.intra,
        inter: c.inter,
        sim: c.sim,
        ort: c.ort,
        gen: c.gen,
        ce,
        total: ce + w.sim * c.sim + w.ort * c.ort + w.gen * c.gen,
    }
}

/// Mean cross-entropy whose softmax runs over the `allowed` columns only.
/// Disallowed logits are never read, so they carry no value and no gradient.
pub fn masked_cross_entropy<'t>(logits: Var<'t>, targets: &[usize], allowed: &[bool]) -> Result<Var<'t>> {
    let lv = logits.value();
    if lv.rank() != 2 {
        return Err(contract("logits must be [B, C]"));
    }
    let (b, c) = (lv.rows(), lv.cols());
    if targets.len() != b || allowed.len() != c {
        return Err(contract(format!(
            "cross-entropy got {} targets / {} mask entries for logits {b}x{c}",
            targets.len(),
            allowed.len()
        )));
    }
    if b == 0 {
        return Err(contract("empty batch"));
    }
    let cols: Vec<usize> = (0..c).filter(|&j| allowed[j]).collect();
    for (i, &t) in targets.iter().enumerate() {
        if t >= c || !allowed[t] {
            return Err(contract(format!("target column {t} of sample {i} lies outside the softmax support")));
        }
    }
    let mut probs = vec![0.0; b * cols.len()];
    let mut total = 0.0;
    for i in 0..b {
        let row = lv.row(i);
        let max = cols.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = cols.iter().map(|&j| (row[j] - max).exp()).sum();
        let logz = max + z.ln();
        total += logz - row[targets[i]];
        for (k, &j) in cols.iter().enumerate() {
            probs[i * cols.len() + k] = (row[j] - logz).exp();
        }
    }
    let targets = targets.to_vec();
    let value = Tensor::scalar(total / b as f64);
    Ok(logits.tape().op(value, &[logits], move |ctx| {
        let g = ctx.grad.item() / b as f64;
        let mut d = vec![0.0; b * c];
        for i in 0..b {
            for (k, &j) in cols.iter().enumerate() {
                d[i * c + j] = g * probs[i * cols.len() + k];
            }
            d[i * c + targets[i]] -= g;
        }
        vec![Some(Tensor::matrix(b, c, d))]
    }))
}

fn column_mask(width: usize, cols: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; width];
    for &c in cols {
        if c >= width {
            return Err(contract(format!("class column {c} beyond logit width {width}")));
        }
        mask[c] = true;
    }
    Ok(mask)
}

/// Cross-entropy over the current task's classes.
pub fn loss_intra<'t>(logits: Var<'t>, targets: &[usize], current: &[usize]) -> Result<Var<'t>> {
    let width = logits.value().cols();
    masked_cross_entropy(logits, targets, &column_mask(width, current)?)
}

/// Cross-entropy over every class seen so far.
pub fn loss_inter<'t>(logits: Var<'t>, targets: &[usize], seen: &[usize]) -> Result<Var<'t>> {
    let width = logits.value().cols();
    masked_cross_entropy(logits, targets, &column_mask(width, seen)?)
}

/// `(a·b) / max(‖a‖‖b‖, ε)`.
pub fn cosine<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let (av, bv) = (a.value(), b.value());
    assert_eq!(av.len(), bv.len(), "cosine length mismatch");
    let dotp = av.dot(&bv);
    let (na, nb) = (av.norm(), bv.norm());
    let denom = na * nb;
    let guarded = denom < SIM_EPS;
    let value = if guarded { dotp / SIM_EPS } else { dotp / denom };
    a.tape().op(Tensor::scalar(value), &[a, b], move |ctx| {
        let g = ctx.grad.item();
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        if guarded {
            return vec![
                ctx.need[0].then(|| b.scale(g / SIM_EPS)),
                ctx.need[1].then(|| a.scale(g / SIM_EPS)),
            ];
        }
        vec![
            ctx.need[0].then(|| {
                b.zip_map(a, |bi, ai| g * (bi / denom - value * ai / (na * na)))
            }),
            ctx.need[1].then(|| {
                a.zip_map(b, |ai, bi| g * (ai / denom - value * bi / (nb * nb)))
            }),
        ]
    })
}

/// Pulls a class key toward the input feature: `-cos(q, key)`.
pub fn loss_sim<'t>(q: Var<'t>, key: Var<'t>) -> Var<'t> {
    cosine(q, key).scale(-1.0)
}

/// Mean dot product between each new-class key and its paired old key.
/// Returns an exact zero, disconnected from every key, when there are none.
pub fn loss_ort<'t>(tape: &'t Tape, new_keys: &[Var<'t>], old_keys: &[Var<'t>]) -> Result<Var<'t>> {
    if new_keys.len() != old_keys.len() {
        return Err(contract(format!(
            "{} new keys paired with {} old keys",
            new_keys.len(),
            old_keys.len()
        )));
    }
    if new_keys.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var<'t>> = None;
    for (n, o) in new_keys.iter().zip(old_keys) {
        let d = n.dot(*o);
        acc = Some(match acc {
            Some(a) => a.add(d),
            None => d,
        });
    }
    Ok(acc.expect("non-empty").scale(1.0 / new_keys.len() as f64))
}

/// Squared variant of [`loss_ort`], bounded below by zero.
pub fn loss_ort_squared<'t>(tape: &'t Tape, new_keys: &[Var<'t>], old_keys: &[Var<'t>]) -> Result<Var<'t>> {
    if new_keys.len() != old_keys.len() {
        return Err(contract("key lists differ in length"));
    }
    if new_keys.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let dots: Vec<Var<'t>> = new_keys.iter().zip(old_keys).map(|(n, o)| {
        let d = n.dot(*o);
        d.mul(d)
    }).collect();
    let mut acc = dots[0];
    for d in &dots[1..] {
        acc = acc.add(*d);
    }
    Ok(acc.scale(1.0 / new_keys.len() as f64))
}

/// Shifts each column to zero mean and scales it to unit (population)
/// standard deviation, `x̂ = (x − μ) / sqrt(σ² + ε)`.
pub fn standardize_cols<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let xv = x.value();
    let (b, d) = (xv.rows(), xv.cols());
    if b < 2 {
        return Err(contract("standardising features needs a batch of at least 2"));
    }
    let mut xhat = vec![0.0; b * d];
    let mut inv = vec![0.0; d];
    for j in 0..d {
        let mean = (0..b).map(|i| xv.at2(i, j)).sum::<f64>() / b as f64;
        let var = (0..b).map(|i| (xv.at2(i, j) - mean).powi(2)).sum::<f64>() / b as f64;
        inv[j] = 1.0 / (var + STD_EPS).sqrt();
        for i in 0..b {
            xhat[i * d + j] = (xv.at2(i, j) - mean) * inv[j];
        }
    }
    let out = Tensor::matrix(b, d, xhat.clone());
    Ok(x.tape().op(out, &[x], move |ctx| {
        let g = ctx.grad;
        let mut dx = vec![0.0; b * d];
        for j in 0..d {
            let mg = (0..b).map(|i| g.at2(i, j)).sum::<f64>() / b as f64;
            let mgx = (0..b).map(|i| g.at2(i, j) * xhat[i * d + j]).sum::<f64>() / b as f64;
            for i in 0..b {
                dx[i * d + j] = inv[j] * (g.at2(i, j) - mg - xhat[i * d + j] * mgx);
            }
        }
        vec![Some(Tensor::matrix(b, d, dx))]
    }))
}

/// Cross-correlation between plain and prompted features:
/// `M = (1/B) f_plainᵀ f_prompted`, optionally on standardised columns.
pub fn gen_matrix<'t>(f_plain: Var<'t>, f_prompted: Var<'t>, standardize: bool) -> Result<Var<'t>> {
    let (a, b) = (f_plain.shape(), f_prompted.shape());
    if a != b || a.len() != 2 {
        return Err(contract(format!("feature shapes {a:?} and {b:?} must match and be [B, D]")));
    }
    let batch = a[0];
    if batch == 0 {
        return Err(contract("empty batch"));
    }
    let (p, q) = if standardize {
        (standardize_cols(f_plain)?, standardize_cols(f_prompted)?)
    } else {
        (f_plain, f_prompted)
    };
    Ok(p.transpose().matmul(q).scale(1.0 / batch as f64))
}

/// Snapshot of a generalisation matrix and the batch that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct GenMatrix {
    pub m: Tensor,
    pub batch: usize,
}

impl GenMatrix {
    pub fn from_features(f_plain: &Tensor, f_prompted: &Tensor, standardize: bool) -> Result<Self> {
        let tape = Tape::new();
        let m = gen_matrix(tape.constant(f_plain.clone()), tape.constant(f_prompted.clone()), standardize)?;
        Ok(Self { m: m.value().as_ref().clone(), batch: f_plain.rows() })
    }

    pub fn loss(&self) -> Result<f64> {
        let tape = Tape::new();
        Ok(loss_gen(tape.constant(self.m.clone()))?.item())
    }
}

/// `(1/D) Σ (1 − M_ii)² + 1/(D(D−1)) Σ_{i≠j} M_ij²`.
pub fn loss_gen<'t>(m: Var<'t>) -> Result<Var<'t>> {
    let mv = m.value();
    if mv.rank() != 2 || mv.rows() != mv.cols() {
        return Err(contract("generalisation matrix must be square"));
    }
    let d = mv.rows();
    if d < 2 {
        return Err(contract("generalisation loss needs D >= 2 (off-diagonal term undefined)"));
    }
    let (wd, wo) = (1.0 / d as f64, 1.0 / (d * (d - 1)) as f64);
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..d {
        for j in 0..d {
            let v = mv.at2(i, j);
            if i == j {
                diag += (1.0 - v).powi(2);
            } else {
                off += v * v;
            }
        }
    }
    let value = Tensor::scalar(wd * diag + wo * off);
    Ok(m.tape().op(value, &[m], move |ctx| {
        let g = ctx.grad.item();
        let mv = ctx.inputs[0];
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let v = mv.at2(i, j);
                out[i * d + j] = if i == j { -2.0 * wd * (1.0 - v) * g } else { 2.0 * wo * v * g };
            }
        }
        vec![Some(Tensor::matrix(d, d, out))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of<F>(f: F) -> f64
    where
        F: for<'t> FnOnce(&'t Tape) -> Var<'t>,
    {
        let tape = Tape::new();
        f(&tape).item()
    }

    #[test]
    fn intra_single_class_is_zero() {
        let v = scalar_of(|t| {
            let logits = t.constant(Tensor::matrix(2, 3, vec![0.3, 5.0, -1.0, 2.0, 0.0, 7.0]));
            loss_intra(logits, &[1, 1], &[1]).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let v = scalar_of(|t| {
            let logits = t.constant(Tensor::full([3, 6], 0.7));
            loss_intra(logits, &[0, 2, 3], &[0, 1, 2, 3]).unwrap()
        });
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let v = scalar_of(|t| {
            let logits = t.constant(Tensor::full([2, 8], -1.0));
            loss_inter(logits, &[0, 7], &(0..8).collect::<Vec<_>>()).unwrap()
        });
        assert!((v - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_support_label_is_rejected() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros([1, 4]));
        assert!(loss_intra(logits, &[3], &[0, 1]).is_err());
        assert!(loss_inter(logits, &[3], &[0, 1, 2]).is_err());
    }

    #[test]
    fn sim_examples() {
        let k = vec![0.3, -1.2, 2.0];
        let v = scalar_of(|t| loss_sim(t.constant(Tensor::vector(k.clone())), t.constant(Tensor::vector(k.clone()))));
        assert!((v + 1.0).abs() < 1e-12);
        let v = scalar_of(|t| {
            loss_sim(t.constant(Tensor::vector(vec![1.0, 0.0])), t.constant(Tensor::vector(vec![0.0, 3.0])))
        });
        assert_eq!(v, 0.0);
        let v = scalar_of(|t| loss_sim(t.constant(Tensor::zeros([3])), t.constant(Tensor::vector(k.clone()))));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn ort_examples() {
        let tape = Tape::new();
        let v = |x: Vec<f64>| tape.constant(Tensor::vector(x));
        let zero = loss_ort(&tape, &[v(vec![1.0, 0.0])], &[v(vec![0.0, 1.0])]).unwrap();
        assert_eq!(zero.item(), 0.0);
        // dots 0.5 and -0.1 -> mean 0.2
        let l = loss_ort(&tape, &[v(vec![0.5, 0.0]), v(vec![0.0, -0.1])], &[v(vec![1.0, 0.0]), v(vec![0.0, 1.0])]).unwrap();
        assert!((l.item() - 0.2).abs() < 1e-12);
        let empty = loss_ort(&tape, &[], &[]).unwrap();
        assert_eq!(empty.item(), 0.0);
        assert!(!empty.requires_grad());
    }

    #[test]
    fn gen_loss_examples() {
        let loss = |m: Tensor| GenMatrix { m, batch: 1 }.loss().unwrap();
        assert_eq!(loss(Tensor::eye(5)), 0.0);
        for d in 2..6 {
            assert!((loss(Tensor::zeros([d, d])) - 1.0).abs() < 1e-12);
        }
        assert!((loss(Tensor::matrix(2, 2, vec![1.0, 0.5, 0.5, 1.0])) - 0.25).abs() < 1e-12);
        assert!(GenMatrix { m: Tensor::eye(1), batch: 1 }.loss().is_err());
    }

    #[test]
    fn raw_gen_matrix_by_hand() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.0]);
        let m = GenMatrix::from_features(&a, &b, false).unwrap().m;
        // (1/2) * [[1*0.5+3*2, 1*-1+3*0], [2*0.5+4*2, 2*-1+4*0]]
        assert_eq!(m.data(), &[3.25, -0.5, 4.5, -1.0]);
        let z = GenMatrix::from_features(&Tensor::zeros([3, 2]), &b.clone().reshape([2, 2]), false);
        assert!(z.is_err());
        let zero = GenMatrix::from_features(&Tensor::zeros([2, 2]), &b, false).unwrap();
        assert!(zero.m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_requires_two_rows() {
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]);
        assert!(GenMatrix::from_features(&x, &x, true).is_err());
    }

    #[test]
    fn total_composition() {
        let c = LossComponents { intra: 1.0, inter: 1.0, sim: 1.0, ort: 1.0, gen: 1.0 };
        let w = LossWeights { intra: 1.0, inter: 0.03, sim: 1.0, ort: 1.0, gen: 1.0 };
        let r = loss_total(&c, &w);
        assert!((r.total - 4.03).abs() < 1e-12);
        assert!((r.ce - 1.03).abs() < 1e-12);
        assert_eq!(loss_total(&c, &w.scaled(0.0)).total, 0.0);
        let only_gen = LossWeights { intra: 0.0, inter: 0.0, sim: 0.0, ort: 0.0, gen: 2.5 };
        let c2 = LossComponents { gen: 0.4, ..c };
        assert_eq!(loss_total(&c2, &only_gen).total, 2.5 * 0.4);
    }
}
