//! The shared prompt generator, per-class keys and scaler/shifter banks,
//! key matching and prompt assembly.
//!
//! A prompt for one layer and head is built from a single generated row
//! `g = s · conv(kernel, q_h)`: position 1 is `g` itself and every later
//! position `i` is `a[i-1] · g + b[i-1]`, with `(a, b)` owned by the class.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{PrefixPrompt, PromptVars};
use crate::container::{DType, NamedTensors};
use crate::data_stream::ClassId;
use crate::error::{contract, Error, Result};
use crate::objectives::SIM_EPS;
use crate::tensor::Tensor;

/// Half-width of the uniform range kernels are drawn from.
pub const KERNEL_INIT_RANGE: f64 = 0.5;

const BRANCHES: [&str; 2] = ["K", "V"];

/// Which backbone read-out feeds key matching and the generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchSource {
    /// Class token after the final norm.
    #[default]
    ClassFeature,
    /// Class token before the final norm.
    ClassToken,
    /// Mean of the patch embeddings.
    PatchEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub length: usize,
    pub injected_layers: Vec<usize>,
    pub eps_a: f64,
    pub eps_b: f64,
    #[serde(default)]
    pub match_source: MatchSource,
}

impl PromptConfig {
    /// Prompts in every layer up to the fifth.
    pub fn for_layers(layers: usize) -> Self {
        Self {
            length: 5,
            injected_layers: (0..layers.min(5)).collect(),
            eps_a: 0.2,
            eps_b: 0.1,
            match_source: MatchSource::ClassFeature,
        }
    }

    pub fn validate(&self, backbone_layers: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.length < 2 {
            errs.push(format!(
                "prompt length must be >= 2 (positions 2..l carry scalers), got {}",
                self.length
            ));
        }
        if !(self.eps_a > 0.0 && self.eps_a.is_finite()) {
            errs.push(format!("eps_a must be positive, got {}", self.eps_a));
        }
        if !(self.eps_b > 0.0 && self.eps_b.is_finite()) {
            errs.push(format!("eps_b must be positive, got {}", self.eps_b));
        }
        if self.injected_layers.windows(2).any(|w| w[0] >= w[1]) {
            errs.push(format!("injected layers must be strictly increasing: {:?}", self.injected_layers));
        }
        if let Some(&l) = self.injected_layers.iter().find(|&&l| l >= backbone_layers) {
            errs.push(format!("injected layer {l} out of range for a {backbone_layers}-layer backbone"));
        }
        errs
    }

    /// `4 × (l − 1)`.
    pub fn scaler_shifter_count(&self) -> usize {
        4 * (self.length - 1)
    }
}

/// One length-3 kernel per injected layer, branch and head, stored as
/// `[layers, 2, heads, 3]` with branch 0 = K and 1 = V.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGenerator {
    pub injected_layers: Vec<usize>,
    pub heads: usize,
    pub kernels: Tensor,
    pub frozen: bool,
}

impl PromptGenerator {
    pub fn init(injected_layers: &[usize], heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 {
            return Err(contract("generator needs at least one head"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = injected_layers.len() * 2 * heads * 3;
        let data = (0..n).map(|_| rng.gen_range(-KERNEL_INIT_RANGE..KERNEL_INIT_RANGE)).collect();
        Ok(Self {
            injected_layers: injected_layers.to_vec(),
            heads,
            kernels: Tensor::new([injected_layers.len(), 2, heads, 3], data),
            frozen: false,
        })
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernel(&self, layer_slot: usize, branch: usize, head: usize) -> &[f64] {
        let o = ((layer_slot * 2 + branch) * self.heads + head) * 3;
        &self.kernels.data()[o..o + 3]
    }

    pub fn digest(&self) -> String {
        crate::backbone::digest_tensors(std::iter::once(("gen", &self.kernels)))
    }
}

/// Key and scaler/shifter vectors of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassState {
    pub class_id: ClassId,
    pub key: Tensor,
    pub a_k: Tensor,
    pub b_k: Tensor,
    pub a_v: Tensor,
    pub b_v: Tensor,
    pub created_task: usize,
}

impl ClassState {
    pub fn new(class_id: ClassId, dim: usize, length: usize, created_task: usize, seed: u64) -> Result<Self> {
        if length < 2 {
            return Err(contract("prompt length must be >= 2"));
        }
        if dim == 0 {
            return Err(contract("key dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class_id as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        let mut key: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = key.iter().map(|v| v * v).sum::<f64>().sqrt();
        key.iter_mut().for_each(|v| *v /= norm);
        let n = length - 1;
        Ok(Self {
            class_id,
            key: Tensor::vector(key),
            a_k: Tensor::full([n], 1.0),
            b_k: Tensor::zeros([n]),
            a_v: Tensor::full([n], 1.0),
            b_v: Tensor::zeros([n]),
            created_task,
        })
    }

    pub fn scaler_shifter_count(&self) -> usize {
        self.a_k.len() + self.b_k.len() + self.a_v.len() + self.b_v.len()
    }

    pub fn within_bounds(&self, eps_a: f64, eps_b: f64) -> bool {
        let a_ok = |t: &Tensor| t.data().iter().all(|&v| (1.0 - eps_a..=1.0 + eps_a).contains(&v));
        let b_ok = |t: &Tensor| t.data().iter().all(|&v| (-eps_b..=eps_b).contains(&v));
        a_ok(&self.a_k) && a_ok(&self.a_v) && b_ok(&self.b_k) && b_ok(&self.b_v)
    }
}

/// Projects every scaler into `[1−ε_a, 1+ε_a]` and shifter into `[−ε_b, ε_b]`.
pub fn clamp_class(state: &mut ClassState, eps_a: f64, eps_b: f64) {
    for t in [&mut state.a_k, &mut state.a_v] {
        t.data_mut().iter_mut().for_each(|v| *v = v.clamp(1.0 - eps_a, 1.0 + eps_a));
    }
    for t in [&mut state.b_k, &mut state.b_v] {
        t.data_mut().iter_mut().for_each(|v| *v = v.clamp(-eps_b, eps_b));
    }
}

/// Same-padded 1-D cross-correlation: `out[j] = Σ_k kernel[k] · v[j + k − 1]`.
pub fn conv_same(kernel: &[f64], v: &[f64]) -> Vec<f64> {
    assert_eq!(kernel.len(), 3, "kernels have exactly three taps");
    let m = v.len();
    (0..m)
        .map(|j| {
            (0..3)
                .filter_map(|k| (j + k).checked_sub(1).filter(|&i| i < m).map(|i| kernel[k] * v[i]))
                .sum()
        })
        .collect()
}

/// Cosine with the same ε guard as the similarity loss.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(SIM_EPS)
}

/// Top-1 class over `scope` by cosine to `q`; ties go to the smallest id.
pub fn match_key(
    q: &[f64],
    classes: &BTreeMap<ClassId, ClassState>,
    scope: &[ClassId],
) -> Result<(ClassId, f64)> {
    if scope.is_empty() {
        return Err(contract("key matching over an empty class scope"));
    }
    let mut ids = scope.to_vec();
    ids.sort_unstable();
    let mut best: Option<(ClassId, f64)> = None;
    for c in ids {
        let state = classes.get(&c).ok_or_else(|| contract(format!("class {c} is not registered")))?;
        let s = cosine(q, state.key.data());
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    Ok(best.expect("non-empty scope"))
}

/// Differentiable view of the quantities a prompt depends on.
pub struct PromptInputs<'t> {
    pub kernels: Var<'t>,
    pub s: Var<'t>,
    pub a_k: Var<'t>,
    pub b_k: Var<'t>,
    pub a_v: Var<'t>,
    pub b_v: Var<'t>,
}

/// Builds the prefix for one sample on the tape. `q` is a constant read-out
/// of the frozen backbone, so no gradient flows into it.
pub fn generate_prompt_vars<'t>(
    q: &[f64],
    inputs: &PromptInputs<'t>,
    injected_layers: &[usize],
    heads: usize,
    length: usize,
) -> Result<PromptVars<'t>> {
    if q.iter().any(|v| !v.is_finite()) {
        return Err(contract("non-finite feature passed to the prompt generator"));
    }
    if heads == 0 || q.len() % heads != 0 {
        return Err(contract(format!("feature length {} not divisible into {heads} heads", q.len())));
    }
    if length < 2 {
        return Err(contract("prompt length must be >= 2"));
    }
    let nl = injected_layers.len();
    let hd = q.len() / heads;
    let kv = inputs.kernels.value();
    if kv.shape() != [nl, 2, heads, 3] {
        return Err(contract(format!("kernel bank shape {:?}, expected [{nl}, 2, {heads}, 3]", kv.shape())));
    }
    let ab: Vec<std::rc::Rc<Tensor>> =
        [inputs.a_k, inputs.b_k, inputs.a_v, inputs.b_v].iter().map(|v| v.value()).collect();
    if ab.iter().any(|t| t.len() != length - 1) {
        return Err(contract(format!("scaler/shifter vectors must have length {}", length - 1)));
    }
    let s = inputs.s.item();

    // conv output per (layer, branch, head) before the similarity gate
    let mut conv = vec![0.0; nl * 2 * heads * hd];
    for slot in 0..nl * 2 * heads {
        let h = slot % heads;
        let k = &kv.data()[slot * 3..slot * 3 + 3];
        conv[slot * hd..(slot + 1) * hd].copy_from_slice(&conv_same(k, &q[h * hd..(h + 1) * hd]));
    }
    let per = heads * length * hd;
    let mut out = vec![0.0; nl * 2 * per];
    for li in 0..nl {
        for br in 0..2 {
            let (a, b) = (&ab[br * 2], &ab[br * 2 + 1]);
            for h in 0..heads {
                let g = &conv[((li * 2 + br) * heads + h) * hd..][..hd];
                let base = (li * 2 + br) * per + h * length * hd;
                for i in 0..length {
                    for j in 0..hd {
                        let gj = s * g[j];
                        out[base + i * hd + j] = if i == 0 { gj } else { a.data()[i - 1] * gj + b.data()[i - 1] };
                    }
                }
            }
        }
    }
    let q_owned = q.to_vec();
    let bank = inputs.kernels.tape().op(
        Tensor::matrix(nl * 2, per, out),
        &[inputs.kernels, inputs.s, inputs.a_k, inputs.b_k, inputs.a_v, inputs.b_v],
        move |ctx| {
            let gout = ctx.grad.data();
            let kv = ctx.inputs[0].data();
            let s = ctx.inputs[1].item();
            let mut dk = vec![0.0; kv.len()];
            let mut ds = 0.0;
            let mut dab = vec![vec![0.0; length - 1]; 4];
            let mut dg = vec![0.0; hd];
            for li in 0..nl {
                for br in 0..2 {
                    let (a, _) = (ctx.inputs[2 + br * 2], ctx.inputs[3 + br * 2]);
                    for h in 0..heads {
                        let slot = (li * 2 + br) * heads + h;
                        let c = &conv[slot * hd..(slot + 1) * hd];
                        let base = (li * 2 + br) * per + h * length * hd;
                        dg.iter_mut().for_each(|v| *v = 0.0);
                        for i in 0..length {
                            let row = &gout[base + i * hd..base + (i + 1) * hd];
                            let scale = if i == 0 { 1.0 } else { a.data()[i - 1] };
                            for j in 0..hd {
                                dg[j] += scale * row[j];
                            }
                            if i > 0 {
                                let (mut ga, mut gb) = (0.0, 0.0);
                                for j in 0..hd {
                                    ga += row[j] * s * c[j];
                                    gb += row[j];
                                }
                                dab[br * 2][i - 1] += ga;
                                dab[br * 2 + 1][i - 1] += gb;
                            }
                        }
                        // g = s * c, c = conv(kernel, q_h)
                        let qh = &q_owned[h * hd..(h + 1) * hd];
                        for j in 0..hd {
                            ds += dg[j] * c[j];
                            for k in 0..3 {
                                if let Some(i) = (j + k).checked_sub(1).filter(|&i| i < hd) {
                                    dk[slot * 3 + k] += s * dg[j] * qh[i];
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                ctx.need[0].then(|| Tensor::new([nl, 2, heads, 3], dk)),
                ctx.need[1].then(|| Tensor::scalar(ds)),
            ];
            grads.extend(dab.into_iter().enumerate().map(|(i, d)| ctx.need[2 + i].then(|| Tensor::vector(d))));
            grads
        },
    );
    let mut keys = Vec::with_capacity(nl);
    let mut values = Vec::with_capacity(nl);
    for li in 0..nl {
        keys.push(bank.gather_rows(&[li * 2]).reshape([heads, length, hd]));
        values.push(bank.gather_rows(&[li * 2 + 1]).reshape([heads, length, hd]));
    }
    Ok(PromptVars { injected_layers: injected_layers.to_vec(), keys, values })
}

/// Concrete prompt for `q` from `class`, gated by `s`.
pub fn generate_prompt(
    q: &[f64],
    class: &ClassState,
    s: f64,
    generator: &PromptGenerator,
    config: &PromptConfig,
) -> Result<PrefixPrompt> {
    if generator.injected_layers != config.injected_layers {
        return Err(contract("generator layers differ from the prompt config"));
    }
    let tape = Tape::new();
    let inputs = PromptInputs {
        kernels: tape.constant(generator.kernels.clone()),
        s: tape.constant(Tensor::scalar(s)),
        a_k: tape.constant(class.a_k.clone()),
        b_k: tape.constant(class.b_k.clone()),
        a_v: tape.constant(class.a_v.clone()),
        b_v: tape.constant(class.b_v.clone()),
    };
    Ok(generate_prompt_vars(q, &inputs, &config.injected_layers, generator.heads, config.length)?.to_prompt())
}

/// Generator plus class registry: everything prompt-related a learner owns.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub config: PromptConfig,
    pub generator: PromptGenerator,
    pub classes: BTreeMap<ClassId, ClassState>,
    pub dim: usize,
    pub seed: u64,
}

impl PromptState {
    pub fn new(config: PromptConfig, dim: usize, heads: usize, seed: u64) -> Result<Self> {
        if dim % heads != 0 {
            return Err(contract(format!("feature dim {dim} not divisible by {heads} heads")));
        }
        let generator = PromptGenerator::init(&config.injected_layers, heads, seed)?;
        Ok(Self { config, generator, classes: BTreeMap::new(), dim, seed })
    }

    pub fn register_class(&mut self, c: ClassId, task: usize) -> Result<&ClassState> {
        if self.classes.contains_key(&c) {
            return Err(contract(format!("class {c} is already registered")));
        }
        let state = ClassState::new(c, self.dim, self.config.length, task, self.seed)?;
        Ok(self.classes.entry(c).or_insert(state))
    }

    pub fn match_key(&self, q: &[f64]) -> Result<(ClassId, f64)> {
        let scope: Vec<ClassId> = self.classes.keys().copied().collect();
        match_key(q, &self.classes, &scope)
    }

    pub fn clamp_all(&mut self) {
        let (ea, eb) = (self.config.eps_a, self.config.eps_b);
        self.classes.values_mut().for_each(|c| clamp_class(c, ea, eb));
    }

    pub fn all_within_bounds(&self) -> bool {
        self.classes.values().all(|c| c.within_bounds(self.config.eps_a, self.config.eps_b))
    }

    /// Tensors under `{prefix}gen/{K|V}/layer{i}/head{h}` and
    /// `{prefix}class{c}/{key|aK|bK|aV|bV}`, stored as f64.
    pub fn write_named(&self, nt: &mut NamedTensors, prefix: &str) {
        let g = &self.generator;
        for (slot, layer) in g.injected_layers.iter().enumerate() {
            for (br, name) in BRANCHES.iter().enumerate() {
                for h in 0..g.heads {
                    nt.insert(
                        format!("{prefix}gen/{name}/layer{layer}/head{h}"),
                        DType::F64,
                        Tensor::vector(g.kernel(slot, br, h).to_vec()),
                    );
                }
            }
        }
        for (c, st) in &self.classes {
            for (field, t) in [("key", &st.key), ("aK", &st.a_k), ("bK", &st.b_k), ("aV", &st.a_v), ("bV", &st.b_v)] {
                nt.insert(format!("{prefix}class{c}/{field}"), DType::F64, t.clone());
            }
        }
    }

    /// Inverse of [`write_named`](Self::write_named) given the structural
    /// metadata (class ids, creation tasks, frozen flag) from the sidecar.
    pub fn read_named(
        &mut self,
        nt: &NamedTensors,
        prefix: &str,
        classes: &[(ClassId, usize)],
        frozen: bool,
    ) -> Result<()> {
        let heads = self.generator.heads;
        let mut data = Vec::with_capacity(self.generator.kernels.len());
        for layer in self.config.injected_layers.clone() {
            for name in BRANCHES {
                for h in 0..heads {
                    data.extend_from_slice(nt.expect(&format!("{prefix}gen/{name}/layer{layer}/head{h}"), &[3])?.data());
                }
            }
        }
        self.generator.kernels = Tensor::new(self.generator.kernels.shape().to_vec(), data);
        self.generator.frozen = frozen;
        self.classes.clear();
        let n = self.config.length - 1;
        for &(c, task) in classes {
            let get = |f: &str, len: usize| -> Result<Tensor> {
                Ok(nt.expect(&format!("{prefix}class{c}/{f}"), &[len])?.clone())
            };
            let st = ClassState {
                class_id: c,
                key: get("key", self.dim)?,
                a_k: get("aK", n)?,
                b_k: get("bK", n)?,
                a_v: get("aV", n)?,
                b_v: get("bV", n)?,
                created_task: task,
            };
            if !st.key.is_finite() {
                return Err(Error::Contract(format!("class {c} key is not finite")));
            }
            self.classes.insert(c, st);
        }
        Ok(())
    }
}
