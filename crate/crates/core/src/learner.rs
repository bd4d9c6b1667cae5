//! The online training loop: one optimizer step per stream chunk, the
//! generator freeze after the first task, the scaler/shifter clamp, and the
//! hard/soft learning-rate machine.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{encode_readouts, BackboneCheckpoint, PrefixPrompt, PromptVars};
use crate::container::{DType, NamedTensors};
use crate::data_stream::{ClassId, StreamChunk, TaskDescriptor};
use crate::error::{contract, load_error, Error, Result};
use crate::objectives::{
    gen_matrix, loss_gen, loss_inter, loss_intra, loss_ort, loss_ort_squared, loss_sim, loss_total, LossComponents,
    LossReport, LossWeights,
};
use crate::optim::{Adam, AdamConfig, AdamSlot};
use crate::prompt::{generate_prompt, generate_prompt_vars, MatchSource, PromptConfig, PromptInputs, PromptState};
use crate::tensor::Tensor;

const SNAPSHOT_PREFIX: &str = "learner/";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_generator: bool,
    pub use_scaler_shifter_keys: bool,
    pub use_sim_loss: bool,
    pub use_ort_loss: bool,
    pub use_hsu: bool,
    pub use_gen_matrix: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            use_generator: true,
            use_scaler_shifter_keys: true,
            use_sim_loss: true,
            use_ort_loss: true,
            use_hsu: true,
            use_gen_matrix: true,
        }
    }

    pub fn fine_tune() -> Self {
        Self {
            use_generator: false,
            use_scaler_shifter_keys: false,
            use_sim_loss: false,
            use_ort_loss: false,
            use_hsu: false,
            use_gen_matrix: false,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.use_scaler_shifter_keys && !self.use_generator {
            errs.push("scaler/shifter and keys require the generator".to_string());
        }
        if (self.use_sim_loss || self.use_ort_loss) && !self.use_scaler_shifter_keys {
            errs.push("similarity and orthogonality losses act on class keys".to_string());
        }
        if self.use_gen_matrix && !self.use_generator {
            errs.push("the generalisation matrix compares plain and prompted features".to_string());
        }
        errs
    }

    /// The cumulative rows of the component ablation, in order.
    pub fn ablation_rows() -> Vec<(&'static str, AblationFlags)> {
        let ft = Self::fine_tune();
        let g = Self { use_generator: true, ..ft };
        let sim = Self { use_scaler_shifter_keys: true, use_sim_loss: true, ..g };
        let ort = Self { use_ort_loss: true, ..sim };
        let hsu = Self { use_hsu: true, ..ort };
        let full = Self { use_gen_matrix: true, ..hsu };
        vec![
            ("FT", ft),
            ("FT+G", g),
            ("FT+G+SS+K(sim)", sim),
            ("FT+G+SS+K(sim+ort)", ort),
            ("FT+G+SS+K+HSU", hsu),
            ("FT+G+SS+K+HSU+M", full),
        ]
    }

    /// Accepts `full`, `ft`, or any row label of [`ablation_rows`](Self::ablation_rows),
    /// case-insensitively.
    pub fn parse(name: &str) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        match lower.as_str() {
            "full" | "prol" => return Ok(Self::full()),
            "ft" => return Ok(Self::fine_tune()),
            _ => {}
        }
        Self::ablation_rows()
            .into_iter()
            .find(|(n, _)| n.to_ascii_lowercase() == lower)
            .map(|(_, f)| f)
            .ok_or_else(|| Error::Config(vec![format!("unknown ablation `{name}`")]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HsuMode {
    Hard,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsuConfig {
    pub t_max: u32,
    pub min_lr: f64,
    pub loss_threshold: f64,
}

impl Default for HsuConfig {
    fn default() -> Self {
        Self { t_max: 20, min_lr: 0.005, loss_threshold: 0.8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsuState {
    pub mode: HsuMode,
    pub base_lr: f64,
    pub min_lr: f64,
    pub t_max: u32,
    pub soft_step: u32,
    pub loss_threshold: f64,
}

impl HsuState {
    /// A `min_lr` above `base_lr` is lowered to `base_lr` so the rate never
    /// leaves `[min_lr, base_lr]`.
    pub fn new(base_lr: f64, config: &HsuConfig) -> Self {
        Self {
            mode: HsuMode::Hard,
            base_lr,
            min_lr: config.min_lr.min(base_lr),
            t_max: config.t_max.max(1),
            soft_step: 0,
            loss_threshold: config.loss_threshold,
        }
    }

    pub fn cosine_lr(&self, soft_step: u32) -> f64 {
        let frac = soft_step as f64 / self.t_max as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Learning rate for the current step; `ce` is this step's
    /// `λ1·intra + λ2·inter`.
    pub fn step(&mut self, ce: f64, new_class_in_chunk: bool) -> (f64, HsuMode) {
        if new_class_in_chunk {
            self.mode = HsuMode::Hard;
            self.soft_step = 0;
        }
        match self.mode {
            HsuMode::Hard => {
                if ce < self.loss_threshold {
                    self.mode = HsuMode::Soft;
                }
                (self.base_lr, HsuMode::Hard)
            }
            HsuMode::Soft => {
                let lr = self.cosine_lr(self.soft_step);
                self.soft_step = (self.soft_step + 1).min(self.t_max);
                (lr, HsuMode::Soft)
            }
        }
    }
}

/// Free-function form of [`HsuState::step`].
pub fn hsu_step(hsu: &HsuState, ce: f64, new_class_in_chunk: bool) -> (f64, HsuState) {
    let mut next = *hsu;
    let (lr, _) = next.step(ce, new_class_in_chunk);
    (lr, next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub prompt: PromptConfig,
    pub weights: LossWeights,
    pub hsu: HsuConfig,
    pub lr: f64,
    pub adam: AdamConfig,
    pub flags: AblationFlags,
    /// Standardise feature columns before the cross-correlation matrix.
    pub standardize_gen: bool,
    /// Use squared dot products in the orthogonality loss.
    pub ort_squared: bool,
    pub seed: u64,
}

impl LearnerConfig {
    pub fn new(layers: usize) -> Self {
        Self {
            prompt: PromptConfig::for_layers(layers),
            weights: LossWeights::default(),
            hsu: HsuConfig::default(),
            lr: 0.01,
            adam: AdamConfig::default(),
            flags: AblationFlags::full(),
            standardize_gen: true,
            ort_squared: false,
            seed: 0,
        }
    }
}

/// One optimisation step as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub intra: f64,
    pub inter: f64,
    pub sim: f64,
    pub ort: f64,
    pub gen: f64,
    pub ce: f64,
    pub total: f64,
    pub lr: f64,
    pub mode: HsuMode,
    #[serde(skip)]
    pub task_id: usize,
    #[serde(skip)]
    pub new_class: bool,
}

impl StepRecord {
    fn new(step: u64, r: &LossReport, lr: f64, mode: HsuMode, task_id: usize, new_class: bool) -> Self {
        Self {
            step,
            intra: r.intra,
            inter: r.inter,
            sim: r.sim,
            ort: r.ort,
            gen: r.gen,
            ce: r.ce,
            total: r.total,
            lr,
            mode,
            task_id,
            new_class,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: usize,
    pub samples: usize,
    pub steps: usize,
    pub new_classes: Vec<ClassId>,
    pub train_seconds: f64,
    pub generator_digest_before: String,
    pub generator_digest_after: String,
    pub bound_violations: usize,
    pub final_loss: Option<f64>,
}

/// Everything trainable plus the bookkeeping needed to resume bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerState {
    pub config: LearnerConfig,
    pub prompt: PromptState,
    /// Head rows in registration order; logit column `j` is `order[j]`.
    pub order: Vec<ClassId>,
    pub head_w: BTreeMap<ClassId, Tensor>,
    pub head_b: BTreeMap<ClassId, f64>,
    pub adam: Adam,
    pub hsu: HsuState,
    /// Last fully trained task (0 before the first).
    pub task: usize,
    pub global_step: u64,
    visited: BTreeSet<usize>,
    pub revisits: usize,
    dim: usize,
    heads: usize,
}

impl LearnerState {
    pub fn new(config: LearnerConfig, backbone: &BackboneCheckpoint) -> Result<Self> {
        let errs: Vec<String> = config
            .flags
            .validate()
            .into_iter()
            .chain(config.prompt.validate(backbone.config.layers))
            .chain(config.weights.validate())
            .collect();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let (dim, heads) = (backbone.config.dim, backbone.config.heads);
        let prompt = PromptState::new(config.prompt.clone(), dim, heads, config.seed)?;
        Ok(Self {
            hsu: HsuState::new(config.lr, &config.hsu),
            adam: Adam::new(config.adam),
            prompt,
            order: Vec::new(),
            head_w: BTreeMap::new(),
            head_b: BTreeMap::new(),
            task: 0,
            global_step: 0,
            visited: BTreeSet::new(),
            revisits: 0,
            dim,
            heads,
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn registered(&self) -> &[ClassId] {
        &self.order
    }

    pub fn visited_count(&self) -> usize {
        self.visited.len()
    }

    /// Adds freshly initialised head rows; existing rows are untouched.
    pub fn register_head_classes(&mut self, ids: &[ClassId]) -> Result<()> {
        let mut fresh = BTreeSet::new();
        for &c in ids {
            if self.head_w.contains_key(&c) || !fresh.insert(c) {
                return Err(contract(format!("class {c} already has a head row")));
            }
        }
        for &c in ids {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5EED_0000 ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let std = 0.01;
            let w = (0..self.dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
            self.head_w.insert(c, Tensor::vector(w));
            self.head_b.insert(c, 0.0);
            self.order.push(c);
        }
        Ok(())
    }

    fn column_of(&self, c: ClassId) -> usize {
        self.order.iter().position(|&o| o == c).expect("registered class")
    }

    pub fn head_matrix(&self) -> (Tensor, Tensor) {
        let mut w = Vec::with_capacity(self.order.len() * self.dim);
        for c in &self.order {
            w.extend_from_slice(self.head_w[c].data());
        }
        let b = self.order.iter().map(|c| self.head_b[c]).collect();
        (Tensor::matrix(self.order.len(), self.dim, w), Tensor::vector(b))
    }

    /// Generator and class parameters with a zero-gradient identity
    /// stand-in when a component is ablated.
    fn neutral_inputs<'t>(&self, tape: &'t Tape) -> PromptInputs<'t> {
        let n = self.config.prompt.length - 1;
        PromptInputs {
            kernels: tape.constant(self.prompt.generator.kernels.clone()),
            s: tape.constant(Tensor::scalar(1.0)),
            a_k: tape.constant(Tensor::full([n], 1.0)),
            b_k: tape.constant(Tensor::zeros([n])),
            a_v: tape.constant(Tensor::full([n], 1.0)),
            b_v: tape.constant(Tensor::zeros([n])),
        }
    }

    /// The prefix used at inference: top-1 key match, then generation from
    /// the matched class. `None` when the generator is ablated.
    pub fn inference_prompt(&self, q: &[f64]) -> Result<Option<PrefixPrompt>> {
        let flags = self.config.flags;
        if !flags.use_generator {
            return Ok(None);
        }
        if flags.use_scaler_shifter_keys {
            let (c, s) = self.prompt.match_key(q)?;
            let st = &self.prompt.classes[&c];
            return generate_prompt(q, st, s, &self.prompt.generator, &self.config.prompt).map(Some);
        }
        let tape = Tape::new();
        let inputs = self.neutral_inputs(&tape);
        let vars = generate_prompt_vars(q, &inputs, &self.config.prompt.injected_layers, self.heads, self.config.prompt.length)?;
        Ok(Some(vars.to_prompt()))
    }

    /// `q` for key matching and prompt generation, plus `f_θ(x)`, as constants.
    pub fn query_features(&self, backbone: &BackboneCheckpoint, images: &[&Tensor]) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let theta = backbone.vars(&tape, false);
        let r = encode_readouts(&tape, &backbone.config, &theta, images, None, None)?;
        let feature = r.feature.value().as_ref().clone();
        let q = match self.config.prompt.match_source {
            MatchSource::ClassFeature => feature.clone(),
            MatchSource::ClassToken => r.class_token.value().as_ref().clone(),
            MatchSource::PatchEmbedding => r.patch_mean,
        };
        Ok((q, feature))
    }

    /// Trains on one task's chunks in order. `log` sees every step.
    pub fn train_task<I>(
        &mut self,
        backbone: &BackboneCheckpoint,
        task: &TaskDescriptor,
        chunks: I,
        log: &mut dyn FnMut(&StepRecord),
    ) -> Result<TaskReport>
    where
        I: IntoIterator<Item = Result<StreamChunk>>,
    {
        if task.task_id != self.task + 1 {
            return Err(contract(format!(
                "task {} arrived after task {}; tasks must be trained in order",
                task.task_id, self.task
            )));
        }
        if backbone.config.dim != self.dim || backbone.config.heads != self.heads {
            return Err(contract("backbone does not match the learner's feature layout"));
        }
        let start = Instant::now();
        if task.task_id > 1 {
            self.prompt.generator.frozen = true;
        }
        let mut report = TaskReport {
            task_id: task.task_id,
            generator_digest_before: self.prompt.generator.digest(),
            ..TaskReport::default()
        };
        for (i, chunk) in chunks.into_iter().enumerate() {
            let chunk = chunk?;
            if chunk.task_id != task.task_id {
                return Err(contract(format!("chunk {i} belongs to task {}", chunk.task_id)));
            }
            let (loss, new) = self
                .train_chunk(backbone, task, &chunk, log)
                .map_err(|e| match e {
                    Error::Diverged(m) => Error::Diverged(format!("task {} chunk {i}: {m}", task.task_id)),
                    other => other,
                })?;
            if !self.prompt.all_within_bounds() {
                report.bound_violations += 1;
            }
            report.new_classes.extend(new);
            report.samples += chunk.len();
            report.steps += 1;
            report.final_loss = Some(loss);
        }
        self.task = task.task_id;
        report.generator_digest_after = self.prompt.generator.digest();
        report.train_seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }

    /// One forward/backward/update over a chunk; returns the total loss and
    /// the classes registered by this chunk.
    pub fn train_chunk(
        &mut self,
        backbone: &BackboneCheckpoint,
        task: &TaskDescriptor,
        chunk: &StreamChunk,
        log: &mut dyn FnMut(&StepRecord),
    ) -> Result<(f64, Vec<ClassId>)> {
        if chunk.is_empty() {
            return Err(contract("empty chunk"));
        }
        for &idx in &chunk.indices {
            if !self.visited.insert(idx) {
                self.revisits += 1;
                return Err(Error::SeenOnce(format!("sample {idx} was already used for training")));
            }
        }
        let flags = self.config.flags;
        let t = task.task_id;

        let mut new_classes = Vec::new();
        for &y in &chunk.labels {
            if !task.classes.contains(&y) {
                return Err(contract(format!("label {y} is not a class of task {t}")));
            }
            if !self.head_w.contains_key(&y) && !new_classes.contains(&y) {
                new_classes.push(y);
            }
        }
        self.register_head_classes(&new_classes)?;
        if flags.use_scaler_shifter_keys {
            for &c in &new_classes {
                self.prompt.register_class(c, t)?;
            }
        }

        let images: Vec<&Tensor> = chunk.images.iter().collect();
        let batch = images.len();
        let (q, f_plain) = self.query_features(backbone, &images)?;

        let tape = Tape::new();
        let theta = backbone.vars(&tape, false);
        let train_gen = flags.use_generator && !self.prompt.generator.frozen;
        let kernels = if train_gen {
            tape.leaf(self.prompt.generator.kernels.clone())
        } else {
            tape.constant(self.prompt.generator.kernels.clone())
        };

        // One leaf per class appearing in the chunk, shared by its samples.
        struct ClassVars<'t> {
            key: Var<'t>,
            a_k: Var<'t>,
            b_k: Var<'t>,
            a_v: Var<'t>,
            b_v: Var<'t>,
        }
        let mut class_vars: BTreeMap<ClassId, ClassVars<'_>> = BTreeMap::new();
        if flags.use_scaler_shifter_keys {
            for &y in &chunk.labels {
                class_vars.entry(y).or_insert_with(|| {
                    let st = &self.prompt.classes[&y];
                    ClassVars {
                        key: tape.leaf(st.key.clone()),
                        a_k: tape.leaf(st.a_k.clone()),
                        b_k: tape.leaf(st.b_k.clone()),
                        a_v: tape.leaf(st.a_v.clone()),
                        b_v: tape.leaf(st.b_v.clone()),
                    }
                });
            }
        }

        let f_plain_var = tape.constant(f_plain.clone());
        let f_prompted = if flags.use_generator {
            let mut prompts: Vec<PromptVars<'_>> = Vec::with_capacity(batch);
            for (i, &y) in chunk.labels.iter().enumerate() {
                let qi = q.row(i);
                let inputs = if let Some(cv) = class_vars.get(&y) {
                    let s = crate::objectives::cosine(tape.constant(Tensor::vector(qi.to_vec())), cv.key);
                    PromptInputs { kernels, s, a_k: cv.a_k, b_k: cv.b_k, a_v: cv.a_v, b_v: cv.b_v }
                } else {
                    PromptInputs { kernels, ..self.neutral_inputs(&tape) }
                };
                prompts.push(generate_prompt_vars(
                    qi,
                    &inputs,
                    &self.config.prompt.injected_layers,
                    self.heads,
                    self.config.prompt.length,
                )?);
            }
            encode_readouts(&tape, &backbone.config, &theta, &images, Some(&prompts), None)?.feature
        } else {
            f_plain_var
        };

        let (w_tensor, b_tensor) = self.head_matrix();
        let w = tape.leaf(w_tensor);
        let b = tape.leaf(b_tensor);
        let logits = f_prompted.matmul_nt(w).add_row(b);

        let targets: Vec<usize> = chunk.labels.iter().map(|&y| self.column_of(y)).collect();
        let current: Vec<usize> = self
            .order
            .iter()
            .enumerate()
            .filter(|(_, c)| task.classes.contains(c))
            .map(|(j, _)| j)
            .collect();
        let seen: Vec<usize> = (0..self.order.len()).collect();
        let weights = self.config.weights;

        let intra = loss_intra(logits, &targets, &current)?;
        let inter = loss_inter(logits, &targets, &seen)?;
        let mut total = intra.scale(weights.intra).add(inter.scale(weights.inter));
        let mut comps = LossComponents { intra: intra.item(), inter: inter.item(), ..Default::default() };

        if flags.use_sim_loss && !class_vars.is_empty() {
            let mut acc: Option<Var<'_>> = None;
            for (i, &y) in chunk.labels.iter().enumerate() {
                let l = loss_sim(tape.constant(Tensor::vector(q.row(i).to_vec())), class_vars[&y].key);
                acc = Some(acc.map_or(l, |a| a.add(l)));
            }
            let sim = acc.expect("non-empty chunk").scale(1.0 / batch as f64);
            comps.sim = sim.item();
            total = total.add(sim.scale(weights.sim));
        }
        if flags.use_ort_loss && !class_vars.is_empty() {
            let old: Vec<ClassId> = self
                .prompt
                .classes
                .values()
                .filter(|c| c.created_task < t)
                .map(|c| c.class_id)
                .collect();
            let (new_keys, old_keys): (Vec<Var<'_>>, Vec<Var<'_>>) = if old.is_empty() {
                (Vec::new(), Vec::new())
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ self.global_step.wrapping_mul(0xD6E8_FEB8_6659_FD93));
                chunk
                    .labels
                    .iter()
                    .map(|y| {
                        let o = old[rng.gen_range(0..old.len())];
                        (class_vars[y].key, tape.constant(self.prompt.classes[&o].key.clone()))
                    })
                    .unzip()
            };
            let ort = if self.config.ort_squared {
                loss_ort_squared(&tape, &new_keys, &old_keys)?
            } else {
                loss_ort(&tape, &new_keys, &old_keys)?
            };
            comps.ort = ort.item();
            total = total.add(ort.scale(weights.ort));
        }
        if flags.use_gen_matrix && flags.use_generator && batch >= 2 {
            let m = gen_matrix(f_plain_var, f_prompted, self.config.standardize_gen)?;
            let gen = loss_gen(m)?;
            comps.gen = gen.item();
            total = total.add(gen.scale(weights.gen));
        }

        let report = loss_total(&comps, &weights);
        if !report.total.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at step {}", self.global_step)));
        }
        let (lr, mode) = if flags.use_hsu {
            self.hsu.step(report.ce, !new_classes.is_empty())
        } else {
            (self.config.lr, HsuMode::Hard)
        };

        let grads = tape.backward(total);
        if train_gen {
            if let Some(g) = grads.get(kernels) {
                self.adam.step("gen", &mut self.prompt.generator.kernels, g, lr);
            }
        }
        for (c, cv) in &class_vars {
            let st = self.prompt.classes.get_mut(c).expect("registered");
            for (name, var, param) in [
                ("key", cv.key, &mut st.key),
                ("aK", cv.a_k, &mut st.a_k),
                ("bK", cv.b_k, &mut st.b_k),
                ("aV", cv.a_v, &mut st.a_v),
                ("bV", cv.b_v, &mut st.b_v),
            ] {
                if let Some(g) = grads.get(var) {
                    self.adam.step(&format!("class{c}/{name}"), param, g, lr);
                }
            }
        }
        self.prompt.clamp_all();

        let gw = grads.get(w).expect("head weight gradient");
        let gb = grads.get(b).expect("head bias gradient");
        let d = self.dim;
        for (j, c) in self.order.clone().into_iter().enumerate() {
            let row = Tensor::vector(gw.data()[j * d..(j + 1) * d].to_vec());
            self.adam.step(&format!("head/w{c}"), self.head_w.get_mut(&c).expect("row"), &row, lr);
            let mut bias = Tensor::scalar(self.head_b[&c]);
            self.adam.step(&format!("head/b{c}"), &mut bias, &Tensor::scalar(gb.data()[j]), lr);
            self.head_b.insert(c, bias.item());
        }

        log(&StepRecord::new(self.global_step, &report, lr, mode, t, !new_classes.is_empty()));
        self.global_step += 1;
        Ok((report.total, new_classes))
    }

    /// Writes `{path}` (tensors) and `{path}.json` (structure and counters).
    pub fn snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut nt = NamedTensors::new();
        let p = SNAPSHOT_PREFIX;
        self.prompt.write_named(&mut nt, p);
        for c in &self.order {
            nt.insert(format!("{p}head/w{c}"), DType::F64, self.head_w[c].clone());
            nt.insert(format!("{p}head/b{c}"), DType::F64, Tensor::scalar(self.head_b[c]));
        }
        for (name, slot) in self.adam.slots() {
            nt.insert(format!("{p}adam/{name}/m"), DType::F64, slot.m.clone());
            nt.insert(format!("{p}adam/{name}/v"), DType::F64, slot.v.clone());
        }
        let h = &self.hsu;
        nt.insert(
            format!("{p}hsu/reals"),
            DType::F64,
            Tensor::vector(vec![h.base_lr, h.min_lr, h.loss_threshold]),
        );
        nt.save(path)?;
        let sidecar = Sidecar {
            version: SNAPSHOT_VERSION,
            config: self.config.clone(),
            dim: self.dim,
            heads: self.heads,
            task: self.task,
            global_step: self.global_step,
            order: self.order.clone(),
            classes: self.prompt.classes.values().map(|c| (c.class_id, c.created_task)).collect(),
            generator_frozen: self.prompt.generator.frozen,
            hsu_mode: h.mode,
            hsu_t_max: h.t_max,
            hsu_soft_step: h.soft_step,
            adam_steps: self.adam.slots().iter().map(|(k, s)| (k.clone(), s.step)).collect(),
            visited: self.visited.iter().copied().collect(),
            revisits: self.revisits,
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn restore(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| load_error(&side, e.to_string()))?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|e| load_error(&side, format!("malformed sidecar: {e}")))?;
        if sc.version != SNAPSHOT_VERSION {
            return Err(load_error(&side, format!("unsupported snapshot version {}", sc.version)));
        }
        let nt = NamedTensors::load(path)?;
        let p = SNAPSHOT_PREFIX;
        let wrap = |e: Error| load_error(path, e.to_string());

        let mut prompt = PromptState::new(sc.config.prompt.clone(), sc.dim, sc.heads, sc.config.seed).map_err(wrap)?;
        prompt.read_named(&nt, p, &sc.classes, sc.generator_frozen).map_err(wrap)?;

        let mut head_w = BTreeMap::new();
        let mut head_b = BTreeMap::new();
        for &c in &sc.order {
            head_w.insert(c, nt.expect(&format!("{p}head/w{c}"), &[sc.dim]).map_err(wrap)?.clone());
            head_b.insert(c, nt.expect(&format!("{p}head/b{c}"), &[1]).map_err(wrap)?.item());
        }
        let mut adam = Adam::new(sc.config.adam);
        for (name, step) in &sc.adam_steps {
            let m = nt.get(&format!("{p}adam/{name}/m")).ok_or_else(|| load_error(path, format!("missing moments for {name}")))?;
            let v = nt.expect(&format!("{p}adam/{name}/v"), m.shape()).map_err(wrap)?;
            adam.insert_slot(name.clone(), AdamSlot { m: m.clone(), v: v.clone(), step: *step });
        }
        let reals = nt.expect(&format!("{p}hsu/reals"), &[3]).map_err(wrap)?;
        let hsu = HsuState {
            mode: sc.hsu_mode,
            base_lr: reals.data()[0],
            min_lr: reals.data()[1],
            t_max: sc.hsu_t_max,
            soft_step: sc.hsu_soft_step,
            loss_threshold: reals.data()[2],
        };
        Ok(Self {
            config: sc.config,
            prompt,
            order: sc.order,
            head_w,
            head_b,
            adam,
            hsu,
            task: sc.task,
            global_step: sc.global_step,
            visited: sc.visited.into_iter().collect(),
            revisits: sc.revisits,
            dim: sc.dim,
            heads: sc.heads,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    config: LearnerConfig,
    dim: usize,
    heads: usize,
    task: usize,
    global_step: u64,
    order: Vec<ClassId>,
    classes: Vec<(ClassId, usize)>,
    generator_frozen: bool,
    hsu_mode: HsuMode,
    hsu_t_max: u32,
    hsu_soft_step: u32,
    adam_steps: Vec<(String, u64)>,
    visited: Vec<usize>,
    revisits: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data_stream::{make_synthetic, split_tasks, StreamSession, SyntheticSpec};

    fn tiny_backbone() -> BackboneCheckpoint {
        let cfg = BackboneConfig { layers: 2, heads: 2, dim: 8, patch_size: 2, image_side: 4, mlp_ratio: 2.0, channels: 3 };
        let mut ck = BackboneCheckpoint::init(&cfg, 1).unwrap();
        ck.frozen = true;
        ck
    }

    fn tiny_stream() -> crate::data_stream::LabeledDataset {
        make_synthetic(&SyntheticSpec { classes: 4, per_class: 6, image_side: 4, separation: 4.0, seed: 2 }).unwrap()
    }

    #[test]
    fn hsu_examples() {
        let cfg = HsuConfig { t_max: 20, min_lr: 0.005, loss_threshold: 0.8 };
        let mut h = HsuState::new(0.05, &cfg);
        assert_eq!(h.step(0.9, false), (0.05, HsuMode::Hard));
        assert_eq!(h.mode, HsuMode::Hard);
        assert_eq!(h.step(0.5, false), (0.05, HsuMode::Hard));
        assert_eq!(h.mode, HsuMode::Soft);
        assert_eq!(h.cosine_lr(20), 0.005);
        for _ in 0..25 {
            h.step(0.1, false);
        }
        assert_eq!(h.soft_step, 20);
        assert_eq!(h.step(0.1, false).0, 0.005);
        assert_eq!(h.step(0.1, true), (0.05, HsuMode::Hard));
        let (lr, next) = hsu_step(&h, 0.1, true);
        assert_eq!((lr, next.mode), (0.05, HsuMode::Soft));
    }

    #[test]
    fn min_lr_never_exceeds_base() {
        let h = HsuState::new(0.001, &HsuConfig::default());
        assert_eq!(h.min_lr, 0.001);
        assert_eq!(h.cosine_lr(7), 0.001);
    }

    #[test]
    fn flag_dependencies() {
        let bad = AblationFlags { use_generator: false, ..AblationFlags::full() };
        assert!(!bad.validate().is_empty());
        for (_, f) in AblationFlags::ablation_rows() {
            assert!(f.validate().is_empty());
        }
        assert_eq!(AblationFlags::parse("FT+G").unwrap().use_generator, true);
        assert!(AblationFlags::parse("nope").is_err());
    }

    #[test]
    fn head_widening_preserves_rows() {
        let bb = tiny_backbone();
        let mut st = LearnerState::new(LearnerConfig::new(2), &bb).unwrap();
        st.register_head_classes(&[0, 1, 2, 3]).unwrap();
        let before = st.head_w.clone();
        st.register_head_classes(&[7, 5]).unwrap();
        for (c, w) in &before {
            assert_eq!(&st.head_w[c], w);
        }
        assert!(st.register_head_classes(&[5]).is_err());
        assert_eq!(st.head_matrix().0.shape(), &[6, 8]);

        let mut other = LearnerState::new(LearnerConfig::new(2), &bb).unwrap();
        other.register_head_classes(&[7, 5]).unwrap();
        other.register_head_classes(&[0, 1, 2, 3]).unwrap();
        assert_eq!(other.head_w, st.head_w);
    }

    #[test]
    fn generator_freezes_after_first_task() {
        let bb = tiny_backbone();
        let ds = tiny_stream();
        let tasks = split_tasks(&ds, 2, 0).unwrap();
        let mut st = LearnerState::new(LearnerConfig::new(2), &bb).unwrap();
        let mut sess = StreamSession::new(ds.len());
        let r1 = st.train_task(&bb, &tasks.tasks[0], sess.stream_chunks(&ds, &tasks.tasks[0], 4, 0).unwrap(), &mut |_| {}).unwrap();
        assert_ne!(r1.generator_digest_before, r1.generator_digest_after);
        let frozen = st.prompt.generator.kernels.clone();
        let r2 = st.train_task(&bb, &tasks.tasks[1], sess.stream_chunks(&ds, &tasks.tasks[1], 4, 0).unwrap(), &mut |_| {}).unwrap();
        assert_eq!(r2.generator_digest_before, r2.generator_digest_after);
        assert_eq!(st.prompt.generator.kernels, frozen);
        assert!(st.prompt.generator.frozen);
        assert_eq!(r1.bound_violations + r2.bound_violations, 0);
        assert_eq!(st.visited_count(), ds.len());
    }

    #[test]
    fn out_of_order_task_is_rejected() {
        let bb = tiny_backbone();
        let ds = tiny_stream();
        let tasks = split_tasks(&ds, 2, 0).unwrap();
        let mut st = LearnerState::new(LearnerConfig::new(2), &bb).unwrap();
        let mut sess = StreamSession::new(ds.len());
        let chunks = sess.stream_chunks(&ds, &tasks.tasks[1], 4, 0).unwrap();
        assert!(st.train_task(&bb, &tasks.tasks[1], chunks, &mut |_| {}).is_err());
    }

    #[test]
    fn fine_tune_matches_a_standalone_cross_entropy() {
        let bb = tiny_backbone();
        let ds = tiny_stream();
        let tasks = split_tasks(&ds, 1, 0).unwrap();
        let mut cfg = LearnerConfig::new(2);
        cfg.flags = AblationFlags::fine_tune();
        let mut st = LearnerState::new(cfg, &bb).unwrap();
        let mut sess = StreamSession::new(ds.len());
        let chunk = sess.stream_chunks(&ds, &tasks.tasks[0], 5, 0).unwrap().next().unwrap().unwrap();

        let mut probe = st.clone();
        let mut ids = Vec::new();
        for &y in &chunk.labels {
            if !ids.contains(&y) {
                ids.push(y);
            }
        }
        probe.register_head_classes(&ids).unwrap();
        let images: Vec<&Tensor> = chunk.images.iter().collect();
        let feats = crate::backbone::forward_plain(&bb, &images).unwrap();
        let (w, b) = probe.head_matrix();
        let mut oracle = 0.0;
        for (i, &y) in chunk.labels.iter().enumerate() {
            let logits: Vec<f64> = (0..w.rows())
                .map(|j| feats.row(i).iter().zip(w.row(j)).map(|(x, y)| x * y).sum::<f64>() + b.data()[j])
                .collect();
            let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
            oracle += lse - logits[probe.column_of(y)];
        }
        oracle /= chunk.len() as f64;

        let mut seen = None;
        st.train_chunk(&bb, &tasks.tasks[0], &chunk, &mut |r| seen = Some(r.clone())).unwrap();
        let rec = seen.unwrap();
        assert!((rec.intra - oracle).abs() < 1e-12, "{} vs {oracle}", rec.intra);
        assert_eq!(rec.intra, rec.inter);
        assert_eq!((rec.sim, rec.ort, rec.gen), (0.0, 0.0, 0.0));
    }

    #[test]
    fn snapshot_round_trip_and_replay() {
        let bb = tiny_backbone();
        let ds = tiny_stream();
        let tasks = split_tasks(&ds, 1, 0).unwrap();
        let task = &tasks.tasks[0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("learner.ckpt");

        let mut sess = StreamSession::new(ds.len());
        let chunks: Vec<StreamChunk> = sess.stream_chunks(&ds, task, 6, 0).unwrap().map(|c| c.unwrap()).collect();
        let mut a = LearnerState::new(LearnerConfig::new(2), &bb).unwrap();
        a.train_chunk(&bb, task, &chunks[0], &mut |_| {}).unwrap();
        a.snapshot(&path).unwrap();
        let mut b = LearnerState::restore(&path).unwrap();
        assert_eq!(a, b);
        a.train_chunk(&bb, task, &chunks[1], &mut |_| {}).unwrap();
        b.train_chunk(&bb, task, &chunks[1], &mut |_| {}).unwrap();
        assert_eq!(a, b);

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(LearnerState::restore(&path), Err(Error::Load { .. })));
    }
}
