//! The frozen feature extractor: a small pre-norm vision transformer whose
//! attention accepts per-sample prefix keys and values.
//!
//! Prefixes are prepended to the keys and values of an injected layer only;
//! queries, the residual stream and positional embeddings are untouched, so
//! every layer still emits one row per image token.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{stack, Tape, Var};
use crate::container::{DType, NamedTensors};
use crate::data_stream::{ClassId, LabeledDataset};
use crate::error::{contract, Error, Result};
use crate::objectives::masked_cross_entropy;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub mlp_ratio: f64,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_channels() -> usize {
    3
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { layers: 4, heads: 4, dim: 64, patch_size: 4, image_side: 16, mlp_ratio: 2.0, channels: 3 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.layers == 0 {
            errs.push("layer count must be >= 1".to_string());
        }
        if self.heads == 0 {
            errs.push("head count must be >= 1".to_string());
        } else if self.dim % self.heads != 0 {
            errs.push(format!(
                "embedding size {} is not divisible by head count {}",
                self.dim, self.heads
            ));
        }
        if self.dim == 0 {
            errs.push("embedding size must be positive".to_string());
        }
        if self.patch_size == 0 || self.image_side % self.patch_size.max(1) != 0 {
            errs.push(format!(
                "image side {} must be a positive multiple of patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            errs.push("mlp_ratio must be positive".to_string());
        }
        if self.channels == 0 {
            errs.push("channels must be positive".to_string());
        }
        errs
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patches(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_side, self.image_side, self.channels]
    }

    /// Expected shape of every named parameter.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, hid) = (self.dim, self.mlp_hidden());
        let mut s = BTreeMap::new();
        s.insert("patch_embed.weight".into(), vec![self.patch_dim(), d]);
        s.insert("patch_embed.bias".into(), vec![d]);
        s.insert("cls_token".into(), vec![1, d]);
        s.insert("pos_embed".into(), vec![self.tokens(), d]);
        for i in 0..self.layers {
            let p = |n: &str| format!("blocks.{i}.{n}");
            s.insert(p("norm1.weight"), vec![d]);
            s.insert(p("norm1.bias"), vec![d]);
            s.insert(p("attn.qkv.weight"), vec![d, 3 * d]);
            s.insert(p("attn.qkv.bias"), vec![3 * d]);
            s.insert(p("attn.proj.weight"), vec![d, d]);
            s.insert(p("attn.proj.bias"), vec![d]);
            s.insert(p("norm2.weight"), vec![d]);
            s.insert(p("norm2.bias"), vec![d]);
            s.insert(p("mlp.fc1.weight"), vec![d, hid]);
            s.insert(p("mlp.fc1.bias"), vec![hid]);
            s.insert(p("mlp.fc2.weight"), vec![hid, d]);
            s.insert(p("mlp.fc2.bias"), vec![d]);
        }
        s.insert("norm.weight".into(), vec![d]);
        s.insert("norm.bias".into(), vec![d]);
        s
    }
}

/// Per-sample prefix for the prompted forward. `keys[k]` and `values[k]`
/// belong to `injected_layers[k]` and are shaped `[heads, length, head_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixPrompt {
    pub injected_layers: Vec<usize>,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl PrefixPrompt {
    pub fn empty() -> Self {
        Self { injected_layers: Vec::new(), keys: Vec::new(), values: Vec::new() }
    }

    pub fn length(&self) -> usize {
        self.keys.first().map(|k| k.shape()[1]).unwrap_or(0)
    }

    pub fn to_vars<'t>(&self, tape: &'t Tape) -> PromptVars<'t> {
        PromptVars {
            injected_layers: self.injected_layers.clone(),
            keys: self.keys.iter().map(|t| tape.constant(t.clone())).collect(),
            values: self.values.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// [`PrefixPrompt`] living on a tape.
#[derive(Clone, Debug)]
pub struct PromptVars<'t> {
    pub injected_layers: Vec<usize>,
    pub keys: Vec<Var<'t>>,
    pub values: Vec<Var<'t>>,
}

impl<'t> PromptVars<'t> {
    pub fn to_prompt(&self) -> PrefixPrompt {
        PrefixPrompt {
            injected_layers: self.injected_layers.clone(),
            keys: self.keys.iter().map(|v| v.value().as_ref().clone()).collect(),
            values: self.values.iter().map(|v| v.value().as_ref().clone()).collect(),
        }
    }
}

/// Softmax weights of one layer, `[batch, heads, rows, cols]` flattened,
/// where `cols = prefix length + rows`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub batch: usize,
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    pub probs: Vec<f64>,
}

impl AttentionMap {
    pub fn prob(&self, b: usize, h: usize, i: usize, j: usize) -> f64 {
        self.probs[((b * self.heads + h) * self.rows + i) * self.cols + j]
    }
}

#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub layers: Vec<AttentionMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneCheckpoint {
    pub config: BackboneConfig,
    pub base_class_count: usize,
    pub frozen: bool,
    params: BTreeMap<String, Tensor>,
}

impl BackboneCheckpoint {
    /// Random initialisation, rounded to `f32` so checkpoints round-trip exactly.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name.contains("norm") {
                vec![1.0; n]
            } else if name == "cls_token" || name == "pos_embed" {
                (0..n).map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal)).collect()
            } else {
                let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
            };
            params.insert(name, Tensor::new(shape, data));
        }
        let mut ckpt = Self { config: config.clone(), base_class_count: 0, frozen: false, params };
        ckpt.round_to_f32();
        Ok(ckpt)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    fn round_to_f32(&mut self) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    pub fn digest(&self) -> String {
        digest_tensors(self.params.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Puts θ on `tape`, as leaves when `trainable`, otherwise as constants.
    pub fn vars<'t>(&self, tape: &'t Tape, trainable: bool) -> BackboneVars<'t> {
        let map = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        BackboneVars { map }
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut nt = NamedTensors::new();
        for (k, v) in &self.params {
            nt.insert(format!("backbone/{k}"), DType::F32, v.clone());
        }
        let c = &self.config;
        nt.insert(
            "meta/config",
            DType::F32,
            Tensor::vector(vec![
                c.layers as f64,
                c.heads as f64,
                c.dim as f64,
                c.patch_size as f64,
                c.image_side as f64,
                c.mlp_ratio,
                c.channels as f64,
            ]),
        );
        nt.insert("meta/base_class_count", DType::F32, Tensor::scalar(self.base_class_count as f64));
        nt.insert("meta/frozen", DType::F32, Tensor::scalar(f64::from(u8::from(self.frozen))));
        nt
    }

    pub fn from_named(nt: &NamedTensors, declared: Option<&BackboneConfig>) -> Result<Self> {
        let meta = nt.expect("meta/config", &[7])?.data().to_vec();
        let stored = BackboneConfig {
            layers: meta[0] as usize,
            heads: meta[1] as usize,
            dim: meta[2] as usize,
            patch_size: meta[3] as usize,
            image_side: meta[4] as usize,
            mlp_ratio: meta[5],
            channels: meta[6] as usize,
        };
        let config = declared.cloned().unwrap_or(stored);
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = nt.expect(&format!("backbone/{name}"), &shape)?;
            params.insert(name, t.clone());
        }
        let base_class_count = nt.expect("meta/base_class_count", &[1])?.item() as usize;
        let frozen = nt.expect("meta/frozen", &[1])?.item() != 0.0;
        let ckpt = Self { config, base_class_count, frozen, params };
        if !ckpt.is_finite() {
            return Err(contract("checkpoint holds non-finite parameters"));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &BackboneCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.to_named().save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BackboneCheckpoint> {
    BackboneCheckpoint::from_named(&NamedTensors::load(path)?, None)
}

/// Loads a checkpoint and checks every tensor against `config`'s shapes.
pub fn load_checkpoint_as(path: impl AsRef<Path>, config: &BackboneConfig) -> Result<BackboneCheckpoint> {
    BackboneCheckpoint::from_named(&NamedTensors::load(path)?, Some(config))
}

pub(crate) fn digest_tensors<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub struct BackboneVars<'t> {
    map: BTreeMap<String, Var<'t>>,
}

impl<'t> BackboneVars<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        self.map[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn check_images(config: &BackboneConfig, images: &[&Tensor]) -> Result<()> {
    if images.is_empty() {
        return Err(contract("empty image batch"));
    }
    let want = config.image_shape();
    for (i, img) in images.iter().enumerate() {
        if img.shape() != want {
            return Err(contract(format!(
                "image {i} has shape {:?}, backbone expects {want:?}",
                img.shape()
            )));
        }
    }
    Ok(())
}

/// `[B * patches, patch_dim]`, patches row-major, features ordered (dy, dx, c).
fn patchify(config: &BackboneConfig, images: &[&Tensor]) -> Tensor {
    let (p, side, ch) = (config.patch_size, config.image_side, config.channels);
    let per_side = side / p;
    let mut out = Vec::with_capacity(images.len() * config.patches() * config.patch_dim());
    for img in images {
        let d = img.data();
        for py in 0..per_side {
            for px in 0..per_side {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (py * p + dy, px * p + dx);
                        let base = (y * side + x) * ch;
                        out.extend_from_slice(&d[base..base + ch]);
                    }
                }
            }
        }
    }
    Tensor::matrix(images.len() * config.patches(), config.patch_dim(), out)
}

/// Builds `[cls; patch embeddings] + pos` for every sample: `[B * tokens, D]`.
fn assemble_tokens<'t>(emb: Var<'t>, cls: Var<'t>, pos: Var<'t>, batch: usize) -> Var<'t> {
    let (e, c, p) = (emb.value(), cls.value(), pos.value());
    let d = c.len();
    let n = p.rows();
    let np = n - 1;
    let mut out = vec![0.0; batch * n * d];
    for b in 0..batch {
        for t in 0..n {
            let dst = &mut out[(b * n + t) * d..(b * n + t + 1) * d];
            let src = if t == 0 { c.data() } else { e.row(b * np + t - 1) };
            for ((o, s), q) in dst.iter_mut().zip(src).zip(p.row(t)) {
                *o = s + q;
            }
        }
    }
    emb.tape().op(Tensor::matrix(batch * n, d, out), &[emb, cls, pos], move |c| {
        let g = c.grad;
        let mut de = vec![0.0; batch * np * d];
        let mut dc = vec![0.0; d];
        let mut dp = vec![0.0; n * d];
        for b in 0..batch {
            for t in 0..n {
                let row = g.row(b * n + t);
                for (k, &v) in row.iter().enumerate() {
                    dp[t * d + k] += v;
                }
                if t == 0 {
                    for (k, &v) in row.iter().enumerate() {
                        dc[k] += v;
                    }
                } else {
                    de[(b * np + t - 1) * d..(b * np + t) * d].copy_from_slice(row);
                }
            }
        }
        vec![
            c.need[0].then(|| Tensor::matrix(batch * np, d, de)),
            c.need[1].then(|| Tensor::matrix(1, d, dc)),
            c.need[2].then(|| Tensor::matrix(n, d, dp)),
        ]
    })
}

/// Multi-head attention over `[B * n, D]` projections with optional
/// per-sample prefixes `[B, H, l, head_dim]` prepended to keys and values.
#[allow(clippy::too_many_arguments)]
pub(crate) fn prefix_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    prefix: Option<(Var<'t>, Var<'t>)>,
    batch: usize,
    tokens: usize,
    heads: usize,
    layer: usize,
    trace: Option<&mut AttentionTrace>,
) -> Var<'t> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let d = qv.cols();
    let hd = d / heads;
    let n = tokens;
    let (pk, pv, l) = match prefix {
        Some((pk, pv)) => {
            let (a, b) = (pk.value(), pv.value());
            let l = a.shape()[2];
            (Some(a), Some(b), l)
        }
        None => (None, None, 0),
    };
    let m = l + n;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut out = vec![0.0; batch * n * d];
    let mut probs = vec![0.0; batch * heads * n * m];
    let mut kbuf = vec![0.0; m * hd];
    let mut vbuf = vec![0.0; m * hd];
    for b in 0..batch {
        for h in 0..heads {
            gather_kv(&mut kbuf, &mut vbuf, pk.as_deref(), pv.as_deref(), &kv, &vv, b, h, l, n, hd);
            let pslab = &mut probs[(b * heads + h) * n * m..(b * heads + h + 1) * n * m];
            for i in 0..n {
                let qrow = &qv.row(b * n + i)[h * hd..(h + 1) * hd];
                let prow = &mut pslab[i * m..(i + 1) * m];
                let mut max = f64::NEG_INFINITY;
                for j in 0..m {
                    let s = scale * dot(qrow, &kbuf[j * hd..(j + 1) * hd]);
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for p in prow.iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                for p in prow.iter_mut() {
                    *p /= z;
                }
                let orow = &mut out[(b * n + i) * d + h * hd..(b * n + i) * d + (h + 1) * hd];
                for j in 0..m {
                    let w = prow[j];
                    for (o, &x) in orow.iter_mut().zip(&vbuf[j * hd..(j + 1) * hd]) {
                        *o += w * x;
                    }
                }
            }
        }
    }
    if let Some(trace) = trace {
        trace.layers.push(AttentionMap { layer, batch, heads, rows: n, cols: m, probs: probs.clone() });
    }

    let mut inputs = vec![q, k, v];
    if let Some((pk, pv)) = prefix {
        inputs.push(pk);
        inputs.push(pv);
    }
    q.tape().op(Tensor::matrix(batch * n, d, out), &inputs, move |c| {
        let (qv, kv, vv) = (c.inputs[0], c.inputs[1], c.inputs[2]);
        let (pk, pv) = if l > 0 { (Some(c.inputs[3]), Some(c.inputs[4])) } else { (None, None) };
        let g = c.grad;
        let mut dq = vec![0.0; batch * n * d];
        let mut dk = vec![0.0; batch * n * d];
        let mut dv = vec![0.0; batch * n * d];
        let mut dpk = vec![0.0; batch * heads * l * hd];
        let mut dpv = vec![0.0; batch * heads * l * hd];
        let mut kbuf = vec![0.0; m * hd];
        let mut vbuf = vec![0.0; m * hd];
        let mut dkbuf = vec![0.0; m * hd];
        let mut dvbuf = vec![0.0; m * hd];
        let mut ds = vec![0.0; m];
        for b in 0..batch {
            for h in 0..heads {
                gather_kv(&mut kbuf, &mut vbuf, pk, pv, kv, vv, b, h, l, n, hd);
                dkbuf.iter_mut().for_each(|x| *x = 0.0);
                dvbuf.iter_mut().for_each(|x| *x = 0.0);
                let pslab = &probs[(b * heads + h) * n * m..(b * heads + h + 1) * n * m];
                for i in 0..n {
                    let prow = &pslab[i * m..(i + 1) * m];
                    let go = &g.row(b * n + i)[h * hd..(h + 1) * hd];
                    let mut acc = 0.0;
                    for j in 0..m {
                        let dp = dot(go, &vbuf[j * hd..(j + 1) * hd]);
                        ds[j] = dp;
                        acc += prow[j] * dp;
                        for (dvj, &gv) in dvbuf[j * hd..(j + 1) * hd].iter_mut().zip(go) {
                            *dvj += prow[j] * gv;
                        }
                    }
                    let qrow = &qv.row(b * n + i)[h * hd..(h + 1) * hd];
                    let dqrow = &mut dq[(b * n + i) * d + h * hd..(b * n + i) * d + (h + 1) * hd];
                    for j in 0..m {
                        let s = prow[j] * (ds[j] - acc) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        for (t, dqv) in dqrow.iter_mut().enumerate() {
                            *dqv += s * kbuf[j * hd + t];
                        }
                        for (dkj, &qx) in dkbuf[j * hd..(j + 1) * hd].iter_mut().zip(qrow) {
                            *dkj += s * qx;
                        }
                    }
                }
                for j in 0..m {
                    let (srck, srcv) = (&dkbuf[j * hd..(j + 1) * hd], &dvbuf[j * hd..(j + 1) * hd]);
                    if j < l {
                        let off = ((b * heads + h) * l + j) * hd;
                        dpk[off..off + hd].copy_from_slice(srck);
                        dpv[off..off + hd].copy_from_slice(srcv);
                    } else {
                        let off = (b * n + j - l) * d + h * hd;
                        dk[off..off + hd].copy_from_slice(srck);
                        dv[off..off + hd].copy_from_slice(srcv);
                    }
                }
            }
        }
        let mut grads = vec![
            c.need[0].then(|| Tensor::matrix(batch * n, d, dq)),
            c.need[1].then(|| Tensor::matrix(batch * n, d, dk)),
            c.need[2].then(|| Tensor::matrix(batch * n, d, dv)),
        ];
        if l > 0 {
            grads.push(c.need[3].then(|| Tensor::new([batch, heads, l, hd], dpk)));
            grads.push(c.need[4].then(|| Tensor::new([batch, heads, l, hd], dpv)));
        }
        grads
    })
}

#[allow(clippy::too_many_arguments)]
fn gather_kv(
    kbuf: &mut [f64],
    vbuf: &mut [f64],
    pk: Option<&Tensor>,
    pv: Option<&Tensor>,
    k: &Tensor,
    v: &Tensor,
    b: usize,
    h: usize,
    l: usize,
    n: usize,
    hd: usize,
) {
    let heads = k.cols() / hd;
    if let (Some(pk), Some(pv)) = (pk, pv) {
        let off = (b * heads + h) * l * hd;
        kbuf[..l * hd].copy_from_slice(&pk.data()[off..off + l * hd]);
        vbuf[..l * hd].copy_from_slice(&pv.data()[off..off + l * hd]);
    }
    for j in 0..n {
        let src = b * n + j;
        kbuf[(l + j) * hd..(l + j + 1) * hd].copy_from_slice(&k.row(src)[h * hd..(h + 1) * hd]);
        vbuf[(l + j) * hd..(l + j + 1) * hd].copy_from_slice(&v.row(src)[h * hd..(h + 1) * hd]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_prompts(config: &BackboneConfig, prompts: &[PromptVars<'_>], batch: usize) -> Result<()> {
    if prompts.len() != batch {
        return Err(contract(format!("{} prompts for a batch of {batch}", prompts.len())));
    }
    let first = &prompts[0];
    let mut prev: Option<usize> = None;
    for &layer in &first.injected_layers {
        if layer >= config.layers {
            return Err(contract(format!(
                "prompt targets layer {layer} but the backbone has {} layers",
                config.layers
            )));
        }
        if prev.is_some_and(|p| layer <= p) {
            return Err(contract("injected layers must be strictly increasing"));
        }
        prev = Some(layer);
    }
    let want_tail = [config.heads, config.head_dim()];
    let mut length = None;
    for p in prompts {
        if p.injected_layers != first.injected_layers
            || p.keys.len() != p.injected_layers.len()
            || p.values.len() != p.injected_layers.len()
        {
            return Err(contract("prompts in a batch must target the same layers"));
        }
        for t in p.keys.iter().chain(&p.values) {
            let s = t.shape();
            if s.len() != 3 || s[0] != want_tail[0] || s[2] != want_tail[1] || s[1] == 0 {
                return Err(contract(format!(
                    "prompt tensor shape {s:?}, expected [{}, l, {}] with l >= 1",
                    want_tail[0], want_tail[1]
                )));
            }
            if *length.get_or_insert(s[1]) != s[1] {
                return Err(contract("prompt length differs within the batch"));
            }
        }
    }
    Ok(())
}

/// Class-token features `[B, D]` after the final norm. With `prompts`, each
/// sample's prefix is injected at its listed layers.
pub fn encode<'t>(
    tape: &'t Tape,
    config: &BackboneConfig,
    theta: &BackboneVars<'t>,
    images: &[&Tensor],
    prompts: Option<&[PromptVars<'t>]>,
    trace: Option<&mut AttentionTrace>,
) -> Result<Var<'t>> {
    Ok(encode_readouts(tape, config, theta, images, prompts, trace)?.feature)
}

/// Every read-out one forward pass offers.
pub struct Readouts<'t> {
    /// Class token after the final norm, `[B, D]`.
    pub feature: Var<'t>,
    /// Class token before the final norm, `[B, D]`.
    pub class_token: Var<'t>,
    /// Mean patch embedding per image, `[B, D]`.
    pub patch_mean: Tensor,
}

pub fn encode_readouts<'t>(
    tape: &'t Tape,
    config: &BackboneConfig,
    theta: &BackboneVars<'t>,
    images: &[&Tensor],
    prompts: Option<&[PromptVars<'t>]>,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Readouts<'t>> {
    check_images(config, images)?;
    let batch = images.len();
    if let Some(p) = prompts {
        check_prompts(config, p, batch)?;
    }
    let n = config.tokens();
    let d = config.dim;

    let patches = tape.constant(patchify(config, images));
    let emb = patches.matmul(theta.get("patch_embed.weight")).add_row(theta.get("patch_embed.bias"));
    let patch_mean = {
        let e = emb.value();
        let np = config.patches();
        let mut m = vec![0.0; batch * d];
        for b in 0..batch {
            for t in 0..np {
                for (o, v) in m[b * d..(b + 1) * d].iter_mut().zip(e.row(b * np + t)) {
                    *o += v / np as f64;
                }
            }
        }
        Tensor::matrix(batch, d, m)
    };
    let mut x = assemble_tokens(emb, theta.get("cls_token"), theta.get("pos_embed"), batch);

    for layer in 0..config.layers {
        let p = |s: &str| theta.get(&format!("blocks.{layer}.{s}"));
        let h = x.layer_norm(p("norm1.weight"), p("norm1.bias"), LN_EPS);
        let qkv = h.matmul(p("attn.qkv.weight")).add_row(p("attn.qkv.bias"));
        let (q, k, v) = (qkv.slice_cols(0, d), qkv.slice_cols(d, 2 * d), qkv.slice_cols(2 * d, 3 * d));

        let prefix = prompts.and_then(|ps| {
            let slot = ps[0].injected_layers.iter().position(|&l| l == layer)?;
            let keys: Vec<Var<'t>> = ps.iter().map(|p| p.keys[slot]).collect();
            let values: Vec<Var<'t>> = ps.iter().map(|p| p.values[slot]).collect();
            Some((stack(&keys), stack(&values)))
        });
        let attn = prefix_attention(q, k, v, prefix, batch, n, config.heads, layer, trace.as_deref_mut());
        x = x.add(attn.matmul(p("attn.proj.weight")).add_row(p("attn.proj.bias")));

        let h = x.layer_norm(p("norm2.weight"), p("norm2.bias"), LN_EPS);
        let mlp = h
            .matmul(p("mlp.fc1.weight"))
            .add_row(p("mlp.fc1.bias"))
            .gelu()
            .matmul(p("mlp.fc2.weight"))
            .add_row(p("mlp.fc2.bias"));
        x = x.add(mlp);
    }
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * n).collect();
    let class_token = x.gather_rows(&cls_rows);
    let feature = class_token.layer_norm(theta.get("norm.weight"), theta.get("norm.bias"), LN_EPS);
    Ok(Readouts { feature, class_token, patch_mean })
}

/// `f_θ(x)`: `[B, D]` class-token features; θ is never mutated.
pub fn forward_plain(ckpt: &BackboneCheckpoint, images: &[&Tensor]) -> Result<Tensor> {
    let tape = Tape::new();
    let theta = ckpt.vars(&tape, false);
    Ok(encode(&tape, &ckpt.config, &theta, images, None, None)?.value().as_ref().clone())
}

/// `f_{θ;P}(x)` with one prefix per image.
pub fn forward_prompted(
    ckpt: &BackboneCheckpoint,
    images: &[&Tensor],
    prompts: &[PrefixPrompt],
) -> Result<Tensor> {
    forward_prompted_traced(ckpt, images, prompts, None)
}

pub fn forward_prompted_traced(
    ckpt: &BackboneCheckpoint,
    images: &[&Tensor],
    prompts: &[PrefixPrompt],
    trace: Option<&mut AttentionTrace>,
) -> Result<Tensor> {
    let tape = Tape::new();
    let theta = ckpt.vars(&tape, false);
    let pv: Vec<PromptVars<'_>> = prompts.iter().map(|p| p.to_vars(&tape)).collect();
    let out = encode(&tape, &ckpt.config, &theta, images, Some(&pv), trace)?;
    Ok(out.value().as_ref().clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global ids of the base classes, aligned with the dataset's labels.
    #[serde(default)]
    pub base_class_ids: Vec<ClassId>,
    /// Global ids that later continual tasks will use; must not overlap.
    #[serde(default)]
    pub reserved_class_ids: Vec<ClassId>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            base_class_ids: Vec::new(),
            reserved_class_ids: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Supervised training of the backbone plus a temporary linear head on the
/// base classes. The head is discarded and the result is marked frozen.
pub fn pretrain_base(
    config: &BackboneConfig,
    base: &LabeledDataset,
    opts: &PretrainOptions,
) -> Result<(BackboneCheckpoint, PretrainReport)> {
    if let Some(c) = opts.base_class_ids.iter().find(|c| opts.reserved_class_ids.contains(c)) {
        return Err(contract(format!("base class {c} is reserved for continual tasks")));
    }
    if base.is_empty() {
        return Err(contract("empty base dataset"));
    }
    if opts.batch_size == 0 {
        return Err(contract("batch_size must be positive"));
    }
    let mut ckpt = BackboneCheckpoint::init(config, opts.seed)?;
    ckpt.base_class_count = base.class_count();
    let classes = base.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let head_std = (1.0 / config.dim as f64).sqrt();
    let mut head_w = Tensor::new(
        [classes, config.dim],
        (0..classes * config.dim).map(|_| head_std * rng.sample::<f64, _>(StandardNormal)).collect(),
    );
    let mut head_b = Tensor::zeros([classes]);
    let mut adam = Adam::new(AdamConfig::default());
    let all: Vec<bool> = vec![true; classes];

    let mut order: Vec<usize> = (0..base.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(opts.batch_size).enumerate() {
            let tape = Tape::new();
            let theta = ckpt.vars(&tape, true);
            let images: Vec<&Tensor> = batch.iter().map(|&i| &base.samples()[i].image).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| base.samples()[i].label).collect();
            let feats = encode(&tape, config, &theta, &images, None, None)?;
            let w = tape.leaf(head_w.clone());
            let b = tape.leaf(head_b.clone());
            let logits = feats.matmul_nt(w).add_row(b);
            let loss = masked_cross_entropy(logits, &labels, &all)?;
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("pretraining loss {lv} at epoch {epoch} step {step}")));
            }
            total += lv * batch.len() as f64;
            let grads = tape.backward(loss);
            for (name, var) in theta.iter() {
                if let Some(g) = grads.get(var) {
                    let p = ckpt.params.get_mut(name).expect("known parameter");
                    adam.step(name, p, g, opts.lr);
                }
            }
            adam.step("head.weight", &mut head_w, grads.get(w).expect("head grad"), opts.lr);
            adam.step("head.bias", &mut head_b, grads.get(b).expect("head grad"), opts.lr);
        }
        epoch_losses.push(total / base.len() as f64);
    }

    ckpt.round_to_f32();
    ckpt.frozen = true;
    if !ckpt.is_finite() {
        return Err(Error::Diverged("non-finite backbone parameters after pretraining".into()));
    }

    let mut correct = 0;
    for batch in (0..base.len()).collect::<Vec<_>>().chunks(32) {
        let images: Vec<&Tensor> = batch.iter().map(|&i| &base.samples()[i].image).collect();
        let feats = forward_plain(&ckpt, &images)?;
        let logits = feats.matmul_nt(&head_w);
        for (r, &i) in batch.iter().enumerate() {
            let row: Vec<f64> = logits.row(r).iter().zip(head_b.data()).map(|(a, b)| a + b).collect();
            if argmax(&row) == base.samples()[i].label {
                correct += 1;
            }
        }
    }
    let report = PretrainReport { epoch_losses, train_accuracy: correct as f64 / base.len() as f64 };
    Ok((ckpt, report))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig { layers: 2, heads: 2, dim: 8, patch_size: 2, image_side: 4, mlp_ratio: 2.0, channels: 3 }
    }

    fn image(seed: u64, cfg: &BackboneConfig) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = cfg.image_shape();
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    fn prompt(cfg: &BackboneConfig, layers: Vec<usize>, l: usize, seed: u64) -> PrefixPrompt {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || {
            Tensor::new(
                [cfg.heads, l, cfg.head_dim()],
                (0..cfg.heads * l * cfg.head_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
        };
        let keys = layers.iter().map(|_| t()).collect();
        let values = layers.iter().map(|_| t()).collect();
        PrefixPrompt { injected_layers: layers, keys, values }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        assert!(c.validate().is_empty());
        c.dim = 65;
        c.heads = 4;
        assert!(c.validate().iter().any(|e| e.contains("divisible")));
    }

    #[test]
    fn plain_forward_is_deterministic_and_batch_independent() {
        let cfg = tiny();
        let ckpt = BackboneCheckpoint::init(&cfg, 1).unwrap();
        let zero = Tensor::zeros(cfg.image_shape());
        let a = forward_plain(&ckpt, &[&zero]).unwrap();
        let b = forward_plain(&ckpt, &[&zero]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 8]);
        assert!(a.is_finite());

        let x = image(3, &cfg);
        let pair = forward_plain(&ckpt, &[&x, &x]).unwrap();
        assert_eq!(pair.row(0), pair.row(1));
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let cfg = tiny();
        let ckpt = BackboneCheckpoint::init(&cfg, 2).unwrap();
        let imgs: Vec<Tensor> = (0..4).map(|s| image(s, &cfg)).collect();
        let perm = [2usize, 0, 3, 1];
        let fwd = forward_plain(&ckpt, &imgs.iter().collect::<Vec<_>>()).unwrap();
        let permuted: Vec<&Tensor> = perm.iter().map(|&i| &imgs[i]).collect();
        let out = forward_plain(&ckpt, &permuted).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for (a, b) in out.row(r).iter().zip(fwd.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_injection_matches_plain_bitwise() {
        let cfg = tiny();
        let ckpt = BackboneCheckpoint::init(&cfg, 4).unwrap();
        let x = image(9, &cfg);
        let plain = forward_plain(&ckpt, &[&x]).unwrap();
        let prompted = forward_prompted(&ckpt, &[&x], &[PrefixPrompt::empty()]).unwrap();
        assert_eq!(plain, prompted);
    }

    #[test]
    fn score_matrix_shape_and_normalisation() {
        let cfg = tiny();
        let ckpt = BackboneCheckpoint::init(&cfg, 5).unwrap();
        let x = image(1, &cfg);
        let l = 3;
        let mut trace = AttentionTrace::default();
        forward_prompted_traced(&ckpt, &[&x], &[prompt(&cfg, vec![1], l, 0)], Some(&mut trace)).unwrap();
        assert_eq!(trace.layers.len(), 2);
        let n = cfg.tokens();
        assert_eq!((trace.layers[0].rows, trace.layers[0].cols), (n, n));
        let injected = &trace.layers[1];
        assert_eq!((injected.rows, injected.cols), (n, l + n));
        for h in 0..cfg.heads {
            for i in 0..n {
                let s: f64 = (0..injected.cols).map(|j| injected.prob(0, h, i, j)).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_value_prefix_scales_plain_attention() {
        // one head, head_dim 4, two tokens, one zero prefix key and value
        let tape = Tape::new();
        let q = tape.constant(Tensor::matrix(2, 4, vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let k = tape.constant(Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let v = tape.constant(Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 0.0]));
        let pk = tape.constant(Tensor::zeros([1, 1, 1, 4]));
        let pv = tape.constant(Tensor::zeros([1, 1, 1, 4]));
        let plain = prefix_attention(q, k, v, None, 1, 2, 1, 0, None).value();
        let mut trace = AttentionTrace::default();
        let prompted = prefix_attention(q, k, v, Some((pk, pv)), 1, 2, 1, 0, Some(&mut trace)).value();

        // row 0 scores (0, 1, 0) with scale 1/2; row 1 scores all zero
        let e = 1f64.exp();
        let hand_plain = [
            [(e - 1.0) / (1.0 + e), 2.0 * e / (1.0 + e), (3.0 * e + 1.0) / (1.0 + e), 4.0 * e / (1.0 + e)],
            [0.0, 1.0, 2.0, 2.0],
        ];
        let alpha = [1.0 / (2.0 + e), 1.0 / 3.0];
        for i in 0..2 {
            assert!((trace.layers[0].prob(0, 0, i, 0) - alpha[i]).abs() < 1e-12);
            for j in 0..4 {
                assert!((plain.at2(i, j) - hand_plain[i][j]).abs() < 1e-12);
                assert!((prompted.at2(i, j) - (1.0 - alpha[i]) * hand_plain[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_layer_index_is_a_contract_error() {
        let cfg = tiny();
        let ckpt = BackboneCheckpoint::init(&cfg, 5).unwrap();
        let x = image(1, &cfg);
        let err = forward_prompted(&ckpt, &[&x], &[prompt(&cfg, vec![2], 2, 0)]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let wrong = Tensor::zeros([4, 4, 3]);
        assert!(forward_plain(&ckpt, &[&wrong]).is_ok());
        let wrong = Tensor::zeros([5, 4, 3]);
        assert!(matches!(forward_plain(&ckpt, &[&wrong]), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let cfg = tiny();
        let ckpt = BackboneCheckpoint::init(&cfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.digest(), ckpt.digest());

        let mut other = cfg.clone();
        other.dim = 12;
        other.heads = 3;
        assert!(matches!(load_checkpoint_as(&path, &other), Err(Error::ShapeMismatch { .. })));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[..8].copy_from_slice(b"NOTACKPT");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Load { .. })));
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let cfg = tiny();
        let ds = crate::data_stream::make_synthetic(&crate::data_stream::SyntheticSpec {
            classes: 2,
            per_class: 4,
            image_side: 4,
            separation: 3.0,
            seed: 0,
        })
        .unwrap();
        let opts = PretrainOptions { epochs: 0, seed: 3, ..Default::default() };
        let (ckpt, _) = pretrain_base(&cfg, &ds, &opts).unwrap();
        let init = BackboneCheckpoint::init(&cfg, 3).unwrap();
        assert_eq!(ckpt.params(), init.params());
        assert!(ckpt.frozen);
    }

    #[test]
    fn overlapping_reserved_classes_rejected() {
        let cfg = tiny();
        let ds = crate::data_stream::make_synthetic(&crate::data_stream::SyntheticSpec {
            classes: 2,
            per_class: 2,
            image_side: 4,
            separation: 3.0,
            seed: 0,
        })
        .unwrap();
        let opts = PretrainOptions {
            epochs: 1,
            base_class_ids: vec![0, 1],
            reserved_class_ids: vec![1, 2],
            ..Default::default()
        };
        assert!(pretrain_base(&cfg, &ds, &opts).is_err());
    }
}
