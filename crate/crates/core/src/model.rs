//! Tiny pre-norm Transformer transducers.
//!
//! The encoder averages non-overlapping groups of `subsample` frames, projects
//! them to the model width, adds sinusoidal positions and runs self-attention
//! blocks. A shared CTC head reads the final layer and any intermediate taps.
//! The optional decoder runs causal self-attention over target embeddings and
//! cross-attention over the encoder output. An encoder-only CTC model is the
//! same configuration with zero decoder layers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::ndgrad::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const ATTN_MASK: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub vocab: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub subsample: usize,
    /// 1-based encoder layers whose outputs feed the shared CTC head as
    /// intermediate taps.
    pub inter_ctc_layers: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::enc_dec()
    }
}

/// Middle layer of an `n`-layer stack (1-based).
pub fn middle_layer(n: usize) -> usize {
    n.div_ceil(2)
}

impl ModelConfig {
    /// Desk-scale encoder-decoder.
    pub fn enc_dec() -> Self {
        Self {
            feat_dim: 16,
            vocab: 12,
            width: 32,
            heads: 2,
            ffn: 64,
            enc_layers: 2,
            dec_layers: 2,
            subsample: 2,
            inter_ctc_layers: vec![middle_layer(2)],
            dropout: 0.1,
        }
    }

    /// Desk-scale encoder-only CTC model: the encoder-decoder config with a
    /// deeper encoder and no decoder.
    pub fn enc_ctc() -> Self {
        Self::enc_dec().without_decoder(3)
    }

    pub fn without_decoder(self, enc_layers: usize) -> Self {
        Self {
            enc_layers,
            dec_layers: 0,
            inter_ctc_layers: vec![middle_layer(enc_layers)],
            ..self
        }
    }

    pub fn has_decoder(&self) -> bool {
        self.dec_layers > 0
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn subsampled_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feat_dim == 0 || self.width == 0 || self.ffn == 0 || self.heads == 0 {
            return bad("feat_dim, width, ffn and heads must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.vocab < 5 {
            return bad(format!("vocab {} leaves no content tokens", self.vocab));
        }
        if self.subsample == 0 {
            return bad("subsample factor must be >= 1".into());
        }
        if self.enc_layers == 0 {
            return bad("encoder needs at least one layer".into());
        }
        if let Some(&l) = self.inter_ctc_layers.iter().find(|&&l| l == 0 || l > self.enc_layers) {
            return bad(format!("intermediate CTC layer {l} outside 1..={}", self.enc_layers));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Parameter names and shapes, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (w, f, v) = (self.width, self.ffn, self.vocab);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let lin = |out: &mut Vec<(String, Vec<usize>)>, name: String, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o]));
            out.push((format!("{name}.b"), vec![o]));
        };
        let ln = |out: &mut Vec<(String, Vec<usize>)>, name: String| {
            out.push((format!("{name}.g"), vec![w]));
            out.push((format!("{name}.b"), vec![w]));
        };
        lin(&mut out, "enc.in".into(), self.feat_dim, w);
        for l in 0..self.enc_layers {
            ln(&mut out, format!("enc.{l}.ln1"));
            for p in ["q", "k", "v", "o"] {
                lin(&mut out, format!("enc.{l}.att.{p}"), w, w);
            }
            ln(&mut out, format!("enc.{l}.ln2"));
            lin(&mut out, format!("enc.{l}.ffn1"), w, f);
            lin(&mut out, format!("enc.{l}.ffn2"), f, w);
        }
        ln(&mut out, "enc.ln".into());
        lin(&mut out, "ctc".into(), w, v);
        if self.has_decoder() {
            out.push(("dec.emb".into(), vec![v, w]));
            for l in 0..self.dec_layers {
                ln(&mut out, format!("dec.{l}.ln1"));
                for p in ["q", "k", "v", "o"] {
                    lin(&mut out, format!("dec.{l}.self.{p}"), w, w);
                }
                ln(&mut out, format!("dec.{l}.ln2"));
                for p in ["q", "k", "v", "o"] {
                    lin(&mut out, format!("dec.{l}.cross.{p}"), w, w);
                }
                ln(&mut out, format!("dec.{l}.ln3"));
                lin(&mut out, format!("dec.{l}.ffn1"), w, f);
                lin(&mut out, format!("dec.{l}.ffn2"), f, w);
            }
            ln(&mut out, "dec.ln".into());
            lin(&mut out, "dec.out".into(), w, v);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Named parameters plus the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Xavier-uniform weights and embeddings, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".g") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            };
            tensors.insert(name, Tensor::from_f64(&shape, &data)?);
        }
        Ok(Self { config, tensors })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against `config`.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    /// Mutable access for optimizers; callers must keep every shape intact.
    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every parameter in `g`, as differentiable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound {
            config: self.config.clone(),
            vars,
        }
    }

    /// Binds an explicit list of vars (in [`ModelConfig::param_shapes`] order)
    /// as the parameters, e.g. vars created by a gradient checker.
    pub fn bind_vars(config: &ModelConfig, vars: &[Var]) -> Result<Bound> {
        let shapes = config.param_shapes();
        if shapes.len() != vars.len() {
            return Err(Error::Shape(format!("{} vars for {} parameters", vars.len(), shapes.len())));
        }
        Ok(Bound {
            config: config.clone(),
            vars: shapes.into_iter().map(|(n, _)| n).zip(vars.iter().copied()).collect(),
        })
    }

    /// Parameters in [`ModelConfig::param_shapes`] order.
    pub fn ordered(&self) -> Vec<Tensor<T>> {
        self.config
            .param_shapes()
            .iter()
            .map(|(n, _)| self.tensors[n].clone())
            .collect()
    }
}

/// Parameters registered in one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub config: ModelConfig,
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final hidden states after the closing layer norm, `[batch, frames', width]`.
    pub hidden: Var,
    /// Raw block outputs: index 0 is the projected input, `l` the output of block `l`.
    pub layers: Vec<Var>,
    /// Normalized hidden states at each configured intermediate layer.
    pub taps: Vec<(usize, Var)>,
    /// Valid frames per row after subsampling.
    pub lengths: Vec<usize>,
    pub frames: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderInput {
    /// `[batch, positions, width]`
    pub z: Var,
    pub lengths: Vec<usize>,
}

/// Sinusoidal position table `[positions, width]`.
pub fn positional_encoding(positions: usize, width: usize) -> Vec<f64> {
    let mut pe = vec![0.0; positions * width];
    for p in 0..positions {
        for i in 0..width {
            let k = (i / 2) as f64 * 2.0 / width as f64;
            let angle = p as f64 / 10000f64.powf(k);
            pe[p * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.var(&format!("{name}.w")))?;
    Ok(g.add(y, p.var(&format!("{name}.b")))?)
}

fn norm<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    Ok(g.layer_norm(x, p.var(&format!("{name}.g")), p.var(&format!("{name}.b")), LN_EPS)?)
}

/// Multi-head attention. `mask` is `[batch, queries, keys]`; true cells are blocked.
fn attention<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, xq: Var, xkv: Var, mask: &[bool]) -> Result<Var> {
    let heads = p.config.heads;
    let dh = p.config.head_dim();
    let q = linear(g, p, &format!("{name}.q"), xq)?;
    let k = linear(g, p, &format!("{name}.k"), xkv)?;
    let v = linear(g, p, &format!("{name}.v"), xkv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 2, h * dh, dh)?;
        let kh = g.slice(k, 2, h * dh, dh)?;
        let vh = g.slice(v, 2, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale)?;
        let s = g.masked_fill(s, mask, ATTN_MASK)?;
        let a = g.log_softmax(s, 2)?;
        let a = g.exp(a)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 2)? };
    linear(g, p, &format!("{name}.o"), cat)
}

fn feed_forward<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{name}1"), x)?;
    let h = g.relu(h)?;
    linear(g, p, &format!("{name}2"), h)
}

fn residual<T: Real>(g: &mut Graph<T>, x: Var, sub: Var, dropout: f64) -> Result<Var> {
    let sub = g.dropout(sub, dropout)?;
    Ok(g.add(x, sub)?)
}

/// Key-padding mask `[batch, queries, keys]`, optionally causal.
fn padding_mask(batch: usize, queries: usize, keys: usize, key_lens: &[usize], causal: bool) -> Vec<bool> {
    let mut m = Vec::with_capacity(batch * queries * keys);
    for &len in key_lens.iter().take(batch) {
        for q in 0..queries {
            for k in 0..keys {
                m.push(k >= len || (causal && k > q));
            }
        }
    }
    m
}

/// Runs the encoder on `features` (`[batch, frames, feat_dim]`, zero past each row's length).
pub fn encode<T: Real>(g: &mut Graph<T>, p: &Bound, features: Tensor<T>, lengths: &[usize]) -> Result<EncoderOutput> {
    let cfg = &p.config;
    let shape = features.shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.feat_dim || shape[0] != lengths.len() {
        return Err(Error::Shape(format!(
            "encoder expects [batch={}, frames, {}], got {shape:?}",
            lengths.len(),
            cfg.feat_dim
        )));
    }
    let (nb, nt) = (shape[0], shape[1]);
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > nt) {
        return Err(Error::Shape(format!("row length {bad} outside 1..={nt}")));
    }
    let s = cfg.subsample;
    let ns = cfg.subsampled_len(nt);
    let sub_lens: Vec<usize> = lengths.iter().map(|&l| cfg.subsampled_len(l)).collect();

    // Averaging matrix [batch, frames', frames] over each row's valid frames.
    let mut avg = vec![0.0; nb * ns * nt];
    for (b, &len) in lengths.iter().enumerate() {
        for o in 0..sub_lens[b] {
            let (lo, hi) = (o * s, ((o + 1) * s).min(len));
            for t in lo..hi {
                avg[(b * ns + o) * nt + t] = 1.0 / (hi - lo) as f64;
            }
        }
    }
    let avg = g.constant(Tensor::from_f64(&[nb, ns, nt], &avg)?);
    let x = g.constant(features);
    let x = g.matmul(avg, x)?;
    let x = linear(g, p, "enc.in", x)?;
    let pe = g.constant(Tensor::from_f64(&[ns, cfg.width], &positional_encoding(ns, cfg.width))?);
    let x = g.add(x, pe)?;
    let mut x = g.dropout(x, cfg.dropout)?;

    let mask = padding_mask(nb, ns, ns, &sub_lens, false);
    let mut layers = vec![x];
    let mut taps = Vec::new();
    for l in 0..cfg.enc_layers {
        let h = norm(g, p, &format!("enc.{l}.ln1"), x)?;
        let a = attention(g, p, &format!("enc.{l}.att"), h, h, &mask)?;
        x = residual(g, x, a, cfg.dropout)?;
        let h = norm(g, p, &format!("enc.{l}.ln2"), x)?;
        let f = feed_forward(g, p, &format!("enc.{l}.ffn"), h)?;
        x = residual(g, x, f, cfg.dropout)?;
        layers.push(x);
        if cfg.inter_ctc_layers.contains(&(l + 1)) {
            taps.push((l + 1, norm(g, p, "enc.ln", x)?));
        }
    }
    let hidden = norm(g, p, "enc.ln", x)?;
    Ok(EncoderOutput {
        hidden,
        layers,
        taps,
        lengths: sub_lens,
        frames: ns,
    })
}

/// CTC head: affine projection and log-softmax over the vocabulary, per frame.
pub fn ctc_head<T: Real>(g: &mut Graph<T>, p: &Bound, hidden: Var) -> Result<Var> {
    let logits = linear(g, p, "ctc", hidden)?;
    let r = g.shape(logits).len() - 1;
    Ok(g.log_softmax(logits, r)?)
}

/// One decoder input row: a `[bos, y…]` sequence, or two of them mixed.
#[derive(Debug, Clone, Copy)]
pub enum TargetInput<'a> {
    Plain(&'a [u32]),
    Mix { a: &'a [u32], b: &'a [u32], lambda: f64 },
}

/// Embeds decoder inputs. Mixed rows are `λ·z_a + (1−λ)·z_b`, the shorter
/// embedding sequence zero-padded to the longer.
pub fn embed_targets<T: Real>(g: &mut Graph<T>, p: &Bound, rows: &[TargetInput]) -> Result<DecoderInput> {
    let cfg = &p.config;
    if !cfg.has_decoder() {
        return Err(Error::Config("model has no decoder".into()));
    }
    let w = cfg.width;
    let check = |s: &[u32]| -> Result<()> {
        if s.is_empty() {
            return Err(Error::EmptyTarget("decoder input".into()));
        }
        match s.iter().find(|&&t| t as usize >= cfg.vocab) {
            Some(&token) => Err(Error::OutOfVocabulary { token, vocab: cfg.vocab }),
            None => Ok(()),
        }
    };
    let mut lengths = Vec::with_capacity(rows.len());
    for r in rows {
        match r {
            TargetInput::Plain(s) => {
                check(s)?;
                lengths.push(s.len());
            }
            TargetInput::Mix { a, b, lambda } => {
                check(a)?;
                check(b)?;
                crate::losses::check_lambda(*lambda)?;
                lengths.push(a.len().max(b.len()));
            }
        }
    }
    let np = lengths.iter().copied().max().unwrap_or(0);
    let nb = rows.len();
    let mut idx_a = Vec::with_capacity(nb * np);
    let mut idx_b = Vec::with_capacity(nb * np);
    let mut wa = Vec::with_capacity(nb * np * w);
    let mut wb = Vec::with_capacity(nb * np * w);
    let mut any_mix = false;
    for r in rows {
        let (a, b, la, lb): (&[u32], &[u32], f64, f64) = match r {
            TargetInput::Plain(s) => (s, s, 1.0, 0.0),
            TargetInput::Mix { a, b, lambda } => {
                any_mix = true;
                (a, b, *lambda, 1.0 - lambda)
            }
        };
        for pos in 0..np {
            idx_a.push(a.get(pos).copied().unwrap_or(0) as usize);
            idx_b.push(b.get(pos).copied().unwrap_or(0) as usize);
            let fa = if pos < a.len() { la } else { 0.0 };
            let fb = if pos < b.len() { lb } else { 0.0 };
            wa.extend(std::iter::repeat_n(fa, w));
            wb.extend(std::iter::repeat_n(fb, w));
        }
    }
    let emb = p.var("dec.emb");
    let za = g.gather(emb, &idx_a)?;
    let za = g.reshape(za, &[nb, np, w])?;
    let wa = g.constant(Tensor::from_f64(&[nb, np, w], &wa)?);
    let mut z = g.mul(za, wa)?;
    if any_mix {
        let zb = g.gather(emb, &idx_b)?;
        let zb = g.reshape(zb, &[nb, np, w])?;
        let wb = g.constant(Tensor::from_f64(&[nb, np, w], &wb)?);
        let zb = g.mul(zb, wb)?;
        z = g.add(z, zb)?;
    }
    Ok(DecoderInput { z, lengths })
}

/// Decoder logits `[batch, positions, vocab]` given encoder states
/// `hidden` (`[batch, frames', width]`) with valid lengths `enc_lengths`.
pub fn decoder_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    hidden: Var,
    enc_lengths: &[usize],
    z: &DecoderInput,
) -> Result<Var> {
    let cfg = &p.config;
    let hs = g.shape(hidden).to_vec();
    let zs = g.shape(z.z).to_vec();
    if hs.len() != 3 || zs.len() != 3 || hs[0] != zs[0] || hs[0] != enc_lengths.len() || zs[0] != z.lengths.len() {
        return Err(Error::Shape(format!(
            "decoder: hidden {hs:?}, inputs {zs:?}, {} encoder lengths",
            enc_lengths.len()
        )));
    }
    let (nb, np, nk) = (zs[0], zs[1], hs[1]);
    let pe = g.constant(Tensor::from_f64(&[np, cfg.width], &positional_encoding(np, cfg.width))?);
    let x = g.add(z.z, pe)?;
    let mut x = g.dropout(x, cfg.dropout)?;
    let self_mask = padding_mask(nb, np, np, &z.lengths, true);
    let cross_mask = padding_mask(nb, np, nk, enc_lengths, false);
    for l in 0..cfg.dec_layers {
        let h = norm(g, p, &format!("dec.{l}.ln1"), x)?;
        let a = attention(g, p, &format!("dec.{l}.self"), h, h, &self_mask)?;
        x = residual(g, x, a, cfg.dropout)?;
        let h = norm(g, p, &format!("dec.{l}.ln2"), x)?;
        let c = attention(g, p, &format!("dec.{l}.cross"), h, hidden, &cross_mask)?;
        x = residual(g, x, c, cfg.dropout)?;
        let h = norm(g, p, &format!("dec.{l}.ln3"), x)?;
        let f = feed_forward(g, p, &format!("dec.{l}.ffn"), h)?;
        x = residual(g, x, f, cfg.dropout)?;
    }
    let x = norm(g, p, "dec.ln", x)?;
    linear(g, p, "dec.out", x)
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for k in 1..row.len() {
        if row[k] > row[best] {
            best = k;
        }
    }
    best
}

/// Best-path decoding: per-frame argmax (lowest index on ties), merge
/// repeats, drop blanks. `log_probs` is `[frames, vocab]` row-major.
pub fn ctc_greedy_decode<T: Real>(log_probs: &[T], vocab: usize, frames: usize) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..frames {
        let k = argmax(&log_probs[t * vocab..(t + 1) * vocab]) as u32;
        if Some(k) != prev && k != crate::data::BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Autoregressive greedy decoding from `bos` until `eos` or `max_len` tokens.
/// `hidden` is the encoder output `[batch, frames', width]`.
pub fn ar_greedy_decode<T: Real>(
    params: &ModelParams<T>,
    hidden: &Tensor<T>,
    enc_lengths: &[usize],
    max_len: usize,
) -> Result<Vec<Vec<u32>>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let nb = enc_lengths.len();
    let vocab = params.config().vocab;
    let mut seqs: Vec<Vec<u32>> = vec![vec![BOS]; nb];
    let mut done = vec![false; nb];
    for _ in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let h = g.constant(hidden.clone());
        let rows: Vec<TargetInput> = seqs.iter().map(|s| TargetInput::Plain(s)).collect();
        let z = embed_targets(&mut g, &p, &rows)?;
        let logits = decoder_forward(&mut g, &p, h, enc_lengths, &z)?;
        let np = g.shape(logits)[1];
        let lv = g.value(logits).data();
        for b in 0..nb {
            if done[b] {
                continue;
            }
            let pos = seqs[b].len() - 1;
            let off = (b * np + pos) * vocab;
            let k = argmax(&lv[off..off + vocab]) as u32;
            if k == EOS {
                done[b] = true;
            } else {
                seqs[b].push(k);
            }
        }
    }
    Ok(seqs.into_iter().map(|s| s[1..].to_vec()).collect())
}
