//! Synthetic speech-like corpora, feature persistence, CMVN and padded batching.
//!
//! Each content token owns a fixed random prototype vector. An utterance is the
//! concatenation of its tokens' prototypes, each held for a random number of
//! frames, plus Gaussian noise.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const BLANK: u32 = 0;
pub const PAD: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
/// First id available to content tokens.
pub const FIRST_CONTENT: u32 = 4;

pub const CMVN_EPS: f64 = 1e-5;

/// Reserved symbols followed by `content` generated tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(content: usize) -> Self {
        let mut symbols: Vec<String> = ["<blank>", "<pad>", "<s>", "</s>"].iter().map(|s| s.to_string()).collect();
        symbols.extend((0..content).map(|i| format!("t{i}")));
        Self { symbols }
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn content_size(&self) -> usize {
        self.symbols.len() - FIRST_CONTENT as usize
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn is_content(&self, id: u32) -> bool {
        id >= FIRST_CONTENT && (id as usize) < self.symbols.len()
    }
}

/// Derives a 64-bit seed from a base seed and a string key.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Row-major `frames × dim` feature block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "feature matrix {frames}×{dim} needs {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            frames,
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn get(&self, t: usize, k: usize) -> f32 {
        self.data[t * self.dim + k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: FeatureMatrix,
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Target equals the source transcript.
    #[default]
    Asr,
    /// Target is a deterministic rewrite of the source (reversed, token-shifted).
    Ast,
}

/// Generator settings for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub alphabet: usize,
    pub utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub feat_dim: usize,
    pub noise: f64,
    pub task: Task,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            alphabet: 8,
            utterances: 2000,
            min_tokens: 3,
            max_tokens: 8,
            min_duration: 2,
            max_duration: 5,
            feat_dim: 16,
            noise: 0.3,
            task: Task::Asr,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.alphabet < 2 {
            return bad("alphabet must have at least 2 content tokens");
        }
        if self.utterances == 0 {
            return bad("utterance count must be positive");
        }
        if self.feat_dim < 1 {
            return bad("feat_dim must be at least 1");
        }
        if self.min_tokens < 1 || self.min_tokens > self.max_tokens {
            return bad("token length range must satisfy 1 <= min <= max");
        }
        if self.min_duration < 1 || self.max_duration > 16 || self.min_duration > self.max_duration {
            return bad("duration range must lie within [1, 16] with min <= max");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.alphabet)
    }
}

/// Settings for a full train/dev/test corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub generator: GenConfig,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            generator: GenConfig::default(),
            train: 2000,
            dev: 200,
            test: 200,
        }
    }
}

/// Per-token prototype vectors, shared by every split generated from one seed.
pub fn prototypes(cfg: &GenConfig, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "prototypes"));
    (0..cfg.alphabet)
        .map(|_| {
            (0..cfg.feat_dim)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v as f32
                })
                .collect()
        })
        .collect()
}

fn target_for(task: Task, x: &[u32], alphabet: usize) -> Vec<u32> {
    match task {
        Task::Asr => x.to_vec(),
        Task::Ast => x
            .iter()
            .rev()
            .map(|&t| (t - FIRST_CONTENT + 1) % alphabet as u32 + FIRST_CONTENT)
            .collect(),
    }
}

/// Generates one utterance together with its per-token durations.
pub fn generate_utterance(cfg: &GenConfig, protos: &[Vec<f32>], seed: u64, id: &str) -> (Sample, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id));
    let n_tokens = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
    let x: Vec<u32> = (0..n_tokens)
        .map(|_| FIRST_CONTENT + rng.random_range(0..cfg.alphabet) as u32)
        .collect();
    let durations: Vec<usize> = (0..n_tokens)
        .map(|_| rng.random_range(cfg.min_duration..=cfg.max_duration))
        .collect();
    let frames: usize = durations.iter().sum();
    let noise = Normal::new(0.0, cfg.noise).expect("validated sigma");
    let mut data = Vec::with_capacity(frames * cfg.feat_dim);
    for (&tok, &dur) in x.iter().zip(&durations) {
        let proto = &protos[(tok - FIRST_CONTENT) as usize];
        for _ in 0..dur {
            for &p in proto {
                let e = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((p as f64 + e) as f32);
            }
        }
    }
    let y = target_for(cfg.task, &x, cfg.alphabet);
    let sample = Sample {
        id: id.to_string(),
        features: FeatureMatrix {
            frames,
            dim: cfg.feat_dim,
            data,
        },
        x,
        y,
    };
    (sample, durations)
}

/// Generates a split in memory. Utterances are independent, so they are
/// produced in parallel; the result does not depend on scheduling.
pub fn generate_split(cfg: &GenConfig, seed: u64, split: &str) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let protos = prototypes(cfg, seed);
    Ok((0..cfg.utterances)
        .into_par_iter()
        .map(|i| generate_utterance(cfg, &protos, seed, &format!("{split}-{i:05}")).0)
        .collect())
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub frames: usize,
    pub dim: usize,
    pub x: Vec<u32>,
    pub y: Vec<u32>,
    /// Feature file, relative to the manifest's directory.
    pub path: String,
}

/// Manifest of one split plus the generator settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<UtteranceRecord>,
    pub config: GenConfig,
    pub seed: u64,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let bytes: Vec<u8> = m.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path, frames: usize, dim: usize) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != frames * dim * 4 {
        return Err(Error::Features {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes for {frames}×{dim}, found {}", frames * dim * 4, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureMatrix::new(frames, dim, data)
}

/// Writes `<dir>/<split>.jsonl` and `<dir>/feats/<id>.f32` for each sample.
pub fn write_split(dir: &Path, split: &str, samples: &[Sample], cfg: &GenConfig, seed: u64) -> Result<CorpusManifest> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("feats/{}.f32", s.id);
        write_features(&dir.join(&rel), &s.features)?;
        records.push(UtteranceRecord {
            id: s.id.clone(),
            frames: s.features.frames,
            dim: s.features.dim,
            x: s.x.clone(),
            y: s.y.clone(),
            path: rel,
        });
    }
    let manifest_path = dir.join(format!("{split}.jsonl"));
    let mut out = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(&manifest_path, out).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(CorpusManifest {
        records,
        config: cfg.clone(),
        seed,
        root: dir.to_path_buf(),
    })
}

#[derive(Serialize, Deserialize)]
struct CorpusEcho {
    config: CorpusConfig,
    seed: u64,
}

/// Generates and writes the train/dev/test splits plus `corpus.json`
/// (settings echo) under `dir`.
pub fn gen_corpus(cfg: &CorpusConfig, seed: u64, dir: &Path) -> Result<Vec<CorpusManifest>> {
    cfg.generator.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifests = Vec::new();
    for (split, n) in [("train", cfg.train), ("dev", cfg.dev), ("test", cfg.test)] {
        if n == 0 {
            continue;
        }
        let gen = GenConfig {
            utterances: n,
            ..cfg.generator.clone()
        };
        let samples = generate_split(&gen, seed, split)?;
        manifests.push(write_split(dir, split, &samples, &gen, seed)?);
    }
    let echo_path = dir.join("corpus.json");
    let echo = serde_json::to_vec_pretty(&CorpusEcho {
        config: cfg.clone(),
        seed,
    })?;
    let mut f = fs::File::create(&echo_path).map_err(|e| Error::io(&echo_path, e))?;
    f.write_all(&echo).map_err(|e| Error::io(&echo_path, e))?;
    Ok(manifests)
}

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Per-utterance mean/variance normalization over frames, per feature
/// dimension, with the variance floored at [`CMVN_EPS`].
pub fn cmvn(s: &FeatureMatrix) -> FeatureMatrix {
    let (n, d) = (s.frames, s.dim);
    let mut out = s.clone();
    if n == 0 {
        return out;
    }
    for k in 0..d {
        let mean = (0..n).map(|t| s.get(t, k) as f64).sum::<f64>() / n as f64;
        let var = (0..n).map(|t| (s.get(t, k) as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / var.max(CMVN_EPS).sqrt();
        for t in 0..n {
            out.data[t * d + k] = ((s.get(t, k) as f64 - mean) * inv) as f32;
        }
    }
    out
}

/// Samples held in memory, addressable by id.
#[derive(Debug, Clone)]
pub struct Corpus {
    samples: Vec<Sample>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        let index = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        Self { samples, index }
    }

    /// Reads a manifest and every feature file it references.
    pub fn load(manifest: &Path, apply_cmvn: bool) -> Result<Self> {
        let records = read_manifest(manifest)?;
        let root = manifest.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::with_capacity(records.len());
        for r in records {
            let mut features = read_features(&root.join(&r.path), r.frames, r.dim)?;
            if apply_cmvn {
                features = cmvn(&features);
            }
            samples.push(Sample {
                id: r.id,
                features,
                x: r.x,
                y: r.y,
            });
        }
        Ok(Self::from_samples(samples))
    }

    pub fn from_manifest(m: &CorpusManifest, apply_cmvn: bool) -> Result<Self> {
        let mut samples = Vec::with_capacity(m.records.len());
        for r in &m.records {
            let mut features = read_features(&m.root.join(&r.path), r.frames, r.dim)?;
            if apply_cmvn {
                features = cmvn(&features);
            }
            samples.push(Sample {
                id: r.id.clone(),
                features,
                x: r.x.clone(),
                y: r.y.clone(),
            });
        }
        Ok(Self::from_samples(samples))
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// Feature dimension of the corpus (0 when empty).
    pub fn feat_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.dim)
    }
}

/// Zero-padded batch of utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `batch × max_frames × dim`, zero outside each row's valid frames.
    pub features: Vec<f32>,
    pub max_frames: usize,
    pub dim: usize,
    pub frame_lens: Vec<usize>,
    pub x: Vec<Vec<u32>>,
    /// Targets framed as `[bos, y…, eos]`.
    pub y: Vec<Vec<u32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The full padded `max_frames × dim` block of row `b`.
    pub fn row(&self, b: usize) -> &[f32] {
        let w = self.max_frames * self.dim;
        &self.features[b * w..(b + 1) * w]
    }

    pub fn row_mut(&mut self, b: usize) -> &mut [f32] {
        let w = self.max_frames * self.dim;
        &mut self.features[b * w..(b + 1) * w]
    }

    /// Valid frames of row `b` as a standalone matrix.
    pub fn valid_features(&self, b: usize) -> FeatureMatrix {
        let n = self.frame_lens[b] * self.dim;
        FeatureMatrix {
            frames: self.frame_lens[b],
            dim: self.dim,
            data: self.row(b)[..n].to_vec(),
        }
    }

    pub fn x_lens(&self) -> Vec<usize> {
        self.x.iter().map(Vec::len).collect()
    }

    /// Unframed target of row `b`.
    pub fn target(&self, b: usize) -> &[u32] {
        let y = &self.y[b];
        &y[1..y.len() - 1]
    }
}

pub fn frame_target(y: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(y.len() + 2);
    out.push(BOS);
    out.extend_from_slice(y);
    out.push(EOS);
    out
}

/// Pads the named utterances into one batch, preserving order.
pub fn make_batch(corpus: &Corpus, ids: &[&str]) -> Result<Batch> {
    let samples: Vec<&Sample> = ids
        .iter()
        .map(|id| corpus.get(id).ok_or_else(|| Error::UnknownId(id.to_string())))
        .collect::<Result<_>>()?;
    batch_from_samples(&samples)
}

pub fn batch_from_samples(samples: &[&Sample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("cannot batch zero utterances".into()))?;
    let dim = first.features.dim;
    let max_frames = samples.iter().map(|s| s.features.frames).max().unwrap_or(0);
    let mut features = vec![0.0f32; samples.len() * max_frames * dim];
    for (b, s) in samples.iter().enumerate() {
        if s.features.dim != dim {
            return Err(Error::Shape(format!(
                "utterance {} has dim {}, batch uses {dim}",
                s.id, s.features.dim
            )));
        }
        let off = b * max_frames * dim;
        features[off..off + s.features.data.len()].copy_from_slice(&s.features.data);
    }
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        features,
        max_frames,
        dim,
        frame_lens: samples.iter().map(|s| s.features.frames).collect(),
        x: samples.iter().map(|s| s.x.clone()).collect(),
        y: samples.iter().map(|s| frame_target(&s.y)).collect(),
    })
}
