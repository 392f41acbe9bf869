//! SpecAugment masking, Beta(α, α) mixing weights, and construction of
//! interpolated batches in replace (IPA) or append (AIPA) mode.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, FeatureMatrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    /// Interpolated rows take the place of the rows they were built from.
    Replace,
    /// Interpolated rows are appended after the untouched originals.
    #[default]
    Append,
}

/// Frequency and time masking (no time warping). Widths are upper bounds and
/// are clamped to the axis they apply to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecPolicy {
    pub freq_masks: usize,
    pub freq_width: usize,
    pub time_masks: usize,
    pub time_width: usize,
}

impl Default for SpecPolicy {
    fn default() -> Self {
        Self {
            freq_masks: 2,
            freq_width: 4,
            time_masks: 2,
            time_width: 10,
        }
    }
}

impl SpecPolicy {
    pub fn identity() -> Self {
        Self {
            freq_masks: 0,
            freq_width: 0,
            time_masks: 0,
            time_width: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Beta concentration α.
    pub alpha: f64,
    /// Fraction γ of the batch that is interpolated.
    pub gamma: f64,
    pub mode: MixMode,
    /// Interpolate decoder input embeddings instead of running two decoder passes.
    pub eip: bool,
    pub spec_policy: Option<SpecPolicy>,
    /// Use this λ for every pair instead of sampling (probes, tests).
    pub lambda_override: Option<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            gamma: 1.0,
            mode: MixMode::Append,
            eip: true,
            spec_policy: None,
            lambda_override: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if let Some(l) = self.lambda_override {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("lambda_override must lie in [0, 1], got {l}")));
            }
        }
        Ok(())
    }
}

/// Draws λ ~ Beta(α, α).
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// Masks chosen by one [`spec_augment`] call, as `(start, width)` spans.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AppliedMasks {
    pub freq: Vec<(usize, usize)>,
    pub time: Vec<(usize, usize)>,
}

/// Zeroes random frequency bands and time spans within the first
/// `valid_frames` rows of `s`. Rows past `valid_frames` are never touched.
pub fn spec_augment<R: Rng + ?Sized>(
    s: &FeatureMatrix,
    valid_frames: usize,
    policy: &SpecPolicy,
    rng: &mut R,
) -> Result<(FeatureMatrix, AppliedMasks)> {
    if valid_frames > s.frames {
        return Err(Error::Shape(format!(
            "valid_frames {valid_frames} exceeds matrix rows {}",
            s.frames
        )));
    }
    let mut out = s.clone();
    let mut masks = AppliedMasks::default();
    let d = s.dim;
    for _ in 0..policy.freq_masks {
        let w = rng.random_range(0..=policy.freq_width.min(d));
        let f0 = rng.random_range(0..=d - w);
        masks.freq.push((f0, w));
        for t in 0..valid_frames {
            out.data[t * d + f0..t * d + f0 + w].fill(0.0);
        }
    }
    for _ in 0..policy.time_masks {
        let w = rng.random_range(0..=policy.time_width.min(valid_frames));
        let t0 = rng.random_range(0..=valid_frames - w);
        masks.time.push((t0, w));
        out.data[t0 * d..(t0 + w) * d].fill(0.0);
    }
    Ok((out, masks))
}

/// Applies [`spec_augment`] to every row of a batch in row order.
pub fn spec_augment_batch<R: Rng + ?Sized>(batch: &mut Batch, policy: &SpecPolicy, rng: &mut R) -> Result<Vec<AppliedMasks>> {
    let mut all = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let block = FeatureMatrix::new(batch.max_frames, batch.dim, batch.row(b).to_vec())?;
        let (masked, masks) = spec_augment(&block, batch.frame_lens[b], policy, rng)?;
        batch.row_mut(b).copy_from_slice(&masked.data);
        all.push(masks);
    }
    Ok(all)
}

/// Mixes two feature matrices: both are zero-padded to the longer one and
/// combined as `λ·s_i + (1−λ)·s_j`.
///
/// The returned valid length is the longer of the two, except at the
/// endpoints: with λ = 1 (or 0) the sample is exactly `s_i` (or `s_j`) and
/// keeps that parent's length.
pub fn interpolate_pair(s_i: &FeatureMatrix, s_j: &FeatureMatrix, lambda: f64) -> Result<(FeatureMatrix, usize)> {
    if s_i.dim != s_j.dim {
        return Err(Error::Shape(format!(
            "cannot interpolate features of dim {} and {}",
            s_i.dim, s_j.dim
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let frames = s_i.frames.max(s_j.frames);
    let d = s_i.dim;
    let (wi, wj) = (lambda as f32, (1.0 - lambda) as f32);
    let mut out = FeatureMatrix::zeros(frames, d);
    for (k, o) in out.data.iter_mut().enumerate() {
        let a = s_i.data.get(k).copied().unwrap_or(0.0);
        let b = s_j.data.get(k).copied().unwrap_or(0.0);
        *o = wi * a + wj * b;
    }
    let len = if lambda == 1.0 {
        s_i.frames
    } else if lambda == 0.0 {
        s_j.frames
    } else {
        frames
    };
    Ok((out, len))
}

/// `⌈n·γ⌉`, robust to representation error in γ (e.g. 10 × 0.3).
pub fn mix_count(n: usize, gamma: f64) -> usize {
    ((n as f64 * gamma) - 1e-9).ceil().max(0.0) as usize
}

/// One interpolated row.
#[derive(Debug, Clone, PartialEq)]
pub struct MixEntry {
    pub i: usize,
    pub j: usize,
    pub lambda: f64,
    pub features: FeatureMatrix,
    /// Valid frames of the mixed row.
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Unmodified original row with this base index.
    Original(usize),
    /// Interpolated row described by this entry index.
    Mixed(usize),
}

/// A base batch plus interpolated rows, assembled into one padded block.
#[derive(Debug, Clone, PartialEq)]
pub struct MixBatch {
    pub base: Batch,
    pub entries: Vec<MixEntry>,
    pub rows: Vec<RowKind>,
    /// `rows × max_frames × dim`
    pub features: Vec<f32>,
    pub max_frames: usize,
    pub dim: usize,
    pub frame_lens: Vec<usize>,
}

impl MixBatch {
    /// A batch without interpolation.
    pub fn plain(base: Batch) -> Self {
        let rows = (0..base.len()).map(RowKind::Original).collect();
        Self {
            features: base.features.clone(),
            max_frames: base.max_frames,
            dim: base.dim,
            frame_lens: base.frame_lens.clone(),
            entries: Vec::new(),
            rows,
            base,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let w = self.max_frames * self.dim;
        &self.features[r * w..(r + 1) * w]
    }

    /// Row holding original sample `i` unchanged, if any.
    pub fn original_row(&self, i: usize) -> Option<usize> {
        self.rows.iter().position(|k| *k == RowKind::Original(i))
    }

    pub fn mixed_rows(&self) -> impl Iterator<Item = (usize, &MixEntry)> {
        self.rows.iter().enumerate().filter_map(|(r, k)| match k {
            RowKind::Mixed(e) => Some((r, &self.entries[*e])),
            RowKind::Original(_) => None,
        })
    }

    fn assemble(base: Batch, entries: Vec<MixEntry>, rows: Vec<RowKind>) -> Self {
        let (t, d) = (base.max_frames, base.dim);
        let mut features = Vec::with_capacity(rows.len() * t * d);
        let mut frame_lens = Vec::with_capacity(rows.len());
        for k in &rows {
            match k {
                RowKind::Original(i) => {
                    features.extend_from_slice(base.row(*i));
                    frame_lens.push(base.frame_lens[*i]);
                }
                RowKind::Mixed(e) => {
                    let m = &entries[*e];
                    features.extend_from_slice(&m.features.data);
                    features.resize(features.len() + (t - m.features.frames) * d, 0.0);
                    frame_lens.push(m.frames);
                }
            }
        }
        Self {
            base,
            entries,
            rows,
            features,
            max_frames: t,
            dim: d,
            frame_lens,
        }
    }
}

/// Pairs for `count` interpolated rows: a random permutation of the batch,
/// each element paired with its successor (cyclically), so `i != j`.
pub fn pair_plan<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    (0..count.min(n)).map(|t| (perm[t], perm[(t + 1) % n])).collect()
}

fn mix_entries<R: Rng + ?Sized>(batch: &Batch, cfg: &AugmentConfig, rng: &mut R) -> Result<Vec<MixEntry>> {
    cfg.validate()?;
    let n = batch.len();
    if n < 2 {
        return Err(Error::Config("interpolation needs a batch of at least 2 rows".into()));
    }
    let pairs = pair_plan(n, mix_count(n, cfg.gamma), rng);
    pairs
        .into_iter()
        .map(|(i, j)| {
            let lambda = match cfg.lambda_override {
                Some(l) => l,
                None => sample_lambda(cfg.alpha, rng)?,
            };
            let (features, frames) = interpolate_pair(&batch.valid_features(i), &batch.valid_features(j), lambda)?;
            Ok(MixEntry {
                i,
                j,
                lambda,
                features,
                frames,
            })
        })
        .collect()
}

/// IPA: `⌈n·γ⌉` rows are replaced by their interpolation with a partner.
pub fn build_ipa_batch<R: Rng + ?Sized>(batch: Batch, cfg: &AugmentConfig, rng: &mut R) -> Result<MixBatch> {
    let entries = mix_entries(&batch, cfg, rng)?;
    let mut rows: Vec<RowKind> = (0..batch.len()).map(RowKind::Original).collect();
    for (e, m) in entries.iter().enumerate() {
        rows[m.i] = RowKind::Mixed(e);
    }
    Ok(MixBatch::assemble(batch, entries, rows))
}

/// AIPA: the original rows are kept and `⌈n·γ⌉` interpolated rows appended.
pub fn build_aipa_batch<R: Rng + ?Sized>(batch: Batch, cfg: &AugmentConfig, rng: &mut R) -> Result<MixBatch> {
    let entries = mix_entries(&batch, cfg, rng)?;
    let mut rows: Vec<RowKind> = (0..batch.len()).map(RowKind::Original).collect();
    rows.extend((0..entries.len()).map(RowKind::Mixed));
    Ok(MixBatch::assemble(batch, entries, rows))
}

/// Full augmentation pipeline for one batch: SpecAugment first, then
/// interpolation in the configured mode.
pub fn augment_batch<R: Rng + ?Sized>(mut batch: Batch, cfg: &AugmentConfig, rng: &mut R) -> Result<MixBatch> {
    cfg.validate()?;
    if let Some(policy) = &cfg.spec_policy {
        spec_augment_batch(&mut batch, policy, rng)?;
    }
    match cfg.mode {
        MixMode::Replace => build_ipa_batch(batch, cfg, rng),
        MixMode::Append => build_aipa_batch(batch, cfg, rng),
    }
}
