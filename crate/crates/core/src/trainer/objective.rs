//! The per-batch training objective.
//!
//! Original rows are scored with CTC (and CE when the model has a decoder).
//! Interpolated rows get either the λ-interpolated supervised losses or, when
//! the matching COS weight is positive, soft targets read from the original
//! rows of the same forward pass. Each family is the mean over original rows
//! plus `mix_weight` times the mean over interpolated rows, so zeroing
//! `mix_weight` leaves exactly the baseline objective on the originals.

use std::collections::BTreeMap;

use crate::augment::{MixBatch, MixEntry, RowKind};
use crate::losses::{
    self, ctc_min_frames, hard_targets, teacher_from_log_probs, CeTerm, CosTerm, CtcTerm, LossKind, LossReport,
    LossWeights,
};
use crate::model::{self, Bound, EncoderOutput, TargetInput};
use crate::ndgrad::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub label_smoothing: f64,
    /// Interpolate decoder input embeddings (one decoder pass per mixed row)
    /// instead of two passes with each parent's target.
    pub eip: bool,
    pub cos_hard: bool,
    pub inter_cos: bool,
    /// Scale of the interpolated-row means inside each family.
    pub mix_weight: f64,
}

impl ObjectiveConfig {
    pub fn new(weights: LossWeights) -> Self {
        Self {
            weights,
            label_smoothing: 0.1,
            eip: true,
            cos_hard: false,
            inter_cos: false,
            mix_weight: 1.0,
        }
    }
}

/// Detached teacher distributions, keyed by base-batch index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Teachers<T> {
    /// Final CTC head, `[frames', vocab]` per utterance.
    pub ctc: BTreeMap<usize, Tensor<T>>,
    /// One map per intermediate tap, in tap order.
    pub taps: Vec<BTreeMap<usize, Tensor<T>>>,
    /// Teacher-forced decoder distributions, `[positions, vocab]`.
    pub dec: BTreeMap<usize, Tensor<T>>,
}

#[derive(Debug)]
pub struct Objective<T> {
    pub total: Var,
    pub parts: Vec<(LossKind, Var)>,
    pub ctc_terms: usize,
    pub infeasible_rows: usize,
    pub ce_tokens: usize,
    /// Teachers read from this pass (or the cache that was supplied).
    pub teachers: Teachers<T>,
    pub encoder: EncoderOutput,
    /// Final CTC head output, when a CTC family was active.
    pub log_probs: Option<Var>,
}

impl<T: Real> Objective<T> {
    pub fn report(&self, g: &Graph<T>) -> LossReport {
        LossReport {
            parts: self.parts.iter().map(|&(k, v)| (k, g.value(v).item().as_f64())).collect(),
            total: g.value(self.total).item().as_f64(),
            ctc_terms: self.ctc_terms,
            infeasible_rows: self.infeasible_rows,
            ce_tokens: self.ce_tokens,
        }
    }
}

#[derive(Default)]
struct Counts {
    ctc_terms: usize,
    infeasible: usize,
    ce_tokens: usize,
}

fn mixed_rows(mb: &MixBatch) -> Vec<(usize, &MixEntry)> {
    mb.mixed_rows().collect()
}

fn originals(mb: &MixBatch) -> Vec<(usize, usize)> {
    mb.rows
        .iter()
        .enumerate()
        .filter_map(|(r, k)| match k {
            RowKind::Original(i) => Some((r, *i)),
            RowKind::Mixed(_) => None,
        })
        .collect()
}

/// Teacher blocks for every original row of a `[rows, frames, vocab]` log-prob value.
fn read_teachers<T: Real>(
    g: &Graph<T>,
    log_probs: Var,
    mb: &MixBatch,
    lens: &[usize],
) -> BTreeMap<usize, Tensor<T>> {
    let shape = g.shape(log_probs);
    let (nt, nv) = (shape[1], shape[2]);
    let data = g.value(log_probs).data();
    originals(mb)
        .into_iter()
        .map(|(r, i)| (i, teacher_from_log_probs(&data[r * nt * nv..(r + 1) * nt * nv], lens[r], nv)))
        .collect()
}

fn teacher_for<'a, T>(map: &'a BTreeMap<usize, Tensor<T>>, i: usize) -> Result<&'a Tensor<T>> {
    map.get(&i)
        .ok_or_else(|| Error::Config(format!("no teacher for row {i}: COS needs the originals in the batch")))
}

/// Scale factors so that each group (originals, mixed) contributes its mean.
fn group_scales(n_orig: usize, n_mixed: usize, mix_weight: f64) -> (f64, f64) {
    let o = if n_orig > 0 { 1.0 / n_orig as f64 } else { 0.0 };
    let m = if n_mixed > 0 { mix_weight / n_mixed as f64 } else { 0.0 };
    (o, m)
}

fn hardened<T: Real>(map: &BTreeMap<usize, Tensor<T>>) -> BTreeMap<usize, Tensor<T>> {
    map.iter().map(|(&k, t)| (k, hard_targets(t))).collect()
}

/// CTC (and COS) for one head: the final layer or a tap.
fn ctc_family<T: Real>(
    g: &mut Graph<T>,
    log_probs: Var,
    mb: &MixBatch,
    lens: &[usize],
    teachers: Option<&BTreeMap<usize, Tensor<T>>>,
    cfg: &ObjectiveConfig,
    mut counts: Option<&mut Counts>,
) -> Result<(Option<Var>, Option<Var>)> {
    let mut dropped = 0;
    let origs = originals(mb);
    let mixed = mixed_rows(mb);
    let feasible = |label: &[u32], frames: usize| ctc_min_frames(label) <= frames;

    let mut terms = Vec::new();
    let mut weights = Vec::new();
    let orig_ok: Vec<_> = origs
        .iter()
        .filter(|&&(r, i)| feasible(&mb.base.x[i], lens[r]))
        .copied()
        .collect();
    dropped += origs.len() - orig_ok.len();
    let ctc_mixed: Vec<(usize, &MixEntry)> = if teachers.is_none() {
        let ok: Vec<_> = mixed
            .iter()
            .filter(|(r, e)| feasible(&mb.base.x[e.i], lens[*r]) && feasible(&mb.base.x[e.j], lens[*r]))
            .copied()
            .collect();
        dropped += mixed.len() - ok.len();
        ok
    } else {
        Vec::new()
    };
    let (so, sm) = group_scales(orig_ok.len(), ctc_mixed.len(), cfg.mix_weight);
    for &(r, i) in &orig_ok {
        terms.push(CtcTerm {
            row: r,
            frames: lens[r],
            label: &mb.base.x[i],
        });
        weights.push(so / lens[r] as f64);
    }
    for &(r, e) in &ctc_mixed {
        for (label, w) in [(&mb.base.x[e.i], e.lambda), (&mb.base.x[e.j], 1.0 - e.lambda)] {
            terms.push(CtcTerm {
                row: r,
                frames: lens[r],
                label,
            });
            weights.push(sm * w / lens[r] as f64);
        }
    }
    if let Some(c) = counts.as_deref_mut() {
        c.ctc_terms += terms.len();
        c.infeasible += dropped;
    }
    let ctc = if terms.is_empty() {
        None
    } else {
        let v = losses::ctc_nll_batch(g, log_probs, &terms)?;
        Some(losses::weighted_sum(g, v, &weights)?)
    };

    let cos = match teachers {
        Some(map) if !mixed.is_empty() => {
            let hard;
            let map = if cfg.cos_hard {
                hard = hardened(map);
                &hard
            } else {
                map
            };
            let (_, sm) = group_scales(0, mixed.len(), cfg.mix_weight);
            let mut terms = Vec::new();
            let mut weights = Vec::new();
            for &(r, e) in &mixed {
                for (i, w) in [(e.i, e.lambda), (e.j, 1.0 - e.lambda)] {
                    terms.push(CosTerm {
                        row: r,
                        student_frames: lens[r],
                        teacher: teacher_for(map, i)?,
                    });
                    weights.push(sm * w);
                }
            }
            let v = losses::cos_batch(g, log_probs, &terms)?;
            Some(losses::weighted_sum(g, v, &weights)?)
        }
        _ => None,
    };
    Ok((ctc, cos))
}

fn feature_tensor<T: Real>(mb: &MixBatch) -> Result<Tensor<T>> {
    let data = mb.features.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
    Ok(Tensor::new(vec![mb.len(), mb.max_frames, mb.dim], data)?)
}

/// Builds the weighted training loss for one batch. When `cached` is given,
/// its teachers replace the ones read from this pass.
pub fn build_objective<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    mb: &MixBatch,
    cfg: &ObjectiveConfig,
    cached: Option<&Teachers<T>>,
) -> Result<Objective<T>> {
    let w = cfg.weights;
    w.validate()?;
    let mixed = mixed_rows(mb);
    let origs = originals(mb);
    let mut counts = Counts::default();
    let mut parts = Vec::new();
    let mut used = Teachers::default();

    let enc = model::encode(g, p, feature_tensor(mb)?, &mb.frame_lens)?;
    let lens = enc.lengths.clone();

    let mut log_probs = None;
    let ctc_cos = w.ctc_cos > 0.0 && !mixed.is_empty();
    if w.ctc > 0.0 || ctc_cos {
        let lp = model::ctc_head(g, p, enc.hidden)?;
        log_probs = Some(lp);
        if ctc_cos {
            used.ctc = match cached {
                Some(c) => c.ctc.clone(),
                None => read_teachers(g, lp, mb, &lens),
            };
        }
        let (ctc, cos) = ctc_family(g, lp, mb, &lens, ctc_cos.then_some(&used.ctc), cfg, Some(&mut counts))?;
        if let Some(v) = ctc {
            parts.push((LossKind::Ctc, v));
        }
        if let Some(v) = cos {
            parts.push((LossKind::CtcCos, v));
        }

        let tap_cos = ctc_cos && cfg.inter_cos;
        let mut tap_ctc = Vec::new();
        let mut tap_cos_parts = Vec::new();
        for (k, &(_, hidden)) in enc.taps.iter().enumerate() {
            let lp = model::ctc_head(g, p, hidden)?;
            if tap_cos {
                let t = match cached.and_then(|c| c.taps.get(k)) {
                    Some(t) => t.clone(),
                    None => read_teachers(g, lp, mb, &lens),
                };
                used.taps.push(t);
            }
            let teachers = if tap_cos { used.taps.last() } else { None };
            let (c, s) = ctc_family(g, lp, mb, &lens, teachers, cfg, None)?;
            tap_ctc.extend(c);
            tap_cos_parts.extend(s);
        }
        if let Some(v) = losses::inter_ctc(g, &tap_ctc)? {
            parts.push((LossKind::InterCtc, v));
        }
        if let Some(v) = losses::inter_ctc(g, &tap_cos_parts)? {
            parts.push((LossKind::InterCtcCos, v));
        }
    }

    let ce_cos = w.ce_cos > 0.0 && !mixed.is_empty();
    if p.config.has_decoder() && (w.ce > 0.0 || ce_cos) {
        let yin = |i: usize| {
            let y = &mb.base.y[i];
            &y[..y.len() - 1]
        };
        let ytg = |i: usize| &mb.base.y[i][1..];
        let mut rows: Vec<(usize, TargetInput)> = Vec::new();
        // (decoder row, base index of the label, weight)
        let mut ce_terms: Vec<(usize, usize, f64)> = Vec::new();
        let mut cos_terms: Vec<(usize, usize, f64)> = Vec::new();
        let (so, sm) = group_scales(origs.len(), mixed.len(), cfg.mix_weight);
        for &(r, i) in &origs {
            ce_terms.push((rows.len(), i, so));
            rows.push((r, TargetInput::Plain(yin(i))));
        }
        for &(r, e) in &mixed {
            let sink = if ce_cos { &mut cos_terms } else { &mut ce_terms };
            if cfg.eip {
                let k = rows.len();
                rows.push((
                    r,
                    TargetInput::Mix {
                        a: yin(e.i),
                        b: yin(e.j),
                        lambda: e.lambda,
                    },
                ));
                sink.push((k, e.i, sm * e.lambda));
                sink.push((k, e.j, sm * (1.0 - e.lambda)));
            } else {
                sink.push((rows.len(), e.i, sm * e.lambda));
                rows.push((r, TargetInput::Plain(yin(e.i))));
                sink.push((rows.len(), e.j, sm * (1.0 - e.lambda)));
                rows.push((r, TargetInput::Plain(yin(e.j))));
            }
        }

        let nr = mb.len();
        let hs = g.shape(enc.hidden).to_vec();
        let flat = g.reshape(enc.hidden, &[nr, hs[1] * hs[2]])?;
        let idx: Vec<usize> = rows.iter().map(|(r, _)| *r).collect();
        let picked = g.gather(flat, &idx)?;
        let hidden = g.reshape(picked, &[idx.len(), hs[1], hs[2]])?;
        let dec_lens: Vec<usize> = idx.iter().map(|&r| lens[r]).collect();
        let inputs: Vec<TargetInput> = rows.iter().map(|(_, t)| *t).collect();
        let z = model::embed_targets(g, p, &inputs)?;
        let logits = model::decoder_forward(g, p, hidden, &dec_lens, &z)?;

        if !ce_terms.is_empty() && w.ce > 0.0 {
            let terms: Vec<CeTerm> = ce_terms
                .iter()
                .map(|&(k, i, _)| CeTerm {
                    row: k,
                    targets: ytg(i),
                })
                .collect();
            counts.ce_tokens += terms.iter().map(|t| t.targets.len()).sum::<usize>();
            let v = losses::ce_nll_batch(g, logits, &terms, cfg.label_smoothing)?;
            let weights: Vec<f64> = ce_terms.iter().map(|t| t.2).collect();
            parts.push((LossKind::Ce, losses::weighted_sum(g, v, &weights)?));
        }
        if !cos_terms.is_empty() {
            let lsm = g.log_softmax(logits, 2)?;
            used.dec = match cached {
                Some(c) => c.dec.clone(),
                None => {
                    let np = g.shape(lsm)[1];
                    let nv = g.shape(lsm)[2];
                    let data = g.value(lsm).data();
                    origs
                        .iter()
                        .enumerate()
                        .map(|(k, &(_, i))| {
                            let block = &data[k * np * nv..(k + 1) * np * nv];
                            (i, teacher_from_log_probs(block, z.lengths[k], nv))
                        })
                        .collect()
                }
            };
            let hard;
            let dec_teachers = if cfg.cos_hard {
                hard = hardened(&used.dec);
                &hard
            } else {
                &used.dec
            };
            let terms: Vec<CosTerm<T>> = cos_terms
                .iter()
                .map(|&(k, i, _)| {
                    Ok(CosTerm {
                        row: k,
                        student_frames: z.lengths[k],
                        teacher: teacher_for(dec_teachers, i)?,
                    })
                })
                .collect::<Result<_>>()?;
            let v = losses::cos_batch(g, lsm, &terms)?;
            let weights: Vec<f64> = cos_terms.iter().map(|t| t.2).collect();
            parts.push((LossKind::CeCos, losses::weighted_sum(g, v, &weights)?));
        }
    }

    if parts.is_empty() {
        return Err(Error::Config("objective has no active loss terms".into()));
    }
    let total = losses::total_loss(g, &parts, &w)?;
    Ok(Objective {
        total,
        parts,
        ctc_terms: counts.ctc_terms,
        infeasible_rows: counts.infeasible,
        ce_tokens: counts.ce_tokens,
        teachers: used,
        encoder: enc,
        log_probs,
    })
}
