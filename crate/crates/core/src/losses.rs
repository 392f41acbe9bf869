//! CTC, label-smoothed cross-entropy, their λ-interpolated forms, COS
//! distillation losses and the weighted total.
//!
//! Every loss is built from recorded [`Graph`] primitives, so gradients come
//! from the reverse sweep. Batched builders take a list of terms that each
//! point at one row of a batched input; the same row may appear in several
//! terms (e.g. once per label of an interpolated pair).

use serde::{Deserialize, Serialize};

use crate::data::BLANK;
use crate::ndgrad::{Graph, Real, Tensor, Var, LOG_ZERO};
use crate::{Error, PairSide, Result};

/// Weights of the four loss families. Intermediate CTC terms share the
/// weight of their family (`ctc` or `ctc_cos`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ctc: f64,
    pub ce: f64,
    pub ctc_cos: f64,
    pub ce_cos: f64,
}

impl LossWeights {
    /// Encoder-decoder defaults: joint CTC 0.3, CE 1.0, COS at half of each.
    pub fn enc_dec() -> Self {
        Self {
            ctc: 0.3,
            ce: 1.0,
            ctc_cos: 0.15,
            ce_cos: 0.5,
        }
    }

    /// Encoder-only CTC defaults.
    pub fn enc_ctc() -> Self {
        Self {
            ctc: 1.0,
            ce: 0.0,
            ctc_cos: 0.5,
            ce_cos: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.ctc, self.ce, self.ctc_cos, self.ce_cos];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ctc,
    Ce,
    CtcCos,
    CeCos,
    InterCtc,
    InterCtcCos,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ctc => "ctc",
            LossKind::Ce => "ce",
            LossKind::CtcCos => "ctc_cos",
            LossKind::CeCos => "ce_cos",
            LossKind::InterCtc => "inter_ctc",
            LossKind::InterCtcCos => "inter_ctc_cos",
        }
    }

    pub fn weight(self, w: &LossWeights) -> f64 {
        match self {
            LossKind::Ctc | LossKind::InterCtc => w.ctc,
            LossKind::Ce => w.ce,
            LossKind::CtcCos | LossKind::InterCtcCos => w.ctc_cos,
            LossKind::CeCos => w.ce_cos,
        }
    }
}

/// Frames CTC needs to emit `label`: one per token plus a separating blank
/// between each pair of equal neighbours.
pub fn ctc_min_frames(label: &[u32]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `blank, l₁, blank, l₂, …, l_n, blank`
pub fn extended_labels(label: &[u32]) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(BLANK);
    for &l in label {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// One CTC term: `label` scored against the first `frames` frames of batch row `row`.
#[derive(Debug, Clone, Copy)]
pub struct CtcTerm<'a> {
    pub row: usize,
    pub frames: usize,
    pub label: &'a [u32],
}

pub fn check_ctc_feasible(label: &[u32], frames: usize, side: Option<PairSide>) -> Result<()> {
    let needed = ctc_min_frames(label);
    if frames < needed {
        return Err(Error::Infeasible {
            label_len: label.len(),
            frames,
            needed,
            side,
        });
    }
    Ok(())
}

fn const_of<T: Real>(g: &mut Graph<T>, shape: &[usize], data: Vec<f64>) -> Result<Var> {
    Ok(g.constant(Tensor::from_f64(shape, &data)?))
}

/// Negative log-likelihood of each term, summed over all alignment paths by
/// the forward recursion in log space. `log_probs` is `[batch, frames, vocab]`.
/// Returns a `[terms]` vector (not length-normalized).
pub fn ctc_nll_batch<T: Real>(g: &mut Graph<T>, log_probs: Var, terms: &[CtcTerm]) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("ctc expects [batch, frames, vocab], got {shape:?}")));
    }
    let (nb, nt, nv) = (shape[0], shape[1], shape[2]);
    if terms.is_empty() {
        return Err(Error::Shape("ctc called with no terms".into()));
    }
    for t in terms {
        if t.row >= nb || t.frames == 0 || t.frames > nt {
            return Err(Error::Shape(format!(
                "ctc term row {} frames {} out of range for {shape:?}",
                t.row, t.frames
            )));
        }
        if t.label.is_empty() {
            return Err(Error::EmptyTarget("ctc label".into()));
        }
        if let Some(&bad) = t.label.iter().find(|&&l| l == BLANK || l as usize >= nv) {
            return Err(Error::OutOfVocabulary { token: bad, vocab: nv });
        }
        check_ctc_feasible(t.label, t.frames, None)?;
    }

    let r = terms.len();
    let exts: Vec<Vec<u32>> = terms.iter().map(|t| extended_labels(t.label)).collect();
    let s_max = exts.iter().map(Vec::len).max().unwrap_or(1);
    let t_max = terms.iter().map(|t| t.frames).max().unwrap_or(1);

    // Emission scores laid out time-major: [t_max, r, s_max].
    let mut index = Vec::with_capacity(t_max * r * s_max);
    for t in 0..t_max {
        for (term, ext) in terms.iter().zip(&exts) {
            let tt = t.min(term.frames - 1);
            for s in 0..s_max {
                let sym = ext.get(s).copied().unwrap_or(BLANK) as usize;
                index.push((term.row * nt + tt) * nv + sym);
            }
        }
    }
    let flat = g.reshape(log_probs, &[nb * nt * nv, 1])?;
    let emit = g.gather(flat, &index)?;
    let emit = g.reshape(emit, &[t_max, r, s_max])?;

    let mut no_skip = vec![true; r * s_max];
    for (k, ext) in exts.iter().enumerate() {
        for s in 2..ext.len() {
            if ext[s] != BLANK && ext[s] != ext[s - 2] {
                no_skip[k * s_max + s] = false;
            }
        }
    }
    let init_block: Vec<bool> = (0..r * s_max).map(|i| i % s_max >= 2).collect();

    let e0 = g.slice(emit, 0, 0, 1)?;
    let e0 = g.reshape(e0, &[r, s_max])?;
    let mut alpha = g.masked_fill(e0, &init_block, LOG_ZERO)?;
    let pad1 = const_of(g, &[r, 1], vec![LOG_ZERO; r])?;
    let pad2 = const_of(g, &[r, 2], vec![LOG_ZERO; 2 * r])?;

    for t in 1..t_max {
        let stay = g.reshape(alpha, &[1, r, s_max])?;
        let prev = g.slice(alpha, 1, 0, s_max - 1)?;
        let step = g.concat(&[pad1, prev], 1)?;
        let step = g.reshape(step, &[1, r, s_max])?;
        let prev2 = g.slice(alpha, 1, 0, s_max - 2)?;
        let skip = g.concat(&[pad2, prev2], 1)?;
        let skip = g.masked_fill(skip, &no_skip, LOG_ZERO)?;
        let skip = g.reshape(skip, &[1, r, s_max])?;
        let stacked = g.concat(&[stay, step, skip], 0)?;
        let merged = g.logsumexp(stacked, 0)?;
        let et = g.slice(emit, 0, t, 1)?;
        let et = g.reshape(et, &[r, s_max])?;
        let next = g.add(merged, et)?;

        if terms.iter().any(|term| term.frames <= t) {
            // Rows that have run out of frames keep their final alpha.
            let mut active = Vec::with_capacity(r * s_max);
            for term in terms {
                let a = if term.frames > t { 1.0 } else { 0.0 };
                active.extend(std::iter::repeat_n(a, s_max));
            }
            let inactive: Vec<f64> = active.iter().map(|a| 1.0 - a).collect();
            let on = const_of(g, &[r, s_max], active)?;
            let off = const_of(g, &[r, s_max], inactive)?;
            let a = g.mul(next, on)?;
            let b = g.mul(alpha, off)?;
            alpha = g.add(a, b)?;
        } else {
            alpha = next;
        }
    }

    let mut ends = Vec::with_capacity(2 * r);
    for (k, ext) in exts.iter().enumerate() {
        ends.push(k * s_max + ext.len() - 1);
    }
    for (k, ext) in exts.iter().enumerate() {
        ends.push(k * s_max + ext.len() - 2);
    }
    let flat_alpha = g.reshape(alpha, &[r * s_max, 1])?;
    let finals = g.gather(flat_alpha, &ends)?;
    let finals = g.reshape(finals, &[2, r])?;
    let ll = g.logsumexp(finals, 0)?;
    Ok(g.scale(ll, -1.0)?)
}

/// Dot product of a `[n]` vector with fixed weights.
pub fn weighted_sum<T: Real>(g: &mut Graph<T>, v: Var, weights: &[f64]) -> Result<Var> {
    let n = g.value(v).len();
    if weights.len() != n {
        return Err(Error::Shape(format!("{} weights for {n} values", weights.len())));
    }
    let w = const_of(g, &[n], weights.to_vec())?;
    let p = g.mul(v, w)?;
    Ok(g.sum_all(p)?)
}

fn as_batch_of_one<T: Real>(g: &mut Graph<T>, x: Var, what: &str) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 {
        return Err(Error::Shape(format!("{what} expects [positions, vocab], got {s:?}")));
    }
    Ok(g.reshape(x, &[1, s[0], s[1]])?)
}

/// −log P(label | log_probs) for one `[frames, vocab]` block.
pub fn ctc_nll<T: Real>(g: &mut Graph<T>, log_probs: Var, frames: usize, label: &[u32]) -> Result<Var> {
    let lp = as_batch_of_one(g, log_probs, "ctc_nll")?;
    let v = ctc_nll_batch(g, lp, &[CtcTerm { row: 0, frames, label }])?;
    Ok(g.sum_all(v)?)
}

/// `λ·ctc(x_i) + (1−λ)·ctc(x_j)` over one block.
pub fn ctc_nll_interp<T: Real>(
    g: &mut Graph<T>,
    log_probs: Var,
    frames: usize,
    x_i: &[u32],
    x_j: &[u32],
    lambda: f64,
) -> Result<Var> {
    check_lambda(lambda)?;
    check_ctc_feasible(x_i, frames, Some(PairSide::I))?;
    check_ctc_feasible(x_j, frames, Some(PairSide::J))?;
    let lp = as_batch_of_one(g, log_probs, "ctc_nll_interp")?;
    let v = ctc_nll_batch(
        g,
        lp,
        &[
            CtcTerm { row: 0, frames, label: x_i },
            CtcTerm { row: 0, frames, label: x_j },
        ],
    )?;
    weighted_sum(g, v, &[lambda, 1.0 - lambda])
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// One cross-entropy term: `targets[p]` is the label for position `p` of batch row `row`.
#[derive(Debug, Clone, Copy)]
pub struct CeTerm<'a> {
    pub row: usize,
    pub targets: &'a [u32],
}

/// Label-smoothed cross-entropy per term, averaged over that term's
/// positions: `(1−ε)·NLL(target) + ε·mean_k NLL(k)`. `logits` is
/// `[batch, positions, vocab]`; returns `[terms]`.
pub fn ce_nll_batch<T: Real>(g: &mut Graph<T>, logits: Var, terms: &[CeTerm], smoothing: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("ce expects [batch, positions, vocab], got {shape:?}")));
    }
    let (nb, np, nv) = (shape[0], shape[1], shape[2]);
    if terms.is_empty() {
        return Err(Error::Shape("ce called with no terms".into()));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing must lie in [0, 1), got {smoothing}")));
    }
    for t in terms {
        if t.targets.is_empty() {
            return Err(Error::EmptyTarget("cross-entropy target".into()));
        }
        if t.row >= nb || t.targets.len() > np {
            return Err(Error::Shape(format!(
                "ce term row {} with {} targets out of range for {shape:?}",
                t.row,
                t.targets.len()
            )));
        }
        if let Some(&bad) = t.targets.iter().find(|&&l| l as usize >= nv) {
            return Err(Error::OutOfVocabulary { token: bad, vocab: nv });
        }
    }
    let r = terms.len();
    let p_max = terms.iter().map(|t| t.targets.len()).max().unwrap_or(1);
    let lsm = g.log_softmax(logits, 2)?;

    let mut index = Vec::with_capacity(r * p_max);
    let mut w_target = Vec::with_capacity(r * p_max);
    let mut w_uniform = Vec::with_capacity(r * p_max);
    for t in terms {
        let n = t.targets.len() as f64;
        for p in 0..p_max {
            match t.targets.get(p) {
                Some(&y) => {
                    index.push((t.row * np + p) * nv + y as usize);
                    w_target.push((1.0 - smoothing) / n);
                    w_uniform.push(smoothing / (nv as f64 * n));
                }
                None => {
                    index.push((t.row * np) * nv);
                    w_target.push(0.0);
                    w_uniform.push(0.0);
                }
            }
        }
    }
    let flat = g.reshape(lsm, &[nb * np * nv, 1])?;
    let picked = g.gather(flat, &index)?;
    let picked = g.reshape(picked, &[r, p_max])?;
    let wt = const_of(g, &[r, p_max], w_target)?;
    let tgt = g.mul(picked, wt)?;
    let mut total = g.sum(tgt, 1)?;

    if smoothing > 0.0 {
        let per_pos = g.sum(lsm, 2)?;
        let rows: Vec<usize> = terms.iter().map(|t| t.row).collect();
        let per_term = g.gather(per_pos, &rows)?;
        let per_term = g.slice(per_term, 1, 0, p_max)?;
        let wu = const_of(g, &[r, p_max], w_uniform)?;
        let uni = g.mul(per_term, wu)?;
        let uni = g.sum(uni, 1)?;
        total = g.add(total, uni)?;
    }
    Ok(g.scale(total, -1.0)?)
}

/// Smoothed cross-entropy of one `[positions, vocab]` block.
pub fn ce_nll<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[u32], smoothing: f64) -> Result<Var> {
    let l = as_batch_of_one(g, logits, "ce_nll")?;
    let v = ce_nll_batch(g, l, &[CeTerm { row: 0, targets }], smoothing)?;
    Ok(g.sum_all(v)?)
}

/// Decoder logits feeding an interpolated cross-entropy.
#[derive(Debug, Clone, Copy)]
pub enum PairLogits {
    /// One decoder pass over interpolated input embeddings.
    Shared(Var),
    /// Two decoder passes, one per original target sequence.
    Separate(Var, Var),
}

/// `λ·ce(y_i) + (1−λ)·ce(y_j)`; each term is masked to its own target length.
pub fn ce_interp<T: Real>(
    g: &mut Graph<T>,
    logits: PairLogits,
    y_i: &[u32],
    y_j: &[u32],
    lambda: f64,
    smoothing: f64,
) -> Result<Var> {
    check_lambda(lambda)?;
    let (li, lj) = match logits {
        PairLogits::Shared(l) => (l, l),
        PairLogits::Separate(a, b) => (a, b),
    };
    let a = ce_nll(g, li, y_i, smoothing)?;
    let b = ce_nll(g, lj, y_j, smoothing)?;
    let a = g_reshape1(g, a)?;
    let b = g_reshape1(g, b)?;
    let both = g.concat(&[a, b], 0)?;
    weighted_sum(g, both, &[lambda, 1.0 - lambda])
}

fn g_reshape1<T: Real>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    Ok(g.reshape(v, &[1])?)
}

/// One distillation term: batch row `row` of the student against a fixed
/// `[teacher_frames, vocab]` probability block, over the first
/// `min(student_frames, teacher_frames)` frames.
#[derive(Debug, Clone, Copy)]
pub struct CosTerm<'a, T> {
    pub row: usize,
    pub student_frames: usize,
    pub teacher: &'a Tensor<T>,
}

/// Soft-target cross-entropy per term, averaged over the compared frames.
/// `student_log_probs` is `[batch, frames, vocab]`; teachers carry no gradient.
pub fn cos_batch<T: Real>(g: &mut Graph<T>, student_log_probs: Var, terms: &[CosTerm<T>]) -> Result<Var> {
    let shape = g.shape(student_log_probs).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("cos expects [batch, frames, vocab], got {shape:?}")));
    }
    let (nb, nt, nv) = (shape[0], shape[1], shape[2]);
    if terms.is_empty() {
        return Err(Error::Shape("cos called with no terms".into()));
    }
    let r = terms.len();
    let mut block = Vec::with_capacity(r * nt * nv);
    for t in terms {
        let ts = t.teacher.shape();
        if ts.len() != 2 || ts[1] != nv || t.row >= nb || t.student_frames > nt {
            return Err(Error::Shape(format!(
                "cos term row {} teacher {ts:?} incompatible with student {shape:?}",
                t.row
            )));
        }
        let n = t.student_frames.min(ts[0]);
        if n == 0 {
            return Err(Error::Shape("cos term compares zero frames".into()));
        }
        let td = t.teacher.data();
        for f in 0..n {
            let row_sum: f64 = td[f * nv..(f + 1) * nv].iter().map(|v| v.as_f64()).sum();
            if (row_sum - 1.0).abs() > 1e-5 {
                return Err(Error::Shape(format!("teacher frame {f} sums to {row_sum}, not 1")));
            }
        }
        let inv = 1.0 / n as f64;
        block.extend(td[..n * nv].iter().map(|v| v.as_f64() * inv));
        block.resize(block.len() + (nt - n) * nv, 0.0);
    }
    let flat = g.reshape(student_log_probs, &[nb, nt * nv])?;
    let rows: Vec<usize> = terms.iter().map(|t| t.row).collect();
    let student = g.gather(flat, &rows)?;
    let teacher = const_of(g, &[r, nt * nv], block)?;
    let prod = g.mul(student, teacher)?;
    let s = g.sum(prod, 1)?;
    Ok(g.scale(s, -1.0)?)
}

/// Probability block from log-probabilities (first `frames` rows of a `[frames, vocab]` slice).
pub fn teacher_from_log_probs<T: Real>(log_probs: &[T], frames: usize, vocab: usize) -> Tensor<T> {
    let data = log_probs[..frames * vocab].iter().map(|v| v.exp()).collect();
    Tensor::new(vec![frames, vocab], data).expect("consistent teacher shape")
}

/// One-hot argmax of each teacher frame; ties go to the lowest index.
pub fn hard_targets<T: Real>(teacher: &Tensor<T>) -> Tensor<T> {
    let v = teacher.shape()[1];
    let mut out = vec![T::zero(); teacher.len()];
    for (f, row) in teacher.data().chunks(v).enumerate() {
        let mut best = 0;
        for k in 1..v {
            if row[k] > row[best] {
                best = k;
            }
        }
        out[f * v + best] = T::one();
    }
    Tensor::new(teacher.shape().to_vec(), out).expect("same shape")
}

/// Soft-target loss of one `[frames, vocab]` student block against a teacher.
pub fn cos_ctc<T: Real>(g: &mut Graph<T>, student_log_probs: Var, teacher: &Tensor<T>, frames: usize) -> Result<Var> {
    let s = as_batch_of_one(g, student_log_probs, "cos_ctc")?;
    let v = cos_batch(
        g,
        s,
        &[CosTerm {
            row: 0,
            student_frames: frames,
            teacher,
        }],
    )?;
    Ok(g.sum_all(v)?)
}

/// `λ·cos(teacher_i) + (1−λ)·cos(teacher_j)`.
pub fn cos_interp<T: Real>(
    g: &mut Graph<T>,
    student_log_probs: Var,
    teacher_i: &Tensor<T>,
    teacher_j: &Tensor<T>,
    frames: usize,
    lambda: f64,
) -> Result<Var> {
    check_lambda(lambda)?;
    let s = as_batch_of_one(g, student_log_probs, "cos_interp")?;
    let v = cos_batch(
        g,
        s,
        &[
            CosTerm {
                row: 0,
                student_frames: frames,
                teacher: teacher_i,
            },
            CosTerm {
                row: 0,
                student_frames: frames,
                teacher: teacher_j,
            },
        ],
    )?;
    weighted_sum(g, v, &[lambda, 1.0 - lambda])
}

/// Cross-entropy against the teacher's argmax labels.
pub fn cos_hard<T: Real>(g: &mut Graph<T>, student_log_probs: Var, teacher: &Tensor<T>, frames: usize) -> Result<Var> {
    let hard = hard_targets(teacher);
    cos_ctc(g, student_log_probs, &hard, frames)
}

/// Mean of per-tap losses; `None` when no taps are configured.
pub fn inter_ctc<T: Real>(g: &mut Graph<T>, per_tap: &[Var]) -> Result<Option<Var>> {
    if per_tap.is_empty() {
        return Ok(None);
    }
    let parts: Vec<Var> = per_tap.iter().map(|&v| g.reshape(v, &[1])).collect::<Result<_, _>>()?;
    let all = g.concat(&parts, 0)?;
    Ok(Some(g.mean_all(all)?))
}

/// Σ weight·part. Zero-weight parts are left out entirely.
pub fn total_loss<T: Real>(g: &mut Graph<T>, parts: &[(LossKind, Var)], w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let mut acc: Option<Var> = None;
    for &(kind, v) in parts {
        let wk = kind.weight(w);
        if wk == 0.0 {
            continue;
        }
        let term = g.scale(v, wk)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => match parts.first() {
            Some(&(_, v)) => Ok(g.scale(v, 0.0)?),
            None => Err(Error::Config("no loss parts to combine".into())),
        },
    }
}

/// Scalar values of one step's losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub parts: Vec<(LossKind, f64)>,
    pub total: f64,
    /// CTC terms scored, interpolated rows dropped as infeasible, CE tokens scored.
    pub ctc_terms: usize,
    pub infeasible_rows: usize,
    pub ce_tokens: usize,
}

impl LossReport {
    pub fn get(&self, kind: LossKind) -> Option<f64> {
        self.parts.iter().find(|(k, _)| *k == kind).map(|&(_, v)| v)
    }

    /// Recomputes the total from the logged parts.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.parts.iter().map(|&(k, v)| k.weight(w) * v).sum()
    }

    /// JSON object with one key per part plus `total`.
    pub fn to_json(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        for &(k, v) in &self.parts {
            m.insert(k.name().into(), v.into());
        }
        m.insert("total".into(), self.total.into());
        m.insert("infeasible_rows".into(), self.infeasible_rows.into());
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_lp(frames: usize, vocab: usize) -> Tensor<f64> {
        Tensor::full(&[frames, vocab], -(vocab as f64).ln())
    }

    #[test]
    fn ctc_uniform_two_frames_single_label() {
        let mut g = Graph::<f64>::new();
        let lp = g.param(uniform_lp(2, 3));
        let l = ctc_nll(&mut g, lp, 2, &[1]).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_repeat_needs_blank() {
        let mut g = Graph::<f64>::new();
        let lp = g.param(uniform_lp(2, 3));
        match ctc_nll(&mut g, lp, 2, &[1, 1]) {
            Err(Error::Infeasible { needed, frames, .. }) => assert_eq!((needed, frames), (3, 2)),
            other => panic!("expected infeasible, got {other:?}"),
        }
        assert_eq!(ctc_min_frames(&[1, 1, 2, 2, 2]), 8);
    }

    #[test]
    fn ctc_near_one_hot_path_is_near_zero() {
        // path: a, blank, b
        let mut data = vec![-30.0; 9];
        data[1] = 0.0;
        data[3] = 0.0;
        data[8] = 0.0;
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::new(vec![3, 3], data).unwrap());
        let lp = g.log_softmax(logits, 1).unwrap();
        let l = ctc_nll(&mut g, lp, 3, &[1, 2]).unwrap();
        assert!(g.value(l).item() < 1e-10);
    }

    #[test]
    fn ctc_interp_side_reported() {
        let mut g = Graph::<f64>::new();
        let lp = g.param(uniform_lp(2, 3));
        match ctc_nll_interp(&mut g, lp, 2, &[1], &[2, 2], 0.5) {
            Err(Error::Infeasible { side, .. }) => assert_eq!(side, Some(PairSide::J)),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn ctc_rejects_blank_in_label() {
        let mut g = Graph::<f64>::new();
        let lp = g.param(uniform_lp(3, 3));
        assert!(matches!(ctc_nll(&mut g, lp, 3, &[0]), Err(Error::OutOfVocabulary { .. })));
        assert!(matches!(ctc_nll(&mut g, lp, 3, &[]), Err(Error::EmptyTarget(_))));
    }

    #[test]
    fn ce_limits() {
        let mut g = Graph::<f64>::new();
        let mut d = vec![-1e3; 8];
        d[1] = 0.0;
        d[6] = 0.0;
        let logits = g.param(Tensor::new(vec![2, 4], d).unwrap());
        let l = ce_nll(&mut g, logits, &[1, 2], 0.0).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let flat = g.param(Tensor::zeros(&[3, 4]));
        let l0 = ce_nll(&mut g, flat, &[1, 2, 3], 0.0).unwrap();
        let l1 = ce_nll(&mut g, flat, &[1, 2, 3], 0.1).unwrap();
        assert!((g.value(l0).item() - 4f64.ln()).abs() < 1e-12);
        assert!((g.value(l1).item() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(ce_nll(&mut g, flat, &[], 0.1), Err(Error::EmptyTarget(_))));
    }

    #[test]
    fn ce_pad_positions_excluded() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::<f64>::from_f64(&[3, 4], &[0.1, 0.5, -0.2, 0.3, 1.0, 0.0, 0.0, 2.0, 5.0, -5.0, 3.0, 0.0]).unwrap());
        let short = ce_nll(&mut g, logits, &[1, 3], 0.1).unwrap();
        let head = g.slice(logits, 0, 0, 2).unwrap();
        let direct = ce_nll(&mut g, head, &[1, 3], 0.1).unwrap();
        assert!((g.value(short).item() - g.value(direct).item()).abs() < 1e-12);
    }

    #[test]
    fn hard_targets_tie_break_low() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.1, 0.6, 0.3]).unwrap();
        let h = hard_targets(&t);
        assert_eq!(h.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::enc_dec().validate().is_ok());
        let zero = LossWeights { ctc: 0.0, ce: 0.0, ctc_cos: 0.0, ce_cos: 0.0 };
        assert!(matches!(zero.validate(), Err(Error::Config(_))));
        let neg = LossWeights { ctc: -1.0, ..LossWeights::enc_ctc() };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn inter_ctc_empty_is_absent() {
        let mut g = Graph::<f64>::new();
        assert!(inter_ctc(&mut g, &[]).unwrap().is_none());
    }
}
