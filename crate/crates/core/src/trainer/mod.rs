//! Training and evaluation: batch pipeline (SpecAugment, interpolation,
//! objective), Adam with warmup/inverse-sqrt schedule, dev evaluation with
//! early stopping, checkpoints and hyper-parameter sweeps.

pub mod checkpoint;
mod config;
pub mod gradcheck;
pub mod metrics;
pub mod objective;
mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{self, AugmentConfig, MixBatch, MixMode};
use crate::data::{derive_seed, make_batch, Corpus};
use crate::losses::LossReport;
use crate::model::{self, ModelParams};
use crate::ndgrad::{Graph, Tensor};
use crate::{Error, Result};

pub use checkpoint::{Checkpoint, RngState};
pub use config::{CosOptions, OptimizerConfig, TrainConfig};
pub use metrics::{wer, ErrorCounts};
pub use objective::{build_objective, Objective, ObjectiveConfig, Teachers};
pub use optim::{adam_step, global_norm, lr_at, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub losses: LossReport,
    pub grad_norm: f64,
    pub lambdas: Vec<f64>,
    pub batch: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub split: String,
    pub wer: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub wall_clock_secs: f64,
    pub stop: StopReason,
    pub best_step: usize,
    pub best_wer: f64,
}

impl TrainReport {
    pub fn final_wer(&self) -> Option<f64> {
        self.evals.last().map(|e| e.wer)
    }
}

impl StepLog {
    pub fn to_json(&self) -> serde_json::Value {
        let mut m = self.losses.to_json();
        m.insert("event".into(), "step".into());
        m.insert("step".into(), self.step.into());
        m.insert("lr".into(), self.lr.into());
        m.insert("grad_norm".into(), self.grad_norm.into());
        m.insert("lambdas".into(), self.lambdas.clone().into());
        serde_json::Value::Object(m)
    }
}

impl EvalLog {
    pub fn to_json(&self) -> serde_json::Value {
        json!({"event": "eval", "step": self.step, "split": self.split, "wer": self.wer, "loss": self.loss})
    }
}

/// Settings that shape evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub max_decode_len: usize,
    pub objective: ObjectiveConfig,
}

impl EvalOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            batch_size: cfg.eval_batch_size,
            max_decode_len: cfg.max_decode_len,
            objective: objective_config(cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub counts: ErrorCounts,
    pub mean_loss: f64,
    pub hypotheses: Vec<(String, Vec<u32>)>,
}

impl EvalReport {
    pub fn wer(&self) -> f64 {
        self.counts.rate()
    }
}

pub fn objective_config(cfg: &TrainConfig) -> ObjectiveConfig {
    ObjectiveConfig {
        weights: cfg.weights,
        label_smoothing: cfg.label_smoothing,
        eip: cfg.augment.as_ref().is_none_or(|a| a.eip),
        cos_hard: cfg.cos.hard,
        inter_cos: cfg.cos.inter,
        mix_weight: 1.0,
    }
}

/// Checks that a corpus fits the model's input dimension and vocabulary.
pub fn check_corpus(corpus: &Corpus, cfg: &model::ModelConfig) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    if corpus.feat_dim() != cfg.feat_dim {
        return Err(Error::Config(format!(
            "corpus feature dim {} does not match model feat_dim {}",
            corpus.feat_dim(),
            cfg.feat_dim
        )));
    }
    for s in corpus.samples() {
        if let Some(&token) = s.x.iter().chain(&s.y).find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::OutOfVocabulary { token, vocab: cfg.vocab });
        }
    }
    Ok(())
}

/// Greedy-decodes and scores `corpus` in eval mode: CTC best path for
/// encoder-only models (against the source transcript), autoregressive
/// decoding otherwise (against the target). WER is pooled over the corpus.
pub fn evaluate_params(params: &ModelParams<f32>, corpus: &Corpus, opts: &EvalOptions) -> Result<EvalReport> {
    check_corpus(corpus, params.config())?;
    let ids = corpus.ids();
    let vocab = params.config().vocab;
    let mut counts = ErrorCounts::default();
    let mut loss_sum = 0.0;
    let mut hypotheses = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(opts.batch_size.max(1)) {
        let batch = make_batch(corpus, chunk)?;
        let mb = MixBatch::plain(batch.clone());
        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g, false);
        let obj = build_objective(&mut g, &bound, &mb, &opts.objective, None)?;
        loss_sum += g.value(obj.total).item() as f64 * chunk.len() as f64;
        let enc = &obj.encoder;
        let hyps: Vec<Vec<u32>> = if params.config().has_decoder() {
            let hidden: Tensor<f32> = g.value(enc.hidden).clone();
            model::ar_greedy_decode(params, &hidden, &enc.lengths, opts.max_decode_len)?
        } else {
            let lp = match obj.log_probs {
                Some(v) => v,
                None => model::ctc_head(&mut g, &bound, enc.hidden)?,
            };
            let data = g.value(lp).data();
            let block = enc.frames * vocab;
            (0..chunk.len())
                .map(|b| model::ctc_greedy_decode(&data[b * block..(b + 1) * block], vocab, enc.lengths[b]))
                .collect()
        };
        for (b, hyp) in hyps.into_iter().enumerate() {
            let reference: &[u32] = if params.config().has_decoder() {
                batch.target(b)
            } else {
                &batch.x[b]
            };
            counts.add(&hyp, reference)?;
            hypotheses.push((batch.ids[b].clone(), hyp));
        }
    }
    Ok(EvalReport {
        counts,
        mean_loss: loss_sum / ids.len() as f64,
        hypotheses,
    })
}

pub fn evaluate(checkpoint: &Checkpoint, corpus: &Corpus, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_params(&checkpoint.params, corpus, opts)
}

/// Loads the configured train and dev manifests.
pub fn load_corpora(cfg: &TrainConfig) -> Result<(Corpus, Corpus)> {
    Ok((
        Corpus::load(&cfg.train_manifest, cfg.cmvn)?,
        Corpus::load(&cfg.dev_manifest, cfg.cmvn)?,
    ))
}

pub fn train(cfg: &TrainConfig, on_event: &mut dyn FnMut(&serde_json::Value)) -> Result<(TrainReport, Checkpoint)> {
    cfg.validate()?;
    let (tr, dev) = load_corpora(cfg)?;
    train_on(cfg, &tr, &dev, on_event)
}

/// Builds the training batch for one step: SpecAugment first, then the
/// configured interpolation.
pub fn prepare_batch(
    corpus: &Corpus,
    ids: &[&str],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MixBatch> {
    let mut batch = make_batch(corpus, ids)?;
    if let Some(policy) = &cfg.spec_augment {
        augment::spec_augment_batch(&mut batch, policy, rng)?;
    }
    match &cfg.augment {
        None => Ok(MixBatch::plain(batch)),
        Some(a) => match a.mode {
            MixMode::Replace => augment::build_ipa_batch(batch, a, rng),
            MixMode::Append => augment::build_aipa_batch(batch, a, rng),
        },
    }
}

fn abort(step: usize, e: Error) -> Error {
    match e {
        Error::Grad(_) | Error::NonFiniteGradient(_) => Error::Aborted {
            step,
            reason: e.to_string(),
        },
        other => other,
    }
}

/// Trains from scratch on in-memory corpora. Every random choice (init,
/// batch order, SpecAugment masks, pairs, λ, dropout) derives from `cfg.seed`.
pub fn train_on(
    cfg: &TrainConfig,
    train_corpus: &Corpus,
    dev: &Corpus,
    on_event: &mut dyn FnMut(&serde_json::Value),
) -> Result<(TrainReport, Checkpoint)> {
    cfg.validate()?;
    check_corpus(train_corpus, &cfg.model)?;
    check_corpus(dev, &cfg.model)?;
    let started = Instant::now();
    let mut params = ModelParams::<f32>::init(cfg.model.clone(), derive_seed(cfg.seed, "init"))?;
    let mut adam = AdamState::new(params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "trainer"));
    let obj_cfg = objective_config(cfg);
    let eval_opts = EvalOptions::from_config(cfg);

    let mut order: Vec<&str> = train_corpus.ids();
    let bs = cfg.batch_size.min(order.len());
    let mut cursor = order.len();

    let mut steps = Vec::with_capacity(cfg.max_steps);
    let mut evals = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0;
    let mut stop = StopReason::MaxSteps;

    for step in 1..=cfg.max_steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let ids = &order[cursor..cursor + bs];
        cursor += bs;
        let mb = prepare_batch(train_corpus, ids, cfg, &mut rng)?;
        let mut g = Graph::<f32>::training(rng.next_u64());
        let bound = params.bind(&mut g, true);
        let obj = build_objective(&mut g, &bound, &mb, &obj_cfg, None).map_err(|e| abort(step, e))?;
        let losses = obj.report(&g);
        if !losses.total.is_finite() {
            return Err(Error::Aborted {
                step,
                reason: format!("non-finite loss {:?}", losses.parts),
            });
        }
        let grads = g.backward(obj.total).map_err(|e| abort(step, e.into()))?;
        let grads: BTreeMap<String, Tensor<f32>> = bound
            .vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(&g, v)))
            .collect();
        let lr = lr_at(step, cfg.warmup, cfg.optimizer.lr_peak);
        let grad_norm =
            adam_step(params.tensors_mut(), &grads, &mut adam, lr, &cfg.optimizer).map_err(|e| abort(step, e))?;
        let log = StepLog {
            step,
            lr,
            losses,
            grad_norm,
            lambdas: mb.entries.iter().map(|e| e.lambda).collect(),
            batch: mb.base.ids.clone(),
        };
        on_event(&log.to_json());
        steps.push(log);

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let ev = evaluate_params(&params, dev, &eval_opts)?;
            let log = EvalLog {
                step,
                split: "dev".into(),
                wer: ev.wer(),
                loss: ev.mean_loss,
            };
            on_event(&log.to_json());
            evals.push(log);
            if best.as_ref().is_none_or(|(w, _)| ev.wer() < *w) {
                let ck = Checkpoint {
                    params: params.clone(),
                    adam: Some(adam.clone()),
                    step,
                    rng: Some(RngState::capture(&rng)),
                    best_metric: Some(ev.wer()),
                    train_config: Some(cfg.clone()),
                };
                best = Some((ev.wer(), ck));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    stop = StopReason::EarlyStop;
                    break;
                }
            }
        }
    }
    let (best_wer, ck) = best.ok_or_else(|| Error::Config("max_steps must be >= 1".into()))?;
    Ok((
        TrainReport {
            steps,
            evals,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            stop,
            best_step: ck.step,
            best_wer,
        },
        ck,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub gamma: f64,
    pub final_wer: f64,
    pub best_wer: f64,
    pub best_step: usize,
    pub steps: usize,
    pub stop: StopReason,
}

/// Trains one model per (α, γ) cell with the shared seed. Rows come back in
/// grid order (α outer, γ inner).
pub fn sweep(cfg: &TrainConfig, alphas: &[f64], gammas: &[f64], train_corpus: &Corpus, dev: &Corpus) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || gammas.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let base = cfg.augment.clone().unwrap_or_default();
    let cells: Vec<(f64, f64)> = alphas
        .iter()
        .flat_map(|&a| gammas.iter().map(move |&g| (a, g)))
        .collect();
    cells
        .par_iter()
        .map(|&(alpha, gamma)| {
            let cell = TrainConfig {
                augment: Some(AugmentConfig {
                    alpha,
                    gamma,
                    ..base.clone()
                }),
                ..cfg.clone()
            };
            let (report, _) = train_on(&cell, train_corpus, dev, &mut |_| {})?;
            Ok(SweepRow {
                alpha,
                gamma,
                final_wer: report.final_wer().unwrap_or(f64::NAN),
                best_wer: report.best_wer,
                best_step: report.best_step,
                steps: report.steps.len(),
                stop: report.stop,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,gamma,final_wer,best_wer,best_step,steps,stop\n");
    for r in rows {
        let stop = match r.stop {
            StopReason::MaxSteps => "max-steps",
            StopReason::EarlyStop => "early-stop",
        };
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{},{stop}\n",
            r.alpha, r.gamma, r.final_wer, r.best_wer, r.best_step, r.steps
        ));
    }
    out
}
