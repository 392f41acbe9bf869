mod common;

use std::collections::BTreeMap;

use ipalab::augment::{build_aipa_batch, AugmentConfig, MixBatch, SpecPolicy};
use ipalab::data::{generate_split, make_batch, Corpus, GenConfig};
use ipalab::losses::LossWeights;
use ipalab::model::{ModelConfig, ModelParams};
use ipalab::ndgrad::{Graph, Tensor};
use ipalab::trainer::gradcheck::tiny_model_config;
use ipalab::trainer::{
    build_objective, evaluate, evaluate_params, sweep, sweep_csv, train_on, wer, Checkpoint, EvalOptions,
    ObjectiveConfig, StopReason, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_gen(utterances: usize, noise: f64) -> GenConfig {
    GenConfig {
        alphabet: 3,
        utterances,
        min_tokens: 1,
        max_tokens: 3,
        min_duration: 2,
        max_duration: 3,
        feat_dim: 4,
        noise,
        ..GenConfig::default()
    }
}

fn tiny_corpora() -> (Corpus, Corpus) {
    let g = tiny_gen(24, 0.3);
    let train = Corpus::from_samples(generate_split(&g, 1, "train").unwrap());
    let dev = Corpus::from_samples(generate_split(&GenConfig { utterances: 8, ..g }, 1, "dev").unwrap());
    (train, dev)
}

fn tiny_config(enc_dec: bool) -> TrainConfig {
    let base = if enc_dec { TrainConfig::enc_dec() } else { TrainConfig::default() };
    let model = ModelConfig {
        dropout: 0.1,
        ..tiny_model_config()
    };
    let model = if enc_dec { model } else { model.without_decoder(2) };
    TrainConfig {
        model,
        augment: Some(AugmentConfig::default()),
        spec_augment: Some(SpecPolicy {
            freq_masks: 1,
            freq_width: 2,
            time_masks: 1,
            time_width: 3,
        }),
        batch_size: 4,
        max_steps: 8,
        eval_interval: 4,
        warmup: 4,
        max_decode_len: 6,
        eval_batch_size: 5,
        seed: 7,
        ..base
    }
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let (tr, dev) = tiny_corpora();
    for enc_dec in [false, true] {
        let cfg = tiny_config(enc_dec);
        let (ra, ca) = train_on(&cfg, &tr, &dev, &mut |_| {}).unwrap();
        let (rb, cb) = train_on(&cfg, &tr, &dev, &mut |_| {}).unwrap();
        assert_eq!(ca.to_bytes().unwrap(), cb.to_bytes().unwrap());
        for (a, b) in ra.steps.iter().zip(&rb.steps) {
            assert_eq!(a.lambdas, b.lambdas);
            assert_eq!(a.batch, b.batch);
            assert_eq!(a.losses, b.losses);
        }
        let other = TrainConfig { seed: 8, ..cfg };
        let (_, cc) = train_on(&other, &tr, &dev, &mut |_| {}).unwrap();
        assert_ne!(ca.to_bytes().unwrap(), cc.to_bytes().unwrap());
    }
}

#[test]
fn logged_total_matches_recombined_parts_every_step() {
    let (tr, dev) = tiny_corpora();
    for enc_dec in [false, true] {
        let cfg = tiny_config(enc_dec);
        let mut events = Vec::new();
        let (report, _) = train_on(&cfg, &tr, &dev, &mut |e| events.push(e.clone())).unwrap();
        assert_eq!(report.steps.len(), 8);
        for (k, s) in report.steps.iter().enumerate() {
            assert_eq!(s.step, k + 1);
            assert!((s.losses.recombine(&cfg.weights) - s.losses.total).abs() <= 1e-6);
            assert_eq!(s.lambdas.len(), 4);
        }
        assert_eq!(report.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![4, 8]);
        let steps = events.iter().filter(|e| e["event"] == "step").count();
        let evals = events.iter().filter(|e| e["event"] == "eval").count();
        assert_eq!((steps, evals), (8, 2));
        assert_eq!(events[0]["step"], 1);
        assert!(events[0]["total"].is_f64() && events[0]["ctc"].is_f64());
    }
}

fn param_grads(p: &ModelParams<f64>, mb: &MixBatch, obj: &ObjectiveConfig) -> BTreeMap<String, Tensor<f64>> {
    let mut g = Graph::<f64>::new();
    let b = p.bind(&mut g, true);
    let o = build_objective(&mut g, &b, mb, obj, None).unwrap();
    let grads = g.backward(o.total).unwrap();
    b.vars.iter().map(|(k, &v)| (k.clone(), grads.get_or_zeros(&g, v))).collect()
}

#[test]
fn appended_rows_do_not_disturb_original_gradients() {
    let (tr, _) = tiny_corpora();
    let ids: Vec<&str> = tr.ids().into_iter().take(6).collect();
    let batch = make_batch(&tr, &ids).unwrap();
    let model = tiny_model_config();
    let p = ModelParams::<f64>::init(model, 4).unwrap();
    let mixed = build_aipa_batch(batch.clone(), &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let plain = MixBatch::plain(batch);
    for eip in [true, false] {
        let obj = ObjectiveConfig {
            eip,
            inter_cos: true,
            ..ObjectiveConfig::new(LossWeights::enc_dec())
        };
        let zeroed = ObjectiveConfig { mix_weight: 0.0, ..obj };
        let base = param_grads(&p, &plain, &obj);
        let aug = param_grads(&p, &mixed, &zeroed);
        let full = param_grads(&p, &mixed, &obj);
        let mut moved = false;
        for (name, gb) in &base {
            let ga = &aug[name];
            for (x, y) in gb.data().iter().zip(ga.data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{name}: {x} vs {y}");
            }
            moved |= gb.data().iter().zip(full[name].data()).any(|(x, y)| (x - y).abs() > 1e-9);
        }
        assert!(moved, "interpolated rows should contribute when weighted");
    }
}

#[test]
fn corpus_wer_pools_edits_over_tokens() {
    let (tr, dev) = tiny_corpora();
    for enc_dec in [false, true] {
        let cfg = TrainConfig { max_steps: 4, ..tiny_config(enc_dec) };
        let (_, ck) = train_on(&cfg, &tr, &dev, &mut |_| {}).unwrap();
        let opts = EvalOptions::from_config(&cfg);
        let ev = evaluate(&ck, &dev, &opts).unwrap();
        assert_eq!(ev, evaluate(&ck, &dev, &opts).unwrap());
        let (mut edits, mut tokens) = (0, 0);
        for (id, hyp) in &ev.hypotheses {
            let s = dev.get(id).unwrap();
            let reference = if enc_dec { &s.y } else { &s.x };
            let (e, n) = wer(hyp, reference).unwrap();
            edits += e;
            tokens += n;
        }
        assert_eq!(ev.hypotheses.len(), dev.len());
        assert_eq!(ev.wer(), edits as f64 / tokens as f64);
        assert!(ev.mean_loss.is_finite());
    }
}

#[test]
fn memorized_train_split_scores_zero() {
    let train = Corpus::from_samples(generate_split(&tiny_gen(8, 0.0), 3, "train").unwrap());
    let cfg = TrainConfig {
        model: ModelConfig {
            width: 16,
            ffn: 32,
            ..tiny_model_config()
        }
        .without_decoder(2),
        batch_size: 8,
        max_steps: 600,
        eval_interval: 600,
        warmup: 50,
        ..TrainConfig::default()
    };
    let cfg = TrainConfig {
        optimizer: ipalab::trainer::OptimizerConfig {
            lr_peak: 5e-3,
            ..cfg.optimizer
        },
        ..cfg
    };
    let (report, ck) = train_on(&cfg, &train, &train, &mut |_| {}).unwrap();
    assert_eq!(report.best_wer, 0.0, "{:?}", report.evals);
    assert_eq!(evaluate(&ck, &train, &EvalOptions::from_config(&cfg)).unwrap().wer(), 0.0);
}

#[test]
fn stalled_training_stops_early() {
    let (tr, dev) = tiny_corpora();
    let mut cfg = tiny_config(false);
    cfg.optimizer.lr_peak = 1e-12;
    cfg.max_steps = 50;
    cfg.eval_interval = 1;
    cfg.patience = 3;
    let (report, ck) = train_on(&cfg, &tr, &dev, &mut |_| {}).unwrap();
    assert_eq!(report.stop, StopReason::EarlyStop);
    assert_eq!(report.steps.len(), 4);
    assert_eq!(ck.step, 1);
    assert_eq!(report.best_step, 1);
}

#[test]
fn sweep_grid_bookkeeping_and_determinism() {
    let (tr, dev) = tiny_corpora();
    let cfg = TrainConfig { max_steps: 4, ..tiny_config(false) };
    let rows = sweep(&cfg, &[0.2, 2.0], &[0.5, 1.0], &tr, &dev).unwrap();
    assert_eq!(rows.len(), 4);
    let grid: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha, r.gamma)).collect();
    assert_eq!(grid, vec![(0.2, 0.5), (0.2, 1.0), (2.0, 0.5), (2.0, 1.0)]);
    let csv = sweep_csv(&rows);
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv, sweep_csv(&sweep(&cfg, &[0.2, 2.0], &[0.5, 1.0], &tr, &dev).unwrap()));

    let single = sweep(&cfg, &[2.0], &[1.0], &tr, &dev).unwrap();
    let direct_cfg = TrainConfig {
        augment: Some(AugmentConfig {
            alpha: 2.0,
            gamma: 1.0,
            ..AugmentConfig::default()
        }),
        ..cfg.clone()
    };
    let (direct, _) = train_on(&direct_cfg, &tr, &dev, &mut |_| {}).unwrap();
    assert_eq!(single[0].best_wer, direct.best_wer);
    assert_eq!(single[0].final_wer, direct.final_wer().unwrap());
    assert!(sweep(&cfg, &[], &[1.0], &tr, &dev).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let (tr, dev) = tiny_corpora();
    let cfg = TrainConfig { max_steps: 4, ..tiny_config(true) };
    let (_, ck) = train_on(&cfg, &tr, &dev, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    assert_eq!(back.train_config.as_ref(), Some(&cfg));
    let opts = EvalOptions::from_config(&cfg);
    assert_eq!(
        evaluate(&back, &dev, &opts).unwrap(),
        evaluate_params(&ck.params, &dev, &opts).unwrap()
    );
}

#[test]
fn mismatched_corpus_is_rejected_before_training() {
    let (tr, dev) = tiny_corpora();
    let mut cfg = tiny_config(false);
    cfg.model.feat_dim = 5;
    assert!(train_on(&cfg, &tr, &dev, &mut |_| {}).unwrap_err().is_validation());
    let mut cfg = tiny_config(false);
    cfg.model.vocab = 5;
    assert!(train_on(&cfg, &tr, &dev, &mut |_| {}).unwrap_err().is_validation());
}
