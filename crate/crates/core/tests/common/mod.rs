//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::Path;

use ipalab::augment::{
    build_aipa_batch, interpolate_pair, sample_lambda, spec_augment, AugmentConfig, MixBatch, RowKind, SpecPolicy,
};
use ipalab::data::{batch_from_samples, gen_corpus, generate_split, Batch, Corpus, CorpusConfig, FeatureMatrix, GenConfig};
use ipalab::losses::{ctc_nll_batch, CtcTerm};
use ipalab::model::{ModelConfig, ModelParams};
use ipalab::probe::probe_distribution;
use ipalab::ndgrad::{GradError, Graph, Tensor, Var};
use ipalab::trainer::{build_objective, ObjectiveConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Obj<'a> = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GradError> + 'a>;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ w ⊙ v` with fixed, non-constant weights, so every output cell matters.
pub fn project(g: &mut Graph<f64>, v: Var) -> Result<Var, GradError> {
    let s = g.shape(v).to_vec();
    let n: usize = s.iter().product();
    let w = Tensor::new(s, (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect())?;
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients. `fresh` supplies each graph, so training-mode graphs can be
/// checked with a fixed dropout stream.
pub fn fd_check(
    fresh: &dyn Fn() -> Graph<f64>,
    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GradError>,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = fresh();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars).expect("objective evaluates");
        g.value(out).item()
    };
    let mut g = fresh();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).expect("objective evaluates");
    let grads = g.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.len() {
            let x0 = t.data()[ci];
            work[ti].data_mut()[ci] = x0 + eps;
            let hi = eval(&work);
            work[ti].data_mut()[ci] = x0 - eps;
            let lo = eval(&work);
            work[ti].data_mut()[ci] = x0;
            worst = worst.max(rel_err(analytic[ti].data()[ci], (hi - lo) / (2.0 * eps)));
        }
    }
    worst
}

fn away_from_zero(mut t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    for x in t.data_mut() {
        if x.abs() < margin {
            *x = if *x < 0.0 { -margin } else { margin } + *x;
        }
    }
    t
}

fn positive(mut t: Tensor<f64>) -> Tensor<f64> {
    for x in t.data_mut() {
        *x = x.abs() + 0.5;
    }
    t
}

/// Finite-difference error of every differentiable primitive, one case each
/// (two where broadcasting or an axis choice changes the backward rule).
pub fn primitive_checks() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a23 = randn(&mut rng, &[2, 3]);
    let b23 = randn(&mut rng, &[2, 3]);
    let b3 = randn(&mut rng, &[3]);
    let a234 = randn(&mut rng, &[2, 3, 4]);
    let b42 = randn(&mut rng, &[4, 2]);
    let b242 = randn(&mut rng, &[2, 4, 2]);
    let x35 = randn(&mut rng, &[3, 5]);
    let gain = randn(&mut rng, &[5]);
    let bias = randn(&mut rng, &[5]);
    let table = randn(&mut rng, &[4, 3]);
    let c24 = randn(&mut rng, &[2, 4]);

    let cases: Vec<(&'static str, Obj, Vec<Tensor<f64>>)> = vec![
        ("add", Box::new(|g, v| { let y = g.add(v[0], v[1])?; project(g, y) }), vec![a23.clone(), b23.clone()]),
        ("add_broadcast", Box::new(|g, v| { let y = g.add(v[0], v[1])?; project(g, y) }), vec![a23.clone(), b3.clone()]),
        ("sub", Box::new(|g, v| { let y = g.sub(v[0], v[1])?; project(g, y) }), vec![a23.clone(), b23.clone()]),
        ("mul", Box::new(|g, v| { let y = g.mul(v[0], v[1])?; project(g, y) }), vec![a23.clone(), b23.clone()]),
        ("mul_broadcast", Box::new(|g, v| { let y = g.mul(v[0], v[1])?; project(g, y) }), vec![a23.clone(), b3.clone()]),
        ("scale", Box::new(|g, v| { let y = g.scale(v[0], -2.5)?; project(g, y) }), vec![a23.clone()]),
        ("matmul_shared", Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; project(g, y) }), vec![a234.clone(), b42]),
        ("matmul_batched", Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; project(g, y) }), vec![a234.clone(), b242]),
        ("transpose", Box::new(|g, v| { let y = g.transpose(v[0])?; project(g, y) }), vec![a234.clone()]),
        ("reshape", Box::new(|g, v| { let y = g.reshape(v[0], &[4, 6])?; project(g, y) }), vec![a234.clone()]),
        ("concat", Box::new(|g, v| { let y = g.concat(&[v[0], v[1]], 1)?; project(g, y) }), vec![a23.clone(), c24]),
        ("slice", Box::new(|g, v| { let y = g.slice(v[0], 1, 1, 2)?; project(g, y) }), vec![a234.clone()]),
        ("sum", Box::new(|g, v| { let y = g.sum(v[0], 1)?; project(g, y) }), vec![a234.clone()]),
        ("mean", Box::new(|g, v| { let y = g.mean(v[0], 0)?; project(g, y) }), vec![a234.clone()]),
        ("sum_all", Box::new(|g, v| { let y = g.mul(v[0], v[0])?; g.sum_all(y) }), vec![a23.clone()]),
        ("mean_all", Box::new(|g, v| { let y = g.mul(v[0], v[0])?; g.mean_all(y) }), vec![a23.clone()]),
        ("exp", Box::new(|g, v| { let y = g.exp(v[0])?; project(g, y) }), vec![a23.clone()]),
        ("log", Box::new(|g, v| { let y = g.log(v[0])?; project(g, y) }), vec![positive(a23.clone())]),
        ("relu", Box::new(|g, v| { let y = g.relu(v[0])?; project(g, y) }), vec![away_from_zero(a234.clone(), 0.05)]),
        ("log_softmax_last", Box::new(|g, v| { let y = g.log_softmax(v[0], 2)?; project(g, y) }), vec![a234.clone()]),
        ("log_softmax_inner", Box::new(|g, v| { let y = g.log_softmax(v[0], 1)?; project(g, y) }), vec![a234.clone()]),
        ("layer_norm", Box::new(|g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; project(g, y) }), vec![x35.clone(), gain, bias]),
        ("gather", Box::new(|g, v| { let y = g.gather(v[0], &[2, 0, 2, 3])?; project(g, y) }), vec![table]),
        ("masked_fill", Box::new(|g, v| {
            let mask: Vec<bool> = (0..6).map(|i| i % 3 == 1).collect();
            let y = g.masked_fill(v[0], &mask, -7.0)?;
            let y = g.exp(y)?;
            project(g, y)
        }), vec![a23.clone()]),
        ("map_tanh", Box::new(|g, v| {
            let y = g.map(v[0], |x| x.tanh(), |x| 1.0 - x.tanh() * x.tanh())?;
            project(g, y)
        }), vec![a23.clone()]),
        ("logsumexp", Box::new(|g, v| { let y = g.logsumexp(v[0], 1)?; project(g, y) }), vec![a234.clone()]),
    ];

    let eval_graph = || Graph::<f64>::new();
    let mut out: Vec<(&'static str, f64)> = cases
        .iter()
        .map(|(name, f, inputs)| (*name, fd_check(&eval_graph, f.as_ref(), inputs, 1e-6)))
        .collect();

    let train_graph = || Graph::<f64>::training(5);
    let dropout: Obj = Box::new(|g, v| {
        let y = g.dropout(v[0], 0.4)?;
        let y = g.mul(y, y)?;
        project(g, y)
    });
    out.push(("dropout", fd_check(&train_graph, dropout.as_ref(), &[a234], 1e-6)));
    out
}

/// Probability that a path of `frames` symbols drawn from `probs` (row-major
/// `[frames, vocab]`) collapses to `label`, by listing every path.
pub fn brute_force_prob(probs: &[f64], frames: usize, vocab: usize, label: &[u32]) -> f64 {
    let mut total = 0.0;
    let paths = vocab.pow(frames as u32);
    let mut path = vec![0usize; frames];
    for code in 0..paths {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % vocab;
            c /= vocab;
        }
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &s in &path {
            if s != prev && s != 0 {
                collapsed.push(s as u32);
            }
            prev = s;
        }
        if collapsed == label {
            total += path.iter().enumerate().map(|(t, &s)| probs[t * vocab + s]).product::<f64>();
        }
    }
    total
}

fn labels_up_to(vocab: usize, max_len: usize) -> Vec<Vec<u32>> {
    let mut all = Vec::new();
    let mut frontier: Vec<Vec<u32>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for l in &frontier {
            for s in 1..vocab as u32 {
                let mut m = l.clone();
                m.push(s);
                next.push(m);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    all
}

fn min_frames(label: &[u32]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Every `(frames ≤ 5, vocab ≤ 3, |label| ≤ 3)` combination with a feasible
/// label, scored under `draws` random logit draws each. Returns the worst
/// absolute NLL difference and the number of comparisons.
pub fn ctc_oracle(draws: usize) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut count = 0;
    for _ in 0..draws {
        for vocab in 2..=3 {
            for frames in 1..=5 {
                let labels: Vec<Vec<u32>> = labels_up_to(vocab, 3)
                    .into_iter()
                    .filter(|l| min_frames(l) <= frames)
                    .collect();
                if labels.is_empty() {
                    continue;
                }
                let mut logits = randn(&mut rng, &[1, frames, vocab]);
                logits.data_mut().iter_mut().for_each(|x| *x *= 2.0);
                let mut g = Graph::<f64>::new();
                let l = g.constant(logits);
                let lp = g.log_softmax(l, 2).unwrap();
                let terms: Vec<CtcTerm> = labels.iter().map(|label| CtcTerm { row: 0, frames, label }).collect();
                let nll = ctc_nll_batch(&mut g, lp, &terms).unwrap();
                let probs: Vec<f64> = g.value(lp).data().iter().map(|v| v.exp()).collect();
                for (k, label) in labels.iter().enumerate() {
                    let oracle = -brute_force_prob(&probs, frames, vocab, label).ln();
                    worst = worst.max((g.value(nll).data()[k] - oracle).abs());
                    count += 1;
                }
            }
        }
    }
    (worst, count)
}

/// Worst finite-difference error of the full training objective on the tiny
/// model, with teachers read once at the unperturbed parameters.
pub fn objective_fd_error(model: &ModelConfig, mb: &MixBatch, obj: &ObjectiveConfig, seed: u64) -> f64 {
    let params = ModelParams::<f64>::init(model.clone(), seed).unwrap();
    let teachers = {
        let mut g = Graph::<f64>::new();
        let bound = params.bind(&mut g, false);
        build_objective(&mut g, &bound, mb, obj, None).unwrap().teachers
    };
    let f = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var, GradError> {
        let bound = ModelParams::<f64>::bind_vars(model, vars).map_err(|e| GradError::Shape(e.to_string()))?;
        build_objective(g, &bound, mb, obj, Some(&teachers))
            .map(|o| o.total)
            .map_err(|e| GradError::Shape(e.to_string()))
    };
    fd_check(&|| Graph::new(), &f, &params.ordered(), 1e-6)
}

/// Default train/dev corpus written under `dir`.
pub fn default_corpora(dir: &Path) -> (Corpus, Corpus) {
    let manifests = gen_corpus(&CorpusConfig::default(), 0, dir).unwrap();
    let train = Corpus::from_manifest(&manifests[0], true).unwrap();
    let dev = Corpus::from_manifest(&manifests[1], true).unwrap();
    (train, dev)
}

/// Sample mean and variance of `draws` Beta(α, α) draws.
pub fn beta_moments(alpha: f64, draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..draws).map(|_| sample_lambda(alpha, &mut rng).unwrap()).collect();
    let mean = xs.iter().sum::<f64>() / draws as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    (mean, var)
}

/// A batch of `n` synthetic utterances of varying length.
pub fn random_batch(n: usize, seed: u64) -> Batch {
    let gen = GenConfig {
        utterances: n,
        feat_dim: 5,
        ..GenConfig::default()
    };
    let samples = generate_split(&gen, seed, "batch").unwrap();
    let refs: Vec<_> = samples.iter().collect();
    batch_from_samples(&refs).unwrap()
}

fn ceil_frac(n: usize, num: usize, den: usize) -> usize {
    (n * num).div_ceil(den)
}

/// Checks row counts, untouched originals and the λ endpoints of appended
/// interpolation. Returns a description of every violation found.
pub fn interpolation_violations() -> Vec<String> {
    let mut bad = Vec::new();
    for (gamma, tenths) in [(0.3, 13), (1.0, 20)] {
        for n in 2..=32 {
            let batch = random_batch(n, n as u64);
            let cfg = AugmentConfig {
                gamma,
                ..AugmentConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(100 + n as u64);
            let mb = build_aipa_batch(batch.clone(), &cfg, &mut rng).unwrap();
            let want = ceil_frac(n, tenths, 10);
            if mb.len() != want {
                bad.push(format!("n={n} gamma={gamma}: {} rows, want {want}", mb.len()));
            }
            for i in 0..n {
                let r = mb.original_row(i).unwrap();
                let same = mb.row(r).iter().zip(batch.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
                if mb.rows[r] != RowKind::Original(i) || !same || mb.frame_lens[r] != batch.frame_lens[i] {
                    bad.push(format!("n={n} gamma={gamma}: original row {i} altered"));
                }
            }
        }
    }

    let batch = random_batch(6, 77);
    for i in 0..6 {
        for j in 0..6 {
            let (si, sj) = (batch.valid_features(i), batch.valid_features(j));
            let (one, li) = interpolate_pair(&si, &sj, 1.0).unwrap();
            let (zero, lj) = interpolate_pair(&si, &sj, 0.0).unwrap();
            let exact = |m: &FeatureMatrix, s: &FeatureMatrix, len: usize| {
                len == s.frames
                    && m.data[..s.data.len()].iter().zip(&s.data).all(|(a, b)| a.to_bits() == b.to_bits())
                    && m.data[s.data.len()..].iter().all(|&v| v == 0.0)
            };
            if !exact(&one, &si, li) || !exact(&zero, &sj, lj) {
                bad.push(format!("endpoint mismatch for pair ({i}, {j})"));
            }
        }
    }
    bad
}

/// Runs SpecAugment under several policies and checks every cell against the
/// reported masks. Returns a description of every violation found.
pub fn spec_augment_violations(trials: usize) -> Vec<String> {
    let mut bad = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let policies = [
        SpecPolicy::default(),
        SpecPolicy { freq_masks: 3, freq_width: 9, time_masks: 4, time_width: 50 },
        SpecPolicy { freq_masks: 1, freq_width: 1, time_masks: 0, time_width: 0 },
    ];
    for trial in 0..trials {
        let policy = policies[trial % policies.len()];
        let (frames, dim) = (rng.random_range(1..40), rng.random_range(1..12));
        let valid = rng.random_range(1..=frames);
        let data: Vec<f32> = (0..frames * dim).map(|_| rng.random_range(0.5f32..2.0) * if rng.random() { 1.0 } else { -1.0 }).collect();
        let input = FeatureMatrix::new(frames, dim, data).unwrap();
        let (out, masks) = spec_augment(&input, valid, &policy, &mut rng).unwrap();
        if masks.freq.len() > policy.freq_masks || masks.time.len() > policy.time_masks {
            bad.push(format!("trial {trial}: too many masks"));
        }
        if masks.freq.iter().any(|&(f0, w)| w > policy.freq_width || f0 + w > dim) {
            bad.push(format!("trial {trial}: frequency mask out of policy"));
        }
        if masks.time.iter().any(|&(t0, w)| w > policy.time_width || t0 + w > valid) {
            bad.push(format!("trial {trial}: time mask out of policy or in padding"));
        }
        for t in 0..frames {
            for k in 0..dim {
                let masked = t < valid
                    && (masks.freq.iter().any(|&(f0, w)| k >= f0 && k < f0 + w)
                        || masks.time.iter().any(|&(t0, w)| t >= t0 && t < t0 + w));
                let (a, b) = (out.get(t, k), input.get(t, k));
                if masked && a != 0.0 {
                    bad.push(format!("trial {trial}: masked cell ({t}, {k}) = {a}"));
                }
                if !masked && a.to_bits() != b.to_bits() {
                    bad.push(format!("trial {trial}: unmasked cell ({t}, {k}) changed"));
                }
            }
        }
        let (same, none) = spec_augment(&input, valid, &SpecPolicy::identity(), &mut rng).unwrap();
        if same != input || !none.freq.iter().chain(&none.time).all(|&(_, w)| w == 0) {
            bad.push(format!("trial {trial}: zero policy changed the input"));
        }
    }
    bad
}

/// The default encoder-only model over the five-dimensional test features.
pub fn probe_model() -> ModelConfig {
    ModelConfig {
        feat_dim: 5,
        vocab: 12,
        ..ModelConfig::enc_ctc()
    }
}

/// Largest centroid distance over every encoder layer when each λ is forced to 1.
pub fn unit_lambda_centroid_distance() -> f64 {
    let p = ModelParams::<f64>::init(probe_model(), 1).unwrap();
    let batch = random_batch(12, 1);
    let aug = AugmentConfig {
        lambda_override: Some(1.0),
        ..AugmentConfig::default()
    };
    let r = probe_distribution(&p, &batch, &aug, &[0, 1, 2, 3], 1).unwrap();
    r.layers.iter().map(|s| s.centroid_dist).fold(0.0, f64::max)
}
