mod common;

use ipalab::augment::{
    augment_batch, build_aipa_batch, build_ipa_batch, interpolate_pair, pair_plan, AugmentConfig, MixMode, RowKind,
    SpecPolicy,
};
use ipalab::data::{cmvn, FeatureMatrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn beta_sampler_moments() {
    let (mean, var) = common::beta_moments(0.2, 100_000, 1);
    assert!((mean - 0.5).abs() <= 0.01, "mean {mean}");
    assert!((var - 1.0 / (4.0 * 1.4)).abs() <= 0.01, "var {var}");
    let (mean, var) = common::beta_moments(2.0, 100_000, 2);
    assert!((mean - 0.5).abs() <= 0.01, "mean {mean}");
    assert!((var - 0.05).abs() <= 0.005, "var {var}");
}

#[test]
fn append_mode_counts_originals_and_endpoints() {
    let bad = common::interpolation_violations();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn spec_augment_accounting() {
    let bad = common::spec_augment_violations(300);
    assert!(bad.is_empty(), "{:#?}", &bad[..bad.len().min(10)]);
}

#[test]
fn replace_mode_keeps_batch_size_and_swaps_rows() {
    let batch = common::random_batch(10, 3);
    let cfg = AugmentConfig {
        gamma: 0.3,
        mode: MixMode::Replace,
        ..AugmentConfig::default()
    };
    let mb = build_ipa_batch(batch, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(mb.len(), 10);
    assert_eq!(mb.entries.len(), 3);
    for (e, m) in mb.entries.iter().enumerate() {
        assert_eq!(mb.rows[m.i], RowKind::Mixed(e));
        assert_ne!(m.i, m.j);
    }
}

#[test]
fn pairs_follow_a_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plan = pair_plan(7, 7, &mut rng);
    let mut firsts: Vec<usize> = plan.iter().map(|p| p.0).collect();
    firsts.sort();
    assert_eq!(firsts, (0..7).collect::<Vec<_>>());
    for w in plan.windows(2) {
        assert_eq!(w[0].1, w[1].0);
    }
    assert_eq!(plan[6].1, plan[0].0);
}

#[test]
fn masking_happens_before_mixing() {
    let batch = common::random_batch(6, 5);
    let cfg = AugmentConfig {
        spec_policy: Some(SpecPolicy {
            freq_masks: 1,
            freq_width: 5,
            time_masks: 0,
            time_width: 0,
        }),
        lambda_override: Some(1.0),
        ..AugmentConfig::default()
    };
    let mb = augment_batch(batch, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    // With λ = 1 every mixed row is its first parent, after masking.
    for (r, m) in mb.mixed_rows() {
        let orig = mb.original_row(m.i).unwrap();
        assert_eq!(mb.row(r), mb.row(orig));
    }
}

#[test]
fn augmentation_stream_is_seed_deterministic() {
    let cfg = AugmentConfig {
        spec_policy: Some(SpecPolicy::default()),
        ..AugmentConfig::default()
    };
    let run = |seed| augment_batch(common::random_batch(8, 6), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

fn matrix() -> impl Strategy<Value = FeatureMatrix> {
    (1usize..12, 1usize..6).prop_flat_map(|(t, d)| {
        prop::collection::vec(-50.0f32..50.0, t * d).prop_map(move |v| FeatureMatrix::new(t, d, v).unwrap())
    })
}

proptest! {
    #[test]
    fn cmvn_is_idempotent(m in matrix()) {
        let once = cmvn(&m);
        let twice = cmvn(&once);
        for (a, b) in once.data.iter().zip(&twice.data) {
            prop_assert!((a - b).abs() <= 1e-3 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn interpolation_is_affine(a in matrix(), extra in 0usize..4, lambda in 0.0f64..=1.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = FeatureMatrix::new(
            a.frames + extra,
            a.dim,
            (0..(a.frames + extra) * a.dim).map(|_| rand::Rng::random_range(&mut rng, -5.0f32..5.0)).collect(),
        ).unwrap();
        let (m, len) = interpolate_pair(&a, &b, lambda).unwrap();
        prop_assert_eq!(m.frames, b.frames);
        if lambda > 0.0 && lambda < 1.0 {
            prop_assert_eq!(len, b.frames);
        }
        for t in 0..m.frames {
            for k in 0..m.dim {
                let x = if t < a.frames { a.get(t, k) as f64 } else { 0.0 };
                let want = lambda * x + (1.0 - lambda) * b.get(t, k) as f64;
                prop_assert!((m.get(t, k) as f64 - want).abs() <= 1e-4 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn appended_rows_leave_originals_bitwise_intact(n in 2usize..20, gamma in 0.05f64..=1.0, seed in 0u64..500) {
        let batch = common::random_batch(n, seed);
        let cfg = AugmentConfig { gamma, ..AugmentConfig::default() };
        let mb = build_aipa_batch(batch.clone(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(mb.len(), n + ((n as f64 * gamma) - 1e-9).ceil() as usize);
        for i in 0..n {
            prop_assert_eq!(mb.row(i), batch.row(i));
        }
        for (_, m) in mb.mixed_rows() {
            prop_assert!((0.0..=1.0).contains(&m.lambda));
            prop_assert!(m.i != m.j);
        }
    }
}
