mod common;

use ipalab::augment::{AugmentConfig, SpecPolicy};
use ipalab::data::Batch;
use ipalab::model::ModelParams;
use ipalab::probe::probe_distribution;

fn permuted(b: &Batch, order: &[usize]) -> Batch {
    let mut out = b.clone();
    out.features.clear();
    for (k, &i) in order.iter().enumerate() {
        out.ids[k] = b.ids[i].clone();
        out.features.extend_from_slice(b.row(i));
        out.frame_lens[k] = b.frame_lens[i];
        out.x[k] = b.x[i].clone();
        out.y[k] = b.y[i].clone();
    }
    out
}

#[test]
fn unit_lambda_populations_coincide() {
    assert!(common::unit_lambda_centroid_distance() <= 1e-6);
    let p = ModelParams::<f64>::init(common::probe_model(), 1).unwrap();
    let batch = common::random_batch(12, 1);
    let aug = AugmentConfig {
        lambda_override: Some(1.0),
        ..AugmentConfig::default()
    };
    for s in probe_distribution(&p, &batch, &aug, &[0, 3], 1).unwrap().layers {
        assert!((s.within_orig - s.within_mix).abs() <= 1e-9);
        assert!(s.separation_ratio <= 1e-6);
    }
}

#[test]
fn mixing_moves_the_population() {
    let p = ModelParams::<f64>::init(common::probe_model(), 2).unwrap();
    let batch = common::random_batch(16, 2);
    let aug = AugmentConfig {
        alpha: 2.0,
        spec_policy: Some(SpecPolicy::default()),
        ..AugmentConfig::default()
    };
    let r = probe_distribution(&p, &batch, &aug, &[0, 1, 2, 3], 2).unwrap();
    assert_eq!(r.layers.len(), 4);
    for s in &r.layers {
        assert!(s.centroid_dist > 1e-3 && s.within_orig > 0.0 && s.within_mix > 0.0);
        assert!(s.separation_ratio.is_finite());
    }
    let csv = r.to_csv();
    assert_eq!(csv.lines().next().unwrap(), "layer,centroid_dist,within_orig,within_mix,separation_ratio");
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn report_is_deterministic_and_permutation_invariant() {
    let p = ModelParams::<f64>::init(common::probe_model(), 3).unwrap();
    let batch = common::random_batch(8, 3);
    let aug = AugmentConfig {
        lambda_override: Some(0.4),
        ..AugmentConfig::default()
    };
    let a = probe_distribution(&p, &batch, &aug, &[0, 2], 3).unwrap();
    assert_eq!(a, probe_distribution(&p, &batch, &aug, &[0, 2], 3).unwrap());

    // Pairing is drawn from the rng, so a relabelled batch gets other
    // partners; the original population is still the same set.
    let order = [5, 2, 7, 0, 3, 1, 6, 4];
    let b = probe_distribution(&p, &permuted(&batch, &order), &aug, &[0, 2], 3).unwrap();
    for (x, y) in a.layers.iter().zip(&b.layers) {
        assert!((x.within_orig - y.within_orig).abs() <= 1e-9);
    }

    // With λ = 1 the mixed rows are the originals, so the full report is invariant.
    let unit = AugmentConfig {
        lambda_override: Some(1.0),
        ..AugmentConfig::default()
    };
    let c = probe_distribution(&p, &batch, &unit, &[0, 2], 3).unwrap();
    let d = probe_distribution(&p, &permuted(&batch, &order), &unit, &[0, 2], 9).unwrap();
    for (x, y) in c.layers.iter().zip(&d.layers) {
        assert!((x.centroid_dist - y.centroid_dist).abs() <= 1e-9);
        assert!((x.within_orig - y.within_orig).abs() <= 1e-9);
        assert!((x.within_mix - y.within_mix).abs() <= 1e-9);
    }
}

#[test]
fn invalid_requests_are_rejected() {
    let p = ModelParams::<f64>::init(common::probe_model(), 4).unwrap();
    let aug = AugmentConfig::default();
    let batch = common::random_batch(8, 4);
    assert!(probe_distribution(&p, &batch, &aug, &[], 0).unwrap_err().is_validation());
    assert!(probe_distribution(&p, &batch, &aug, &[4], 0).unwrap_err().is_validation());
    assert!(probe_distribution(&p, &common::random_batch(3, 4), &aug, &[1], 0).is_err());
}
