mod common;

use std::time::Instant;

use ipalab::losses::{ctc_nll, ctc_nll_batch, CtcTerm};
use ipalab::ndgrad::{Graph, Tensor};
use ipalab::Error;

#[test]
fn forward_recursion_matches_path_enumeration() {
    let start = Instant::now();
    let (worst, n) = common::ctc_oracle(200);
    assert_eq!(n, 200 * 49, "every feasible combination under every draw");
    assert!(worst <= 1e-6, "worst |nll - oracle| = {worst:.3e}");
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn enumeration_oracle_sanity() {
    // Two frames, uniform over {blank, a}: paths "a a", "a -", "- a" collapse to "a".
    let probs = [0.5; 4];
    assert!((common::brute_force_prob(&probs, 2, 2, &[1]) - 0.75).abs() < 1e-15);
    assert!((common::brute_force_prob(&probs, 2, 2, &[1, 1]) - 0.0).abs() < 1e-15);
}

#[test]
fn batched_terms_are_independent_of_padding_frames() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
    let lp_short = common::randn(&mut rng, &[1, 3, 3]);
    let mut padded = lp_short.data().to_vec();
    padded.extend([5.0, -3.0, 1.0, 0.5, 0.5, 9.0]);
    let score = |data: Vec<f64>, frames_total: usize| {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, frames_total, 3], &data).unwrap());
        let lp = g.log_softmax(x, 2).unwrap();
        let v = ctc_nll_batch(&mut g, lp, &[CtcTerm { row: 0, frames: 3, label: &[1, 2] }]).unwrap();
        g.value(v).data()[0]
    };
    let a = score(lp_short.data().to_vec(), 3);
    let b = score(padded, 5);
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn infeasible_label_is_an_error_not_infinity() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2, 3], &[0.0; 6]).unwrap());
    let lp = g.log_softmax(x, 1).unwrap();
    match ctc_nll(&mut g, lp, 2, &[1, 1]) {
        Err(Error::Infeasible { needed: 3, frames: 2, side: None, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn gradient_of_ctc_matches_central_differences() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(8);
    let logits = common::randn(&mut rng, &[2, 5, 4]);
    let f = |g: &mut Graph<f64>, v: &[ipalab::ndgrad::Var]| {
        let lp = g.log_softmax(v[0], 2)?;
        let terms = [
            CtcTerm { row: 0, frames: 5, label: &[1, 1, 2] },
            CtcTerm { row: 1, frames: 4, label: &[3] },
            CtcTerm { row: 1, frames: 5, label: &[2, 3] },
        ];
        let nll = ctc_nll_batch(g, lp, &terms).map_err(|e| ipalab::ndgrad::GradError::Shape(e.to_string()))?;
        g.sum_all(nll)
    };
    let err = common::fd_check(&|| Graph::new(), &f, &[logits], 1e-6);
    assert!(err <= 1e-4, "{err:.3e}");
}
