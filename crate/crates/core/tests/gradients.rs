mod common;

use common::*;

#[test]
fn class_to_mean_hinge_matches_finite_differences() {
    let err = init_gradient_suite(20);
    assert!(err <= FD_TOLERANCE, "max relative error {err:e}");
}

#[test]
fn pair_hinge_matches_finite_differences() {
    let err = margin_gradient_suite(20);
    assert!(err <= FD_TOLERANCE, "max relative error {err:e}");
}

#[test]
fn ranking_loss_matches_finite_differences() {
    let err = ranking_gradient_suite(20);
    assert!(err <= FD_TOLERANCE, "max relative error {err:e}");
}

#[test]
fn joint_mode_matches_finite_differences() {
    let err = joint_gradient_suite(20);
    assert!(err <= FD_TOLERANCE, "max relative error {err:e}");
}

#[test]
fn ranking_loss_is_a_triple_sum() {
    // brute force over examples and negatives, scoring with explicit loops
    for seed in 0..10 {
        let prob = RankingProblem::random(seed);
        let model = &prob.model;
        let score = |x: &[f64], a: &[f64]| {
            let fx = model.f.forward(x);
            let ga = model.g.forward(a);
            let mut s = 0.0;
            for i in 0..model.rows {
                for j in 0..model.cols {
                    s += fx[i] * model.m[i * model.cols + j] * ga[j];
                }
            }
            s
        };
        let mut expected = 0.0;
        for (x, &y) in prob.features.iter().zip(&prob.labels) {
            for c in 0..prob.classes.len() {
                if c != y {
                    expected += f64::max(0.0, model.margin - score(x, &prob.classes[y]) + score(x, &prob.classes[c]));
                }
            }
        }
        let got = prob.loss(model, &prob.classes);
        assert!((got - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn inactive_terms_contribute_nothing() {
    use visex_core::repr::{margin_loss_and_grad, ClassDoc, WeightNet};
    let docs = vec![
        ClassDoc::new("a", vec![vec![1.0, 0.0], vec![0.9, 0.1]]).unwrap(),
        ClassDoc::new("b", vec![vec![0.0, 1.0]]).unwrap(),
    ];
    let net = WeightNet::random_scaled(2, &[3], 1.0, 4).unwrap();
    let (loss, grad) = margin_loss_and_grad(&net, &docs, &[(0, 1)], 0.95, true);
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&g| g == 0.0));
}

