//! Cross-module property tests for the loss and data invariants.

use distill_core::data::{gen_toy, toy_points, ToyKind};
use distill_core::dm::{dm_loss, sample_embedding, AugPolicy, AugSample};
use distill_core::kkt::{
    aggregated_gradient, ce_margin, dkkt_loss, stationarity_loss, LossWeights,
};
use distill_core::nn::{init_params, ModelSpec, ParamVars};
use distill_core::rng::stream_rng;
use distill_core::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;

fn stationarity_of(seed: u64, lambda_scale: f64) -> f64 {
    let spec = ModelSpec::mlp((1, 3, 3), 4, 5, 2);
    let theta = init_params(&spec, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xffff);
    let images = Tensor::randn(&[3, 1, 3, 3], &mut rng);
    let labels = vec![0usize, 1, 3];
    let tape = Tape::new();
    let pv = ParamVars::leaf(&tape, &theta);
    let iv = tape.leaf(images);
    let lv = tape.leaf(Tensor::from_vec(vec![3], vec![0.2 * lambda_scale, 0.5 * lambda_scale, 0.3 * lambda_scale]).unwrap());
    let agg = aggregated_gradient(&tape, &spec, &pv, iv, &labels, lv).unwrap();
    stationarity_loss(&tape, &theta.flatten(), agg).unwrap().item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stationarity_stays_in_range_and_ignores_lambda_scale(
        seed in 0u64..1000,
        scale in 0.1f64..20.0,
    ) {
        let base = stationarity_of(seed, 1.0);
        let scaled = stationarity_of(seed, scale);
        prop_assert!((0.0..=2.0).contains(&base));
        prop_assert!((base - scaled).abs() <= 1e-9);
    }

    #[test]
    fn dm_loss_is_nonnegative(seed in 0u64..1000) {
        let net = sample_embedding(seed, (1, 6, 6), 3, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let synth = Tensor::randn(&[2, 1, 6, 6], &mut rng);
        let real = vec![Some(Tensor::randn(&[3, 1, 6, 6], &mut rng))];
        let omega = AugSample::draw(&mut stream_rng(seed, 1, 0));
        let tape = Tape::new();
        let sv = tape.leaf(synth);
        let loss = dm_loss(&tape, &net, &real, sv, &[0, 0], &omega, &AugPolicy::all()).unwrap();
        prop_assert!(loss.item() >= 0.0);
    }

    #[test]
    fn ce_margin_is_the_negative_loss(seed in 0u64..1000, classes in 2usize..12) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::randn(&[classes], &mut rng);
        let y = seed as usize % classes;
        let (loss, margin) = ce_margin(&logits, y).unwrap();
        prop_assert!(loss > 0.0);
        prop_assert!((loss + margin).abs() <= 1e-15);
    }
}

#[test]
fn dkkt_decreases_under_exact_line_search_on_a_convex_instance() {
    // linear model, fixed lambdas, ungated primal: the total is smooth in the
    // pixels, so the best step along the negative gradient must not increase
    // it, and a nonzero gradient forces a strict decrease
    let spec = ModelSpec::mlp((2, 1, 1), 2, 1, 1);
    let theta = init_params(&spec, 5).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
    let images = Tensor::randn(&[4, 2, 1, 1], &mut rng);
    let labels = vec![0usize, 0, 1, 1];
    let lambdas = vec![0.25; 4];

    let eval = |imgs: &Tensor| -> (f64, Tensor) {
        let tape = Tape::new();
        let pv = ParamVars::leaf(&tape, &theta);
        let iv = tape.leaf(imgs.clone());
        let lv = tape.leaf(Tensor::from_vec(vec![4], lambdas.clone()).unwrap());
        let terms = dkkt_loss(
            &tape,
            &spec,
            &pv,
            &theta.flatten(),
            iv,
            &labels,
            lv,
            0.1,
            false,
        )
        .unwrap();
        let g = terms.total.grad(&[iv], false).unwrap()[0].value();
        (terms.total.item(), g)
    };

    let (f0, g) = eval(&images);
    let gnorm: f64 = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(gnorm > 1e-9, "degenerate start");
    let mut best = f64::INFINITY;
    for k in -20..=6 {
        let t = 2f64.powi(k);
        let moved: Vec<f64> = images
            .data()
            .iter()
            .zip(g.data())
            .map(|(x, gv)| x - t * gv)
            .collect();
        let (f, _) = eval(&Tensor::from_vec(vec![4, 2, 1, 1], moved).unwrap());
        best = best.min(f);
    }
    assert!(best < f0, "exact line search failed to decrease: {best} vs {f0}");
}

#[test]
fn dkkt_weights_reject_negatives() {
    assert!(LossWeights::new(-0.1, 0.0, 0.0).is_err());
    assert!(LossWeights::new(0.0, -1.0, 0.0).is_err());
    assert!(LossWeights::new(0.1, 0.2, 0.3).is_ok());
}

#[test]
fn moons_toy_is_deterministic_and_two_class() {
    let a = gen_toy(ToyKind::Moons, 20, 3).unwrap();
    let b = gen_toy(ToyKind::Moons, 20, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.classes, 2);
    assert_eq!(a.len(), 40);
    let pts = toy_points(&a);
    assert!(pts.iter().all(|p| p.len() == 2));
}
