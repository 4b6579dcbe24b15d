//! Cross-module properties that need trained models: the risk-reweighting
//! identity, the conditional-risk dichotomy between separable and overlapped
//! scenarios, and the conditional-invariance inequality on random scenarios.

use gls_core::divergences::{generalized_js, DiscreteDistribution};
use gls_core::learner::{forward, train, weighted_risk, Framework, TrainConfig};
use gls_core::oracle::{marginal_mutual_info, ZMap};
use gls_core::rng::{stream, Purpose};
use gls_core::shiftgen::{
    make_scenario, make_scenario_with, sample, DomainTag, ScenarioOptions, ShiftDirections,
};
use gls_core::weights::{oracle_weights, ImportanceWeights};
use rand::Rng;

fn dist(v: &[f64]) -> DiscreteDistribution {
    DiscreteDistribution::new(v.to_vec()).unwrap()
}

/// Under pure label shift the w*-weighted source risk is an unbiased
/// estimator of the target risk: the resampled estimates must bracket the
/// target value within three empirical standard deviations.
#[test]
fn risk_reweighting_identity_under_pure_label_shift() {
    let sc = make_scenario(2, 1, 0.0, dist(&[0.7, 0.3]), dist(&[0.3, 0.7]), 51).unwrap();
    let wstar = oracle_weights(sc.source.label_dist(), sc.target.label_dist()).unwrap();

    // a fixed reference model (no training needed for the identity)
    let mut rng = stream(99, Purpose::ModelInit);
    let model = gls_core::learner::ModelParams::default_architecture(1, 2, &mut rng);

    let n = 20_000;
    let mut estimates = Vec::new();
    for rep in 0..20u64 {
        let s = sample(&sc.source, n, 1000 + rep, DomainTag::Source).unwrap();
        let (_, probs) = forward(&model, &s.features).unwrap();
        // w must satisfy w' p_hat = 1 for the empirical label distribution
        let p_hat = s.empirical_label_dist(2).unwrap();
        let raw: Vec<f64> = wstar.as_slice().to_vec();
        let dot: f64 = raw
            .iter()
            .zip(p_hat.as_slice())
            .map(|(&a, &b)| a * b)
            .sum();
        let w = ImportanceWeights::new(raw.iter().map(|v| v / dot).collect(), p_hat).unwrap();
        estimates.push(weighted_risk(&probs, &s.labels, &w).unwrap());
    }
    let t = sample(&sc.target, 200_000, 77, DomainTag::Target).unwrap();
    let (_, probs_t) = forward(&model, &t.features).unwrap();
    let ones = ImportanceWeights::identity(t.empirical_label_dist(2).unwrap());
    let target_risk = weighted_risk(&probs_t, &t.labels, &ones).unwrap();

    let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
    let var = estimates
        .iter()
        .map(|e| (e - mean) * (e - mean))
        .sum::<f64>()
        / (estimates.len() - 1) as f64;
    let std = var.sqrt();
    assert!(
        (mean - target_risk).abs() < 3.0 * std.max(1e-6),
        "mean {mean} target {target_risk} std {std}"
    );
}

/// Separable scenario: a conditional-alignment model reaches near-zero
/// zero-one risk on both domains. Heavily overlapped scenario: every model of
/// a trained ensemble keeps both risks above 5%.
#[test]
fn conditional_risk_dichotomy() {
    // separable: lattice separation 3 with tiny covariance
    let sep = make_scenario_with(
        2,
        1,
        0.0,
        dist(&[0.6, 0.4]),
        dist(&[0.4, 0.6]),
        61,
        ScenarioOptions {
            covariance_scale: 0.0625, // sigma = 0.25, 12-sigma separation
            directions: ShiftDirections::PerClass,
        },
    )
    .unwrap();
    let s = sample(&sep.source, 800, 62, DomainTag::Source).unwrap();
    let t = sample(&sep.target, 800, 63, DomainTag::Target).unwrap();
    let mut cfg = TrainConfig::new(Framework::ConditionalOnly, 61);
    cfg.max_iters = 80;
    cfg.warmup_epochs = Some(30);
    let out = train(&s, &t, &cfg).unwrap();
    let last = out.trace.records.last().unwrap();
    assert!(last.src_acc > 0.99, "separable source acc {}", last.src_acc);
    assert!(last.tgt_acc > 0.99, "separable target acc {}", last.tgt_acc);

    // heavily overlapped: means 0 and 2 with unit variance (Bayes ~ 16%)
    use gls_core::divergences::MixtureDensity;
    use gls_core::shiftgen::{DomainSpec, ShiftScenario};
    use nalgebra::DVector;
    let spec = DomainSpec::new(
        vec![
            MixtureDensity::isotropic(DVector::from_vec(vec![0.0]), 1.0).unwrap(),
            MixtureDensity::isotropic(DVector::from_vec(vec![2.0]), 1.0).unwrap(),
        ],
        dist(&[0.5, 0.5]),
    )
    .unwrap();
    let ov = ShiftScenario::new(spec.clone(), spec, 0.0, 71).unwrap();
    for rep in 0..10u64 {
        let s = sample(&ov.source, 600, 100 + rep, DomainTag::Source).unwrap();
        let t = sample(&ov.target, 600, 200 + rep, DomainTag::Target).unwrap();
        let mut cfg = TrainConfig::new(Framework::ConditionalOnly, 300 + rep);
        cfg.max_iters = 40;
        cfg.warmup_epochs = Some(20);
        let out = train(&s, &t, &cfg).unwrap();
        let last = out.trace.records.last().unwrap();
        assert!(
            last.src_acc <= 0.95 && last.tgt_acc <= 0.95,
            "rep {rep}: overlapped scenario classified too well ({}, {})",
            last.src_acc,
            last.tgt_acc
        );
    }
}

/// Conditional-invariance inequality: with identical class conditionals the
/// label-space generalized JS dominates the representation-space one for any
/// weighting, over random scenarios and mixing constants.
#[test]
fn conditional_invariance_js_inequality_random_scenarios() {
    let mut rng = stream(81, Purpose::MonteCarlo);
    for trial in 0..50 {
        let k = 2 + trial % 3;
        let dim = 1 + trial % 2;
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            DiscreteDistribution::normalized(
                (0..k).map(|_| 0.05 + rng.random::<f64>()).collect(),
            )
            .unwrap()
        };
        let p = draw(&mut rng);
        let q = draw(&mut rng);
        let sc = make_scenario(k, dim, 0.0, p.clone(), q, 700 + trial as u64).unwrap();
        // random feasible weights
        let r = draw(&mut rng);
        let w_vec: Vec<f64> = r
            .as_slice()
            .iter()
            .zip(p.as_slice())
            .map(|(&ri, &pi)| ri / pi)
            .collect();
        let w = ImportanceWeights::new(w_vec, p.clone()).unwrap();
        for a in [0.25, 0.5, 0.75] {
            let terms = marginal_mutual_info(&sc, &w, a, &ZMap::Identity, Some(1024)).unwrap();
            assert!(
                terms.label_term >= terms.z_term.value - 1e-6,
                "trial {trial} a {a}: label {} z {}",
                terms.label_term,
                terms.z_term.value
            );
            // the label term agrees with the direct discrete computation
            let pw = sc.source.reweighted(w.as_slice()).unwrap();
            let direct = generalized_js(pw.label_dist(), sc.target.label_dist(), a).unwrap();
            assert!((terms.label_term - direct).abs() <= 1e-12);
        }
    }
}
