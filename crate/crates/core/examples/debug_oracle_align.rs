use gls_core::divergences::DiscreteDistribution;
use gls_core::learner::{forward, objective, pseudo_label, Batch, Framework, ModelParams, TrainConfig};
use gls_core::rng::{stream, Purpose};
use gls_core::shiftgen::{make_scenario_with, sample, DomainTag, ScenarioOptions, ShiftDirections};
use gls_core::weights::{bbse_solve, confusion_plugin, pred_marginal, ImportanceWeights, WeightMethod};

fn dist(v: &[f64]) -> DiscreteDistribution {
    DiscreteDistribution::new(v.to_vec()).unwrap()
}

fn main() {
    let use_true_labels: bool = std::env::args().nth(1).map(|s| s == "true").unwrap_or(false);
    let delta: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let seed = 202u64; // +1 direction check separately
    let sc = make_scenario_with(2, 1, delta, dist(&[0.6, 0.4]), dist(&[0.4, 0.6]), seed,
        ScenarioOptions { covariance_scale: 1.0, directions: ShiftDirections::Shared }).unwrap();
    println!("target means: {:?}", sc.target.class_conditionals().iter().map(|c| c.components()[0].mean[0]).collect::<Vec<_>>());
    let s = sample(&sc.source, 1000, 11, DomainTag::Source).unwrap();
    let t = sample(&sc.target, 1000, 12, DomainTag::Target).unwrap();
    let k = 2;
    let p_hat = s.empirical_label_dist(k).unwrap();
    let q_true = t.empirical_label_dist(k).unwrap();

    // standardization stats
    let dim = 1;
    let n_all = (s.len() + t.len()) as f64;
    let mean: f64 = (s.features.column(0).sum() + t.features.column(0).sum()) / n_all;
    let ss: f64 = s.features.column(0).iter().chain(t.features.column(0).iter()).map(|&v| (v-mean)*(v-mean)).sum();
    let std = (ss / n_all).sqrt();
    let mut rng = stream(seed, Purpose::ModelInit);
    let mut model = ModelParams::default_architecture_standardized(&[mean], &[std], k, &mut rng);
    let _ = dim;

    let mut cfg = TrainConfig::new(Framework::Gls, seed);
    cfg.lambda_g = 2.0;
    let mut w = ImportanceWeights::identity(p_hat.clone());
    let ones = ImportanceWeights::identity(p_hat.clone());
    let wstar = sc.oracle_weight_vector();

    for epoch in 0..300 {
        let warm = epoch < 40;
        let (_, ps) = forward(&model, &s.features).unwrap();
        let (_, pt) = forward(&model, &t.features).unwrap();
        let pseudo = pseudo_label(&pt);
        if !warm {
            let conf = confusion_plugin(&pseudo_label(&ps), &s.labels, k).unwrap();
            let qm = pred_marginal(&pseudo, k).unwrap();
            let est = bbse_solve(&qm, &conf, &p_hat, WeightMethod::Qp).unwrap();
            let cl = est.weights.clip_and_renormalize(50.0).unwrap();
            let blended: Vec<f64> = w.as_slice().iter().zip(cl.as_slice()).map(|(&a,&b)| 0.5*a+0.5*b).collect();
            w = ImportanceWeights::new(blended, p_hat.clone()).unwrap();
        }
        let tl: &[usize] = if use_true_labels { &t.labels } else { &pseudo };
        let mut step_cfg = cfg.clone();
        if warm { step_cfg.lambda_g = 0.0; }
        let fw = if warm { Framework::LabelOnly } else { Framework::Gls };
        let sw = if warm { &ones } else { &w };
        let eval = objective(fw, &model,
            Batch { features: &s.features, labels: &s.labels },
            Batch { features: &t.features, labels: tl },
            sw, &step_cfg).unwrap();
        // manual step
        for (l, (gw, gb)) in model.g_layers.iter_mut().zip(&eval.grads.g_layers) {
            l.weight -= gw * cfg.learning_rate;
            l.bias -= gb * cfg.learning_rate;
        }
        model.h_weight -= &eval.grads.h_weight * cfg.learning_rate;
        model.h_bias -= &eval.grads.h_bias * cfg.learning_rate;
        if epoch % 50 == 0 || epoch == 299 {
            let tgt_acc = {
                let preds = pseudo_label(&pt);
                preds.iter().zip(&t.labels).filter(|(a,b)| a==b).count() as f64 / t.len() as f64
            };
            let werr = w.as_slice().iter().zip(&wstar).map(|(&a,&b)| (a-b).abs()).fold(0.0f64, f64::max);
            println!("epoch {epoch:3} tgt {tgt_acc:.3} werr {werr:.3} disc {:.5} w {:?}", eval.discrepancy_term, w.as_slice());
        }
    }
    let _ = q_true;
}
