use gls_core::divergences::DiscreteDistribution;
use gls_core::learner::{train, Framework, TrainConfig};
use gls_core::shiftgen::{make_translated_scenario, sample, DomainTag};

fn dist(v: &[f64]) -> DiscreteDistribution {
    DiscreteDistribution::new(v.to_vec()).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let smooth: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.9);
    let clip: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2.5);
    let iters: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(300);

    let sc = make_translated_scenario(3, 2, 1.2, dist(&[0.5, 0.3, 0.2]), dist(&[0.3, 0.3, 0.4]), 0.6).unwrap();
    let s = sample(&sc.source, 500, 100, DomainTag::Source).unwrap();
    let t = sample(&sc.target, 500, 200, DomainTag::Target).unwrap();
    let mut cfg = TrainConfig::new(Framework::Gls, 300);
    cfg.max_iters = iters;
    cfg.warmup_epochs = Some(40);
    cfg.lambda_g = 0.5;
    cfg.weight_smoothing = smooth;
    cfg.weight_clip = clip;
    let out = train(&s, &t, &cfg).unwrap();
    for r in out.trace.records.iter().skip(38).step_by(iters / 15) {
        println!("epoch {:3} src {:.3} tgt {:.3} tv_label {:.4} disc {:.5}", r.epoch, r.src_acc, r.tgt_acc, r.tv_label, r.cond_disc);
    }
    println!("final w {:?}", out.weights.as_slice());
    println!("w* = {:?}", sc.oracle_weight_vector());
}
