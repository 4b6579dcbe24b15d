use gls_core::divergences::DiscreteDistribution;
use gls_core::learner::{train, Framework, TrainConfig};
use gls_core::shiftgen::{make_scenario_with, sample, DomainTag, ScenarioOptions, ShiftDirections};

fn dist(v: &[f64]) -> DiscreteDistribution {
    DiscreteDistribution::new(v.to_vec()).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let delta: f64 = args[1].parse().unwrap();
    let cov: f64 = args[2].parse().unwrap();
    let lg: f64 = args[3].parse().unwrap();
    let iters: usize = args[4].parse().unwrap();
    let smooth: f64 = args[5].parse().unwrap();
    let clip: f64 = args[6].parse().unwrap();
    let data_seeds: u64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(3);

    for scen_seed in 1..=8u64 {
        let sc = make_scenario_with(3, 2, delta, dist(&[0.5, 0.3, 0.2]), dist(&[0.3, 0.3, 0.4]), scen_seed,
            ScenarioOptions { covariance_scale: cov, directions: ShiftDirections::PerClass }).unwrap();
        // geometry: distance from each target mean to own vs nearest wrong source mean
        let mut geometry = String::new();
        for y in 0..3 {
            let tm = &sc.target.class_conditional(y).components()[0].mean;
            let own = (tm - &sc.source.class_conditional(y).components()[0].mean).norm();
            let wrong = (0..3).filter(|&o| o != y)
                .map(|o| (tm - &sc.source.class_conditional(o).components()[0].mean).norm())
                .fold(f64::INFINITY, f64::min);
            geometry.push_str(&format!(" {own:.1}/{wrong:.1}"));
        }
        let fws = [Framework::Covariate, Framework::LabelOnly, Framework::ConditionalOnly, Framework::Gls];
        let mut acc: Vec<Vec<f64>> = vec![vec![]; 4];
        let mut warm = vec![];
        for ds in 0..data_seeds {
            let s = sample(&sc.source, 500, 1000 + ds, DomainTag::Source).unwrap();
            let t = sample(&sc.target, 500, 2000 + ds, DomainTag::Target).unwrap();
            for (fi, fw) in fws.iter().enumerate() {
                let mut cfg = TrainConfig::new(*fw, 300 + ds);
                cfg.max_iters = iters;
                cfg.warmup_epochs = Some(40);
                cfg.lambda_g = lg;
                cfg.weight_smoothing = smooth;
                cfg.weight_clip = clip;
                let out = train(&s, &t, &cfg).unwrap();
                acc[fi].push(out.trace.records.last().unwrap().tgt_acc);
                if fi == 0 { warm.push(out.trace.records[39].tgt_acc); }
            }
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let mut order_ok = 0;
        for i in 0..data_seeds as usize {
            if acc[3][i] >= acc[2][i] && acc[2][i] >= acc[0][i] { order_ok += 1; }
        }
        println!("scen {scen_seed} geom{geometry}: warm {:.3} | cov {:.3} lab {:.3} cond {:.3} gls {:.3} | gls-cov {:+.3} ord {}/{}",
            mean(&warm), mean(&acc[0]), mean(&acc[1]), mean(&acc[2]), mean(&acc[3]), mean(&acc[3])-mean(&acc[0]), order_ok, data_seeds);
    }
}
