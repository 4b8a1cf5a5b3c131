// temporary stage-2 variant probe, not part of the deliverable
use rlbind::config::parse_config;
use rlbind::pipeline::{evaluate, prepare_data, stage0_pretrain, stage1_fare, stage2_align};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args[0].parse().unwrap();
    let base: Vec<String> = args[1..].to_vec();
    let mk = |extra: &[&str]| {
        let mut all = vec![format!("seed={seed}"), format!("dataset.seed={}", 50 + seed)];
        all.extend(base.iter().cloned());
        all.extend(extra.iter().map(|s| s.to_string()));
        parse_config("", &all).unwrap()
    };
    let cfg = mk(&[]);
    let prep = prepare_data(&cfg).unwrap();
    let (m0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
    let (m1, _) = stage1_fare(m0, &cfg, &prep.dataset, &prep.train).unwrap();
    let r1 = evaluate(&m1, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
    println!(
        "s1  : clean {:5.2}% rob@0.05 {:5.2}% rob@0.1 {:5.2}%",
        100.0 * r1.mean_clean_acc(),
        100.0 * r1.mean_robust_acc("0.05"),
        100.0 * r1.mean_robust_acc("0.1")
    );
    let variants: Vec<(&str, Vec<&str>)> = vec![
        ("all λ=1   ", vec![]),
        ("λ=2       ", vec!["stage2.lambda=2"]),
        ("λ=4       ", vec!["stage2.lambda=4"]),
    ];
    for (name, extra) in variants {
        let c2 = mk(&extra);
        let (m2, _) = stage2_align(m1.clone(), &c2, &prep.dataset, &prep.train).unwrap();
        let r2 = evaluate(&m2, &c2, &prep.dataset, &prep.eval_subset).unwrap();
        println!(
            "{name}: clean {:5.2}% rob@0.05 {:5.2}% rob@0.1 {:5.2}%",
            100.0 * r2.mean_clean_acc(),
            100.0 * r2.mean_robust_acc("0.05"),
            100.0 * r2.mean_robust_acc("0.1")
        );
    }
}
