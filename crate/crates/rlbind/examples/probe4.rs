// temporary 3-seed sweep probe, not part of the deliverable
use rlbind::config::parse_config;
use rlbind::pipeline::{evaluate, prepare_data, stage0_pretrain, stage1_fare, stage2_align};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    // args: comma-joined override sets separated by ';' in one arg each
    for group in &args {
        let overrides: Vec<String> = group.split_whitespace().map(|s| s.to_string()).collect();
        let mut acc = [[0.0_f64; 3]; 3]; // [stage][clean, rob05, rob10]
        for seed in 1..=3_u64 {
            let mut all = vec![format!("seed={seed}")];
            all.extend(overrides.iter().cloned());
            let cfg = parse_config("", &all).unwrap();
            let prep = prepare_data(&cfg).unwrap();
            let (m0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
            let r0 = evaluate(&m0, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
            let (m1, _) = stage1_fare(m0, &cfg, &prep.dataset, &prep.train).unwrap();
            let r1 = evaluate(&m1, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
            let (m2, _) = stage2_align(m1, &cfg, &prep.dataset, &prep.train).unwrap();
            let r2 = evaluate(&m2, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
            for (si, r) in [r0, r1, r2].iter().enumerate() {
                acc[si][0] += 100.0 * r.mean_clean_acc() / 3.0;
                acc[si][1] += 100.0 * r.mean_robust_acc("0.05") / 3.0;
                acc[si][2] += 100.0 * r.mean_robust_acc("0.1") / 3.0;
            }
        }
        let a = acc[0][0] - acc[0][2];
        let b = acc[1][1] - acc[0][1];
        let c_rob = acc[2][1] - acc[1][1];
        let c_clean = acc[2][0] - acc[1][0];
        println!(
            "[{group}]\n  means: s0 {:.2?} s1 {:.2?} s2 {:.2?}",
            acc[0], acc[1], acc[2]
        );
        println!(
            "  (a) collapse {a:+.2} {} | (b) harden {b:+.2} {} | (c) align {c_rob:+.2} {} clean {c_clean:+.2} {}",
            if a >= 30.0 { "PASS" } else { "FAIL" },
            if b >= 10.0 { "PASS" } else { "FAIL" },
            if c_rob >= 5.0 { "PASS" } else { "FAIL" },
            if c_clean >= -2.0 { "PASS" } else { "FAIL" },
        );
    }
}
