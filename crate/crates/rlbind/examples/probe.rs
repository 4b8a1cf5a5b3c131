// temporary tuning probe, not part of the deliverable
use rlbind::config::parse_config;
use rlbind::pipeline::{evaluate, prepare_data, stage0_pretrain, stage1_fare, stage2_align};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args[0].parse().unwrap();
    let overrides: Vec<String> = args[1..].to_vec();
    let mut all = vec![format!("seed={seed}"), format!("dataset.seed={}", 50 + seed)];
    all.extend(overrides);
    let cfg = parse_config("", &all).unwrap();
    let prep = prepare_data(&cfg).unwrap();
    let t0 = std::time::Instant::now();
    let (m0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
    let r0 = evaluate(&m0, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
    let (m1, log1) = stage1_fare(m0, &cfg, &prep.dataset, &prep.train).unwrap();
    // summarize stage-1 loss trajectory per modality: first 5 and last 5 step means
    for (modality, losses) in &log1.per_modality {
        if losses.is_empty() {
            continue;
        }
        let head: f64 = losses.iter().take(5).sum::<f64>() / 5.0_f64.min(losses.len() as f64);
        let tail: f64 =
            losses.iter().rev().take(5).sum::<f64>() / 5.0_f64.min(losses.len() as f64);
        let max = losses.iter().cloned().fold(f64::MIN, f64::max);
        println!(
            "stage1 {modality}: {n} steps, head-mean {head:.4}, tail-mean {tail:.4}, max {max:.4}",
            n = losses.len()
        );
    }
    let r1 = evaluate(&m1, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
    let (m2, _) = stage2_align(m1, &cfg, &prep.dataset, &prep.train).unwrap();
    let r2 = evaluate(&m2, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
    for (tag, r) in [("s0", &r0), ("s1", &r1), ("s2", &r2)] {
        println!(
            "{tag}: clean {:5.2}% rob@0.05 {:5.2}% rob@0.1 {:5.2}%",
            100.0 * r.mean_clean_acc(),
            100.0 * r.mean_robust_acc("0.05"),
            100.0 * r.mean_robust_acc("0.1")
        );
    }
    println!("wall {:.1}s", t0.elapsed().as_secs_f64());
}
