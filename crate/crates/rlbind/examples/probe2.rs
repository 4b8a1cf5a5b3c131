// temporary geometry probe, not part of the deliverable
use rlbind::attack::{make_attack, project_linf};
use rlbind::config::parse_config;
use rlbind::encoder::Binding;
use rlbind::graph::Graph;
use rlbind::loss::fare_loss;
use rlbind::pipeline::{evaluate, prepare_data, stage0_pretrain, stage1_fare};
use rlbind::tensor::Tensor;

fn stats(model: &rlbind::pipeline::Model, cfg: &rlbind::config::ExperimentConfig,
         ds: &rlbind::data::Dataset, subset: &[usize], eps: f64, tag: &str) {
    let attack = make_attack("apgd").unwrap();
    for (m, mm) in model.modalities.iter().enumerate() {
        let frozen = mm.encoder.snapshot_frozen();
        let mut norms = Vec::new();
        let mut margins = Vec::new();
        let mut drifts = Vec::new();
        for &i in subset.iter().take(40) {
            let x = ds.view(i, m).clone();
            let e = mm.encoder.encode(&x).unwrap();
            norms.push(e.l2_norm());
            // anchor scores with this modality's scorer
            let mut scores: Vec<f64> = (0..model.anchors.num_classes())
                .map(|c| mm.scorer.score_plain(&e, &model.anchors.anchor(c)).unwrap())
                .collect();
            scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
            margins.push(scores[0] - scores[1]);
            // worst-case embedding drift within the eps ball (eval-strength attack)
            let acfg = cfg.eval_attack_config(eps, 977 + i as u64);
            let mut obj = |z: &Tensor| -> rlbind::Result<(f64, Tensor)> {
                let mut g = Graph::new();
                let zn = g.leaf(z.clone(), true);
                let bound = mm.encoder.bind(&mut g, Binding::Frozen);
                let zp = project_linf(z, &x, eps, (0.0, 1.0));
                let _ = zp;
                let loss = fare_loss(&mut g, &bound, &frozen, &x, zn, eps)?;
                g.backward(loss)?;
                Ok((g.value(loss).item(), g.grad(zn).unwrap()))
            };
            let out = attack.run(&mut obj, &x, &acfg).unwrap();
            drifts.push(out.objective.sqrt());
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{tag} {}: ‖φ‖ mean {:.3}, margin mean {:.3} (min {:.3}), worst-drift mean {:.3} @eps={eps}",
            mm.name, mean(&norms), mean(&margins),
            margins.iter().cloned().fold(f64::MAX, f64::min), mean(&drifts)
        );
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args[0].parse().unwrap();
    let overrides: Vec<String> = args[1..].to_vec();
    let mut all = vec![format!("seed={seed}"), format!("dataset.seed={}", 50 + seed)];
    all.extend(overrides);
    let cfg = parse_config("", &all).unwrap();
    let prep = prepare_data(&cfg).unwrap();
    let (m0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
    let r0 = evaluate(&m0, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
    stats(&m0, &cfg, &prep.dataset, &prep.eval_subset, 0.05, "s0");
    let (m1, _) = stage1_fare(m0, &cfg, &prep.dataset, &prep.train).unwrap();
    let r1 = evaluate(&m1, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
    stats(&m1, &cfg, &prep.dataset, &prep.eval_subset, 0.05, "s1");
    for (tag, r) in [("s0", &r0), ("s1", &r1)] {
        println!(
            "{tag}: clean {:5.2}% rob@0.05 {:5.2}% rob@0.1 {:5.2}%",
            100.0 * r.mean_clean_acc(),
            100.0 * r.mean_robust_acc("0.05"),
            100.0 * r.mean_robust_acc("0.1")
        );
    }
}
