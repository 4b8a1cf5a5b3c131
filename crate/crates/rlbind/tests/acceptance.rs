//! Release gate. Each test checks one numbered acceptance criterion and
//! prints a single `criterion N PASS/FAIL: …` line with the measured
//! numbers, so a test-runner log doubles as the acceptance report.

use std::time::Instant;

use rand::Rng;

use rlbind::attack::{make_attack, AttackConfig, AttackOutcome};
use rlbind::config::{parse_config, ExperimentConfig};
use rlbind::encoder::{AnchorMatrix, Binding, Encoder};
use rlbind::gradcheck::{finite_difference, max_grad_error};
use rlbind::loss::{
    check_cosine_l2_bound, fare_loss, infonce, make_alignment, stage2_objective, Alignment,
    Stage2Config, ALIGNMENT_NAMES,
};
use rlbind::pipeline::{
    evaluate, load_model, prepare_data, run_ablation_grid, save_model, stage0_pretrain,
    stage1_fare, stage2_align, write_metrics, Model, RunMetrics,
};
use rlbind::rng;
use rlbind::scorer::{make_scorer, Scorer, ScorerInit, SCORER_NAMES};
use rlbind::{Graph, Tensor};

const FD_REL: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-8;
const FD_STEP: f64 = 1e-5;

/// Central differences at the default step, re-probed at a 100x smaller
/// step for instances that miss the band. A probe that straddles a
/// relu/abs kink is an artifact of the step size and converges under the
/// finer probe; a wrong analytic gradient stays wrong at every step.
///
/// The error is relative on well-scaled coordinates and degrades to an
/// absolute comparison at the `FD_FLOOR` scale: a pair passes when
/// `|a − n| ≤ max(FD_FLOOR, FD_REL · max(|a|, |n|))`, so exactly-zero
/// gradients are not measured against finite-difference roundoff noise.
fn fd_error_refined<F>(mut f: F, analytic: &[f64], at: &[f64]) -> f64
where
    F: FnMut(&[f64]) -> rlbind::Result<f64>,
{
    let floor_scale = FD_FLOOR / FD_REL;
    let coarse = finite_difference(&mut f, at, FD_STEP).unwrap();
    let err = max_grad_error(analytic, &coarse, floor_scale);
    if err <= FD_REL {
        return err;
    }
    let fine = finite_difference(&mut f, at, FD_STEP / 100.0).unwrap();
    err.min(max_grad_error(analytic, &fine, floor_scale))
}

fn verdict(criterion: u32, ok: bool, detail: &str) {
    println!("criterion {criterion} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} FAIL: {detail}");
}

fn t(v: &[f64]) -> Tensor {
    Tensor::vector(v.to_vec()).unwrap()
}

fn rand_vec<R: Rng>(r: &mut R, d: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..d).map(|_| r.gen_range(lo..hi)).collect()
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

// ---- criterion 1: finite-difference gradient suite ---------------------------

fn scorer_params_flat(s: &dyn Scorer) -> Vec<f64> {
    s.named_tensors("p")
        .iter()
        .flat_map(|(_, t)| t.data().to_vec())
        .collect()
}

fn scorer_set_flat(s: &mut Box<dyn Scorer>, template: &[(String, Tensor)], flat: &[f64]) {
    let mut off = 0;
    let rebuilt: Vec<(String, Tensor)> = template
        .iter()
        .map(|(name, t0)| {
            let data = flat[off..off + t0.len()].to_vec();
            off += t0.len();
            (name.clone(), Tensor::new(t0.shape().to_vec(), data).unwrap())
        })
        .collect();
    s.load_named("p", &rebuilt).unwrap();
}

/// Taped score gradients (embeddings + scorer parameters) vs central
/// differences of the graph-free scoring path.
fn scorer_fd_error(name: &str, d: usize, seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let init = ScorerInit { alpha_trainable: name == "scaled_dot", mlp_hidden: 5, seed };
    let scorer = make_scorer(name, d, &init).unwrap();
    let e1 = rand_vec(&mut r, d, -1.5, 1.5);
    let e2 = rand_vec(&mut r, d, -1.5, 1.5);

    let mut g = Graph::new();
    let n1 = g.leaf(t(&e1), true);
    let n2 = g.leaf(t(&e2), true);
    let binding = scorer.bind(&mut g, true);
    let s = scorer.score(&mut g, &binding, n1, n2).unwrap();
    g.backward(s).unwrap();

    let mut analytic: Vec<f64> = Vec::new();
    analytic.extend_from_slice(g.grad(n1).unwrap().data());
    analytic.extend_from_slice(g.grad(n2).unwrap().data());
    // parameter gradients recovered through one unit-rate descent step
    let before = scorer_params_flat(scorer.as_ref());
    let mut stepped = scorer.clone();
    stepped.apply_sgd(&binding, &g, 1.0).unwrap();
    let after = scorer_params_flat(stepped.as_ref());
    analytic.extend(before.iter().zip(&after).map(|(b, a)| b - a));

    let template = scorer.named_tensors("p");
    let mut flat: Vec<f64> = e1.iter().chain(&e2).copied().collect();
    flat.extend_from_slice(&before);
    fd_error_refined(
        |v: &[f64]| {
            let (a, rest) = v.split_at(d);
            let (b, pv) = rest.split_at(d);
            let mut sc = scorer.clone();
            scorer_set_flat(&mut sc, &template, pv);
            sc.score_plain(&t(a), &t(b))
        },
        &analytic,
        &flat,
    )
}

fn infonce_fd_error(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let (k, d, tau) = (3usize, 4usize, 0.5);
    let ms: Vec<Vec<f64>> = (0..k).map(|_| rand_vec(&mut r, d, -1.0, 1.0)).collect();
    let ts: Vec<Vec<f64>> = (0..k).map(|_| rand_vec(&mut r, d, -1.0, 1.0)).collect();

    let mut g = Graph::new();
    let mn: Vec<_> = ms.iter().map(|v| g.leaf(t(v), true)).collect();
    let tn: Vec<_> = ts.iter().map(|v| g.leaf(t(v), true)).collect();
    let loss = infonce(&mut g, &mn, &tn, tau).unwrap();
    g.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for n in mn.iter().chain(&tn) {
        analytic.extend_from_slice(g.grad(*n).unwrap().data());
    }

    let flat: Vec<f64> = ms.iter().chain(&ts).flatten().copied().collect();
    fd_error_refined(
        |v: &[f64]| {
            let mut g = Graph::new();
            let mn: Vec<_> = (0..k).map(|i| g.leaf(t(&v[i * d..(i + 1) * d]), false)).collect();
            let tn: Vec<_> =
                (0..k).map(|i| g.leaf(t(&v[(k + i) * d..(k + i + 1) * d]), false)).collect();
            let l = infonce(&mut g, &mn, &tn, tau)?;
            Ok(g.value(l).item())
        },
        &analytic,
        &flat,
    )
}

fn encoder_params_flat(e: &Encoder) -> Vec<f64> {
    let mut out = Vec::new();
    for l in e.layers() {
        out.extend_from_slice(l.weight.data());
        out.extend_from_slice(l.bias.data());
    }
    out
}

fn encoder_set_flat(e: &mut Encoder, flat: &[f64]) {
    let mut off = 0;
    for l in e.layers_mut() {
        for slot in [&mut l.weight, &mut l.bias] {
            let n = slot.len();
            slot.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
    assert_eq!(off, flat.len());
}

/// Gradients of the hardening distance wrt the attacked input and all
/// trainable-encoder weights, vs central differences of the plain forward.
fn fare_fd_error(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let ft = Encoder::new(2, &[5], 3, &mut r);
    let org = Encoder::new(2, &[5], 3, &mut r).snapshot_frozen();
    let eps = 0.1;
    let x = t(&rand_vec(&mut r, 2, 0.2, 0.8));
    let z0: Vec<f64> = x.data().iter().map(|&xi| xi + r.gen_range(-eps..eps) * 0.99).collect();

    let mut g = Graph::new();
    let zn = g.leaf(t(&z0), true);
    let bound = ft.bind(&mut g, Binding::Trainable);
    let loss = fare_loss(&mut g, &bound, &org, &x, zn, eps).unwrap();
    g.backward(loss).unwrap();

    let mut analytic = g.grad(zn).unwrap().data().to_vec();
    let before = encoder_params_flat(&ft);
    let mut stepped = ft.clone();
    stepped.apply_sgd(&bound, &g, 1.0).unwrap();
    let after = encoder_params_flat(&stepped);
    analytic.extend(before.iter().zip(&after).map(|(b, a)| b - a));

    let mut flat = z0.clone();
    flat.extend_from_slice(&before);
    fd_error_refined(
        |v: &[f64]| {
            let (zp, pv) = v.split_at(2);
            let mut enc = ft.clone();
            encoder_set_flat(&mut enc, pv);
            let e_ft = enc.encode(&t(zp))?;
            let e_org = org.encode(&x)?;
            Ok(e_ft
                .data()
                .iter()
                .zip(e_org.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum())
        },
        &analytic,
        &flat,
    )
}

fn align_fd_error(name: &str, seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let c = 5;
    let align = make_alignment(name, 0.7).unwrap();
    let s1 = rand_vec(&mut r, c, -2.0, 2.0);
    let s2 = rand_vec(&mut r, c, -2.0, 2.0);

    let mut g = Graph::new();
    let n1 = g.leaf(t(&s1), true);
    let n2 = g.leaf(t(&s2), true);
    let loss = align.loss(&mut g, n1, n2).unwrap();
    g.backward(loss).unwrap();
    let mut analytic = g.grad(n1).unwrap().data().to_vec();
    analytic.extend_from_slice(g.grad(n2).unwrap().data());

    let flat: Vec<f64> = s1.iter().chain(&s2).copied().collect();
    fd_error_refined(
        |v: &[f64]| {
            let mut g = Graph::new();
            let n1 = g.leaf(t(&v[..c]), false);
            let n2 = g.leaf(t(&v[c..]), false);
            let l = align.loss(&mut g, n1, n2)?;
            Ok(g.value(l).item())
        },
        &analytic,
        &flat,
    )
}

/// The composite stage-2 objective: gradients wrt both embeddings and the
/// scorer parameters, rotating through parameterized scorers and all
/// alignment penalties.
fn stage2_fd_error(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let (d, c) = (5usize, 4usize);
    let anchors = AnchorMatrix::build(seed ^ 0x9e37, c, d).unwrap();
    let scorer_name = ["bilinear", "mlp", "scaled_dot"][(seed % 3) as usize];
    let init = ScorerInit { alpha_trainable: true, mlp_hidden: 4, seed };
    let scorer = make_scorer(scorer_name, d, &init).unwrap();
    let align = make_alignment(ALIGNMENT_NAMES[(seed % 3) as usize], 0.8).unwrap();
    let s2cfg = Stage2Config {
        lambda: 0.7,
        include_clean_ce: true,
        include_adv_ce: true,
        include_cma: true,
    };
    let e_clean = rand_vec(&mut r, d, -1.0, 1.0);
    let e_adv = rand_vec(&mut r, d, -1.0, 1.0);
    let target = (seed as usize) % c;

    let mut g = Graph::new();
    let nc = g.leaf(t(&e_clean), true);
    let na = g.leaf(t(&e_adv), true);
    let binding = scorer.bind(&mut g, true);
    let loss = stage2_objective(
        &mut g, scorer.as_ref(), &binding, align.as_ref(), nc, na, &anchors, target, &s2cfg,
    )
    .unwrap();
    g.backward(loss).unwrap();

    let mut analytic = g.grad(nc).unwrap().data().to_vec();
    analytic.extend_from_slice(g.grad(na).unwrap().data());
    let before = scorer_params_flat(scorer.as_ref());
    let mut stepped = scorer.clone();
    stepped.apply_sgd(&binding, &g, 1.0).unwrap();
    let after = scorer_params_flat(stepped.as_ref());
    analytic.extend(before.iter().zip(&after).map(|(b, a)| b - a));

    let template = scorer.named_tensors("p");
    let mut flat: Vec<f64> = e_clean.iter().chain(&e_adv).copied().collect();
    flat.extend_from_slice(&before);
    fd_error_refined(
        |v: &[f64]| {
            let (a, rest) = v.split_at(d);
            let (b, pv) = rest.split_at(d);
            let mut sc = scorer.clone();
            scorer_set_flat(&mut sc, &template, pv);
            let mut g = Graph::new();
            let nc = g.leaf(t(a), false);
            let na = g.leaf(t(b), false);
            let binding = sc.bind(&mut g, false);
            let l = stage2_objective(
                &mut g, sc.as_ref(), &binding, align.as_ref(), nc, na, &anchors, target, &s2cfg,
            )?;
            Ok(g.value(l).item())
        },
        &analytic,
        &flat,
    )
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_case = String::new();
    let mut cases = 0usize;
    let mut track = |label: String, err: f64| {
        if err > worst {
            worst = err;
            worst_case = label;
        }
        cases += 1;
    };

    for (si, name) in SCORER_NAMES.iter().enumerate() {
        for inst in 0..20u64 {
            track(
                format!("scorer {name} #{inst}"),
                scorer_fd_error(name, 6, 1000 + 97 * si as u64 + inst),
            );
        }
    }
    for inst in 0..20u64 {
        track(format!("infonce #{inst}"), infonce_fd_error(2000 + inst));
    }
    for inst in 0..20u64 {
        track(format!("fare #{inst}"), fare_fd_error(3000 + inst));
    }
    for (ai, name) in ALIGNMENT_NAMES.iter().enumerate() {
        for inst in 0..20u64 {
            track(
                format!("align {name} #{inst}"),
                align_fd_error(name, 4000 + 137 * ai as u64 + inst),
            );
        }
    }
    for inst in 0..20u64 {
        track(format!("stage2 objective #{inst}"), stage2_fd_error(5000 + inst));
    }

    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        worst <= FD_REL && secs < 60.0,
        &format!(
            "{cases} gradient checks (6 scorers + 5 loss forms x 20 instances), \
             max relative error {worst:.2e} at [{worst_case}], {secs:.1} s"
        ),
    );
}

// ---- criterion 2: analytic identities ----------------------------------------

fn align_value(a: &dyn Alignment, s1: &[f64], s2: &[f64]) -> f64 {
    let mut g = Graph::new();
    let n1 = g.leaf(t(s1), false);
    let n2 = g.leaf(t(s2), false);
    let l = a.loss(&mut g, n1, n2).unwrap();
    g.value(l).item()
}

#[test]
fn criterion_2_analytic_identities() {
    let tol = 1e-12;
    let mut failures: Vec<String> = Vec::new();
    let mut r = rng::seeded(42);
    let d = 8;
    let init = ScorerInit::default();
    let dot = make_scorer("dot", d, &init).unwrap();
    let cosine = make_scorer("cosine", d, &init).unwrap();
    let norm_euclid = make_scorer("norm_euclid", d, &init).unwrap();
    let bilinear = make_scorer("bilinear", d, &init).unwrap(); // fresh weight = identity

    for i in 0..1000 {
        let u = t(&rand_vec(&mut r, d, -2.0, 2.0));
        let v = t(&rand_vec(&mut r, d, -2.0, 2.0));
        let c = cosine.score_plain(&u, &v).unwrap();
        if !(-1.0 - tol..=1.0 + tol).contains(&c) {
            failures.push(format!("cosine out of [-1,1] at pair {i}: {c}"));
        }
        let ne = norm_euclid.score_plain(&u, &v).unwrap();
        if !(-1.0 - tol..=1.0 + tol).contains(&ne) {
            failures.push(format!("norm-euclid out of [-1,1] at pair {i}: {ne}"));
        }
        let diff = (bilinear.score_plain(&u, &v).unwrap() - dot.score_plain(&u, &v).unwrap()).abs();
        if diff > tol {
            failures.push(format!("identity-weight bilinear != dot at pair {i}: diff {diff}"));
        }
    }

    // orthonormal pair: the normalized-euclidean score equals 1 − √2 < 0,
    // so the score range genuinely extends below zero
    let ne2 = make_scorer("norm_euclid", 2, &init).unwrap();
    let counter = ne2.score_plain(&t(&[1.0, 0.0]), &t(&[0.0, 1.0])).unwrap();
    if (counter - (1.0 - 2f64.sqrt())).abs() > tol || counter >= 0.0 {
        failures.push(format!("orthonormal-pair score {counter}, want 1-sqrt(2)"));
    }

    let kl = make_alignment("kl", 0.9).unwrap();
    let l1 = make_alignment("l1", 1.0).unwrap();
    let l2 = make_alignment("l2", 1.0).unwrap();
    let c = 6;
    for i in 0..200 {
        let s1 = rand_vec(&mut r, c, -2.0, 2.0);
        let s2 = rand_vec(&mut r, c, -2.0, 2.0);
        let base = align_value(kl.as_ref(), &s1, &s2);
        // softmax normalization makes the divergence shift-invariant
        let s1s: Vec<f64> = s1.iter().map(|x| x + 0.7).collect();
        let s2s: Vec<f64> = s2.iter().map(|x| x - 1.3).collect();
        let shifted = align_value(kl.as_ref(), &s1s, &s2s);
        if (base - shifted).abs() > tol {
            failures.push(format!("kl shift-variance at pair {i}: {base} vs {shifted}"));
        }
        let swapped = align_value(kl.as_ref(), &s2, &s1);
        if (base - swapped).abs() > tol {
            failures.push(format!("kl asymmetry at pair {i}: {base} vs {swapped}"));
        }
        // zero iff the normalized distributions agree; positive otherwise
        if align_value(kl.as_ref(), &s1, &s1s).abs() > tol {
            failures.push(format!("kl nonzero on a shifted copy at pair {i}"));
        }
        if base <= 0.0 {
            failures.push(format!("kl not positive on distinct distributions at pair {i}"));
        }
        for (name, a) in [("l1", &l1), ("l2", &l2)] {
            if align_value(a.as_ref(), &s1, &s1) != 0.0 {
                failures.push(format!("{name} self-penalty nonzero at pair {i}"));
            }
            if align_value(a.as_ref(), &s1, &s2) <= 0.0 {
                failures.push(format!("{name} not positive on distinct vectors at pair {i}"));
            }
        }
    }

    // score drift is controlled by embedding drift: |cos(u,a) − cos(v,a)|
    // ≤ (2/max(‖u‖,‖v‖))·‖u−v‖₂ across random triples
    let mut bound_checked = 0;
    let mut min_slack = f64::INFINITY;
    for i in 0..10_000 {
        let u = t(&rand_vec(&mut r, d, -2.0, 2.0));
        let v = t(&rand_vec(&mut r, d, -2.0, 2.0));
        let a = t(&rand_vec(&mut r, d, -2.0, 2.0));
        let (holds, slack) = check_cosine_l2_bound(&u, &v, &a).unwrap();
        if !holds {
            failures.push(format!("cosine-drift bound violated at triple {i}: slack {slack}"));
        }
        min_slack = min_slack.min(slack);
        bound_checked += 1;
    }

    verdict(
        2,
        failures.is_empty(),
        &format!(
            "score ranges, identity-weight bilinear ≡ dot, orthonormal counterexample \
             1-sqrt(2), kl shift-invariance/symmetry, zero-iff conditions, and \
             {bound_checked} drift-bound triples (min slack {min_slack:.3e}); failures: {:?}",
            failures
        ),
    );
}

// ---- criterion 3: attack oracles ----------------------------------------------

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn feasible(out: &AttackOutcome, x: &Tensor, eps: f64) -> bool {
    out.z
        .data()
        .iter()
        .zip(x.data())
        .all(|(z, x)| (z - x).abs() <= eps + 1e-12 && (0.0..=1.0).contains(z))
}

#[test]
fn criterion_3_attack_oracles() {
    let mut failures: Vec<String> = Vec::new();
    let mut feasibility_checks = 0usize;

    // closed-form corner of a linear objective, hit exactly
    for name in ["pgd", "apgd"] {
        let attack = make_attack(name).unwrap();
        let mut r = rng::seeded(17);
        for inst in 0..20 {
            let d = r.gen_range(2..7);
            let x: Vec<f64> = rand_vec(&mut r, d, 0.3, 0.7);
            let w: Vec<f64> = (0..d)
                .map(|_| {
                    let v: f64 = r.gen_range(0.1..2.0);
                    if r.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let eps = r.gen_range(0.01..0.15);
            let wc = w.clone();
            let mut obj = |z: &Tensor| {
                let val = z.data().iter().zip(&wc).map(|(a, b)| a * b).sum::<f64>();
                Ok((val, t(&wc)))
            };
            let cfg = AttackConfig::train(eps, inst);
            let out = attack.run(&mut obj, &t(&x), &cfg).unwrap();
            let best: Vec<f64> = x.iter().zip(&w).map(|(xi, wi)| xi + eps * sign0(*wi)).collect();
            let best_val = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                + eps * w.iter().map(|b| b.abs()).sum::<f64>();
            let coord_ok = out
                .z
                .data()
                .iter()
                .zip(&best)
                .all(|(got, want)| (got - want).abs() <= 4.0 * f64::EPSILON * want.abs().max(1.0));
            let val_ok = (out.objective - best_val).abs() <= 1e-13 * best_val.abs().max(1.0);
            if !(coord_ok && val_ok) {
                failures.push(format!(
                    "{name} missed the linear optimum on instance {inst}: \
                     objective {} vs {best_val}",
                    out.objective
                ));
            }
            if !feasible(&out, &t(&x), eps) {
                failures.push(format!("{name} infeasible on linear instance {inst}"));
            }
            feasibility_checks += 1;
        }
    }

    // 1-D hardening inner problem: the adaptive attack must reach ≥ 95% of
    // an exhaustive 10,001-point grid search over the feasible interval
    let mut r = rng::seeded(33);
    let ft = Encoder::new(1, &[8], 3, &mut r);
    let org = Encoder::new(1, &[8], 3, &mut r).snapshot_frozen();
    let x = t(&[0.5]);
    let eps = 0.3;
    let plain = |z: f64| -> f64 {
        let e = ft.encode(&t(&[z])).unwrap();
        let o = org.encode(&x).unwrap();
        e.data().iter().zip(o.data()).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let (lo, hi) = (0.2, 0.8);
    let grid_max = (0..=10_000)
        .map(|i| plain(lo + (hi - lo) * i as f64 / 10_000.0))
        .fold(f64::MIN, f64::max);
    let mut obj = |z: &Tensor| {
        let mut g = Graph::new();
        let zn = g.leaf(z.clone(), true);
        let bound = ft.bind(&mut g, Binding::Frozen);
        let l = fare_loss(&mut g, &bound, &org, &x, zn, eps)?;
        g.backward(l)?;
        Ok((g.value(l).item(), g.grad(zn)?))
    };
    let apgd = make_attack("apgd").unwrap();
    let out = apgd.run(&mut obj, &x, &AttackConfig::eval(eps, 7)).unwrap();
    let ratio = out.objective / grid_max;
    if !(grid_max > 0.0 && ratio >= 0.95) {
        failures.push(format!(
            "grid-search maximum {grid_max:.6} only matched to {:.1}%",
            100.0 * ratio
        ));
    }
    if !feasible(&out, &x, eps) {
        failures.push("infeasible 1-D hardening adversary".into());
    }
    feasibility_checks += 1;

    // feasibility sweep: both attacks, both iteration profiles, nonlinear
    // objective, inputs sitting anywhere in the valid box
    let mut r = rng::seeded(99);
    for name in ["pgd", "apgd"] {
        let attack = make_attack(name).unwrap();
        for inst in 0..15u64 {
            let d = r.gen_range(3..8);
            let x = t(&rand_vec(&mut r, d, 0.0, 1.0));
            let eps = [0.02, 0.1, 0.3][(inst % 3) as usize];
            let enc = Encoder::new(d, &[6], 4, &mut r);
            for cfg in [AttackConfig::train(eps, inst), AttackConfig::eval(eps, inst)] {
                let mut obj = |z: &Tensor| {
                    let mut g = Graph::new();
                    let zn = g.leaf(z.clone(), true);
                    let bound = enc.bind(&mut g, Binding::Frozen);
                    let e = bound.forward(&mut g, zn)?;
                    let n = g.l2norm(e)?;
                    g.backward(n)?;
                    Ok((g.value(n).item(), g.grad(zn)?))
                };
                let out = attack.run(&mut obj, &x, &cfg).unwrap();
                if !feasible(&out, &x, eps) {
                    failures.push(format!("{name} infeasible on sweep instance {inst}"));
                }
                feasibility_checks += 1;
            }
        }
    }

    verdict(
        3,
        failures.is_empty(),
        &format!(
            "40 exact linear-optimum hits, 1-D grid-search match {:.1}% \
             (grid max {grid_max:.4}), {feasibility_checks} feasibility checks; failures: {:?}",
            100.0 * ratio,
            failures
        ),
    );
}

// ---- criterion 4: stage-over-stage robustness trends ---------------------------

struct SeedTrend {
    seed: u64,
    stage0: RunMetrics,
    stage1: RunMetrics,
    stage2: RunMetrics,
    secs: f64,
}

// The dataset stays fixed (default recipe) while the run seed varies, the
// way the reference tables keep the benchmark fixed across training runs.
fn default_cfg(seed: u64) -> ExperimentConfig {
    parse_config("", &[format!("seed={seed}")]).unwrap()
}

/// Full three-stage pipeline at the default experiment scale, repeated for
/// three seeds and forced onto one worker thread so the wall-clock budget
/// reflects a single core.
fn default_scale_runs() -> &'static Vec<SeedTrend> {
    use std::sync::OnceLock;
    static RUNS: OnceLock<Vec<SeedTrend>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        [1u64, 2, 3]
            .iter()
            .map(|&seed| {
                let cfg = default_cfg(seed);
                pool.install(|| {
                    let start = Instant::now();
                    let prep = prepare_data(&cfg).unwrap();
                    let (m0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
                    let r0 = evaluate(&m0, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
                    let (m1, _) = stage1_fare(m0, &cfg, &prep.dataset, &prep.train).unwrap();
                    let r1 = evaluate(&m1, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
                    let (m2, _) = stage2_align(m1, &cfg, &prep.dataset, &prep.train).unwrap();
                    let r2 = evaluate(&m2, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
                    SeedTrend {
                        seed,
                        stage0: r0,
                        stage1: r1,
                        stage2: r2,
                        secs: start.elapsed().as_secs_f64(),
                    }
                })
            })
            .collect()
    })
}

fn avg(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_4_stage_trends() {
    let runs = default_scale_runs();
    // The hardening/alignment trends are judged at the ε the pipeline trains
    // at; the attack-collapse trend is judged at the larger evaluation ε.
    let matched = default_cfg(1).train.epsilon.label.clone();
    let matched = matched.as_str();
    let big = "0.1";
    let clean0 = avg(runs.iter().map(|r| r.stage0.mean_clean_acc()));
    let clean1 = avg(runs.iter().map(|r| r.stage1.mean_clean_acc()));
    let clean2 = avg(runs.iter().map(|r| r.stage2.mean_clean_acc()));
    let rob0_big = avg(runs.iter().map(|r| r.stage0.mean_robust_acc(big)));
    let rob0 = avg(runs.iter().map(|r| r.stage0.mean_robust_acc(matched)));
    let rob1 = avg(runs.iter().map(|r| r.stage1.mean_robust_acc(matched)));
    let rob2 = avg(runs.iter().map(|r| r.stage2.mean_robust_acc(matched)));
    let max_secs = runs.iter().map(|r| r.secs).fold(0.0, f64::max);

    let collapse = clean0 - rob0_big;
    let harden_gain = rob1 - rob0;
    let align_gain = rob2 - rob1;
    let clean_cost = clean1 - clean2;

    let ok = collapse >= 0.30
        && harden_gain >= 0.10
        && align_gain >= 0.05
        && clean_cost <= 0.02
        && max_secs <= 600.0;
    verdict(
        4,
        ok,
        &format!(
            "3-seed averages — attack collapse {} at eps {big} (clean {} -> robust {}), \
             at matched eps {matched}: hardening gain +{} ({} -> {}), alignment gain +{} (-> {}), \
             clean cost {} (clean {} -> {}), slowest pipeline {max_secs:.0} s \
             [seeds {:?}]",
            pct(collapse),
            pct(clean0),
            pct(rob0_big),
            pct(harden_gain),
            pct(rob0),
            pct(rob1),
            pct(align_gain),
            pct(rob2),
            pct(clean_cost),
            pct(clean1),
            pct(clean2),
            runs.iter().map(|r| r.seed).collect::<Vec<_>>()
        ),
    );
}

// ---- criterion 5: objective-term ablation ordering -----------------------------

const REDUCED: &str = r#"
seed = 11
[dataset]
seed = 61
n_classes = 6
samples_per_class = 50
latent_dim = 10
[[dataset.modalities]]
name = "image"
input_dim = 16
mixing_seed = 301
noise_std = 0.25
[[dataset.modalities]]
name = "audio"
input_dim = 14
mixing_seed = 302
noise_std = 0.3
tanh = true
[encoder]
hidden = [32]
embed_dim = 12
[train]
batch_size = 16
stage0_epochs = 4
stage2_epochs = 3
epsilon = 0.1
attack_iters = 10
[eval]
epsilons = [0.05, 0.1]
attack_iters = 40
k_per_class = 8
"#;

fn reduced_cfg(extra: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    parse_config(REDUCED, &overrides).unwrap()
}

#[test]
fn criterion_5_objective_term_ordering() {
    // identical seeds and start model; only the objective flags vary
    let cfg_clean = reduced_cfg(&["stage2.adv_ce=false", "stage2.cma=false"]);
    let cfg_adv = reduced_cfg(&["stage2.cma=false"]);
    let cfg_full = reduced_cfg(&[]);

    let prep = prepare_data(&cfg_clean).unwrap();
    let (m0, _) = stage0_pretrain(&cfg_clean, &prep.dataset, &prep.train).unwrap();

    let run = |cfg: &ExperimentConfig| -> RunMetrics {
        let (m, _) = stage2_align(m0.clone(), cfg, &prep.dataset, &prep.train).unwrap();
        evaluate(&m, cfg, &prep.dataset, &prep.eval_subset).unwrap()
    };
    let r_clean = run(&cfg_clean);
    let r_adv = run(&cfg_adv);
    let r_full = run(&cfg_full);

    let clean_only_clean = r_clean.mean_clean_acc();
    let adv_clean = r_adv.mean_clean_acc();
    let clean_only_rob = r_clean.mean_robust_acc("0.05");
    let adv_rob = r_adv.mean_robust_acc("0.05");
    let cma_small = r_full.mean_robust_acc("0.05") - r_adv.mean_robust_acc("0.05");
    let cma_big = r_full.mean_robust_acc("0.1") - r_adv.mean_robust_acc("0.1");

    let ok = clean_only_clean >= adv_clean
        && adv_rob >= 1.5 * clean_only_rob
        && cma_small >= -0.01
        && cma_big >= -0.01;
    verdict(
        5,
        ok,
        &format!(
            "clean-only fit: clean {} robust@0.05 {}; +adversarial term: clean {} \
             robust@0.05 {} ({:.2}x); alignment term shifts robust by {:+.2}pp @0.05 \
             and {:+.2}pp @0.1",
            pct(clean_only_clean),
            pct(clean_only_rob),
            pct(adv_clean),
            pct(adv_rob),
            if clean_only_rob > 0.0 { adv_rob / clean_only_rob } else { f64::INFINITY },
            100.0 * cma_small,
            100.0 * cma_big
        ),
    );
}

// ---- criterion 6: scorer x alignment grid ---------------------------------------

const GRID_BASE: &str = r#"
seed = 21
[dataset]
seed = 71
n_classes = 6
samples_per_class = 40
latent_dim = 10
[[dataset.modalities]]
name = "image"
input_dim = 16
mixing_seed = 301
noise_std = 0.25
[[dataset.modalities]]
name = "audio"
input_dim = 14
mixing_seed = 302
noise_std = 0.3
tanh = true
[encoder]
hidden = [24]
embed_dim = 10
[train]
batch_size = 8
stage0_epochs = 4
stage1_epochs = 4
epsilon = 0.1
attack_iters = 10
[eval]
epsilons = [0.05, 0.1]
attack_iters = 30
k_per_class = 5
"#;

#[test]
fn criterion_6_scorer_alignment_grid() {
    let mut failures: Vec<String> = Vec::new();
    let mut wins = 0usize;
    let mut rank_lines: Vec<String> = Vec::new();
    let param_free: Vec<&str> = SCORER_NAMES
        .iter()
        .copied()
        .filter(|n| {
            make_scorer(n, 10, &ScorerInit::default()).unwrap().param_count() == 0
        })
        .collect();

    for seed in [21u64, 22, 23] {
        let base = parse_config(
            GRID_BASE,
            &[format!("seed={seed}"), format!("dataset.seed={}", 50 + seed)],
        )
        .unwrap();
        let prep = prepare_data(&base).unwrap();
        let axes = vec![
            (
                "scorer".to_string(),
                SCORER_NAMES.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            ),
            (
                "alignment".to_string(),
                ALIGNMENT_NAMES.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            ),
        ];
        let outcomes =
            run_ablation_grid(&base, &axes, &prep.dataset, &prep.train, &prep.eval_subset)
                .unwrap();
        if outcomes.len() != 18 {
            failures.push(format!("seed {seed}: {} cells, want 18", outcomes.len()));
        }
        for o in &outcomes {
            if let Err(msg) = &o.result {
                failures.push(format!(
                    "seed {seed}: cell {}x{} failed: {msg}",
                    o.cell.scorer, o.cell.alignment
                ));
            }
        }
        if !failures.is_empty() {
            continue;
        }
        // mean robust accuracy per scorer across its alignment cells,
        // modalities, and budgets
        let mean_robust = |name: &str| -> f64 {
            let cells: Vec<f64> = outcomes
                .iter()
                .filter(|o| o.cell.scorer == name)
                .flat_map(|o| {
                    o.result
                        .as_ref()
                        .unwrap()
                        .cells
                        .iter()
                        .map(|c| c.robust_acc())
                        .collect::<Vec<_>>()
                })
                .collect();
            cells.iter().sum::<f64>() / cells.len() as f64
        };
        let dot_based = mean_robust("dot").max(mean_robust("scaled_dot"));
        let rivals = param_free
            .iter()
            .filter(|n| !n.starts_with("dot") && !n.starts_with("scaled_dot"))
            .map(|n| mean_robust(n))
            .fold(f64::MIN, f64::max);
        if dot_based >= rivals {
            wins += 1;
        }
        rank_lines.push(format!(
            "seed {seed}: {}",
            SCORER_NAMES
                .iter()
                .map(|n| format!("{n} {}", pct(mean_robust(n))))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }

    let ok = failures.is_empty() && wins >= 2;
    verdict(
        6,
        ok,
        &format!(
            "18-cell scorer x alignment grid over 3 seeds, all cells trained; \
             dot-family tops the parameter-free scorers on {wins}/3 seeds. \
             {}; failures: {:?}",
            rank_lines.join(" | "),
            failures
        ),
    );
}

// ---- criterion 7: low-rank adapters vs full fine-tuning --------------------------

const ADAPTER_BASE: &str = r#"
seed = 31
[dataset]
seed = 81
n_classes = 6
samples_per_class = 40
latent_dim = 10
[[dataset.modalities]]
name = "image"
input_dim = 20
mixing_seed = 301
noise_std = 0.25
[[dataset.modalities]]
name = "audio"
input_dim = 18
mixing_seed = 302
noise_std = 0.3
tanh = true
[encoder]
hidden = [48, 48]
embed_dim = 12
[train]
batch_size = 8
stage0_epochs = 4
stage1_epochs = 6
epsilon = 0.1
attack_iters = 10
[eval]
epsilons = [0.05, 0.1]
attack_iters = 30
k_per_class = 5
"#;

#[test]
fn criterion_7_adapter_vs_full_finetune() {
    let mut full_small = Vec::new();
    let mut full_big = Vec::new();
    let mut lora_small = Vec::new();
    let mut lora_big = Vec::new();
    let mut ratio = 0.0;

    for seed in [31u64, 32, 33] {
        let cfg_full = parse_config(
            ADAPTER_BASE,
            &[format!("seed={seed}"), format!("dataset.seed={}", 50 + seed)],
        )
        .unwrap();
        let cfg_lora = parse_config(
            ADAPTER_BASE,
            &[
                format!("seed={seed}"),
                format!("dataset.seed={}", 50 + seed),
                "lora.enabled=true".into(),
                "lora.rank=4".into(),
            ],
        )
        .unwrap();
        let prep = prepare_data(&cfg_full).unwrap();
        // stage 0 never touches adapters, so both branches share it
        let (m0, _) = stage0_pretrain(&cfg_full, &prep.dataset, &prep.train).unwrap();

        let chain = |cfg: &ExperimentConfig| -> (Model, RunMetrics) {
            let (m1, _) = stage1_fare(m0.clone(), cfg, &prep.dataset, &prep.train).unwrap();
            let (m2, _) = stage2_align(m1, cfg, &prep.dataset, &prep.train).unwrap();
            let rm = evaluate(&m2, cfg, &prep.dataset, &prep.eval_subset).unwrap();
            (m2, rm)
        };
        let (m_full, r_full) = chain(&cfg_full);
        let (m_lora, r_lora) = chain(&cfg_lora);

        full_small.push(r_full.mean_robust_acc("0.05"));
        full_big.push(r_full.mean_robust_acc("0.1"));
        lora_small.push(r_lora.mean_robust_acc("0.05"));
        lora_big.push(r_lora.mean_robust_acc("0.1"));

        let full_params: usize =
            m_full.modalities.iter().map(|m| m.encoder.trainable_param_count()).sum();
        let lora_params: usize =
            m_lora.modalities.iter().map(|m| m.encoder.trainable_param_count()).sum();
        ratio = lora_params as f64 / full_params as f64;
    }

    let fs = avg(full_small.into_iter());
    let fb = avg(full_big.into_iter());
    let ls = avg(lora_small.into_iter());
    let lb = avg(lora_big.into_iter());
    let ok = fs >= ls && fb >= lb && ratio < 0.30;
    verdict(
        7,
        ok,
        &format!(
            "3-seed robust accuracy, full fine-tune vs rank-4 adapters: \
             {} vs {} @0.05, {} vs {} @0.1; adapters train {:.1}% of the \
             full parameter count",
            pct(fs),
            pct(ls),
            pct(fb),
            pct(lb),
            100.0 * ratio
        ),
    );
}

// ---- criterion 8: determinism and persistence ------------------------------------

const TINY: &str = r#"
seed = 3
[dataset]
seed = 5
n_classes = 4
samples_per_class = 8
latent_dim = 8
[[dataset.modalities]]
name = "image"
input_dim = 10
mixing_seed = 7
noise_std = 0.1
[[dataset.modalities]]
name = "audio"
input_dim = 9
mixing_seed = 8
noise_std = 0.15
tanh = true
[encoder]
hidden = [16]
embed_dim = 8
[train]
batch_size = 4
stage0_epochs = 6
stage1_epochs = 1
epsilon = 0.1
attack_iters = 4
[eval]
epsilons = [0.05]
attack_iters = 8
k_per_class = 2
"#;

#[test]
fn criterion_8_determinism_and_persistence() {
    let cfg = parse_config(TINY, &[]).unwrap();
    let run_once = || -> (Model, RunMetrics) {
        let prep = prepare_data(&cfg).unwrap();
        let (m0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
        let (m1, _) = stage1_fare(m0, &cfg, &prep.dataset, &prep.train).unwrap();
        let rm = evaluate(&m1, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
        (m1, rm)
    };
    let (model_a, rm_a) = run_once();
    let (_, rm_b) = run_once();

    let tmp = tempfile::tempdir().unwrap();
    let (dir_a, dir_b) = (tmp.path().join("a"), tmp.path().join("b"));
    std::fs::create_dir_all(&dir_a).unwrap();
    std::fs::create_dir_all(&dir_b).unwrap();
    write_metrics(&dir_a, &cfg, std::slice::from_ref(&rm_a)).unwrap();
    write_metrics(&dir_b, &cfg, std::slice::from_ref(&rm_b)).unwrap();
    let bytes_a = std::fs::read(dir_a.join("metrics.csv")).unwrap();
    let bytes_b = std::fs::read(dir_b.join("metrics.csv")).unwrap();
    let rerun_identical = bytes_a == bytes_b;

    // persistence: a reloaded checkpoint evaluates to bit-identical metrics
    let ckpt = tmp.path().join("model.ckpt");
    save_model(&model_a, &ckpt).unwrap();
    let loaded = load_model(&ckpt).unwrap();
    let prep = prepare_data(&cfg).unwrap();
    let rm_orig = evaluate(&model_a, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
    let rm_loaded = evaluate(&loaded, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
    let roundtrip_identical = rm_orig.cells == rm_loaded.cells;
    let ckpt2 = tmp.path().join("model2.ckpt");
    save_model(&loaded, &ckpt2).unwrap();
    let bytes_identical =
        std::fs::read(&ckpt).unwrap() == std::fs::read(&ckpt2).unwrap();

    verdict(
        8,
        rerun_identical && roundtrip_identical && bytes_identical,
        &format!(
            "identical config+seed reproduced metrics.csv byte-for-byte ({}), \
             checkpoint round-trip metrics bit-identical ({}), save-load-save \
             bytes identical ({})",
            rerun_identical, roundtrip_identical, bytes_identical
        ),
    );
}
