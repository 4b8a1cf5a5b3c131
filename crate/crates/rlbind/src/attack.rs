//! ℓ∞-bounded white-box adversaries over arbitrary differentiable scalar
//! objectives.
//!
//! Two attacks sit behind the [`Attack`] trait and the [`make_attack`]
//! registry: plain [`Pgd`] (fixed step ε/4, an oracle baseline) and [`Apgd`]
//! (Auto-PGD: initial step 2ε, 0.75 momentum, a decaying checkpoint schedule
//! that halves the step and restarts from the best-so-far point when
//! progress stalls). Both return the best feasible iterate seen — including
//! the unperturbed input, so the reported objective never falls below the
//! clean value — and both project every iterate onto the ε-ball and then the
//! `[0,1]` box.
//!
//! The objective is any closure producing `(value, gradient)` at a point;
//! attacks maximize by default and never mutate model state, so attacks on
//! distinct samples are freely parallel. The result is a pure function of
//! (objective, input, config), bit-identical per seed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::sign0;
use crate::rng;
use crate::tensor::Tensor;

/// Differentiable scalar objective: value and gradient at a point.
pub type ObjectiveFn<'a> = dyn FnMut(&Tensor) -> Result<(f64, Tensor)> + 'a;

/// Attack outcome: the best feasible point and the objective value there.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub z: Tensor,
    pub objective: f64,
}

/// Knobs shared by both attacks. APGD's schedule constants carry the
/// published Auto-PGD defaults.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// ℓ∞ radius in input units (inputs live in [0,1]).
    pub epsilon: f64,
    /// Gradient steps per run.
    pub n_iter: usize,
    /// Start each run from a uniform draw in the ε-ball instead of x.
    pub random_start: bool,
    /// Independent runs; the best outcome across runs wins.
    pub restarts: usize,
    /// Seed for random starts (per-run seeds are derived from it).
    pub seed: u64,
    /// Maximize the objective (false negates it).
    pub maximize: bool,
    /// Feasible box for inputs.
    pub bounds: (f64, f64),
    /// APGD momentum weight α.
    pub momentum: f64,
    /// APGD improvement-fraction threshold ρ.
    pub rho: f64,
    /// APGD first checkpoint fraction p₁.
    pub p1: f64,
    /// APGD checkpoint gap decay per step.
    pub p_decay: f64,
    /// APGD minimum checkpoint gap.
    pub p_min_gap: f64,
}

impl AttackConfig {
    /// Training-time settings: 10 iterations, deterministic start.
    pub fn train(epsilon: f64, seed: u64) -> Self {
        Self {
            epsilon,
            n_iter: 10,
            random_start: false,
            restarts: 1,
            seed,
            maximize: true,
            bounds: (0.0, 1.0),
            momentum: 0.75,
            rho: 0.75,
            p1: 0.22,
            p_decay: 0.03,
            p_min_gap: 0.06,
        }
    }

    /// Evaluation-time settings: 100 iterations, one random-started run.
    pub fn eval(epsilon: f64, seed: u64) -> Self {
        Self {
            n_iter: 100,
            random_start: true,
            ..Self::train(epsilon, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "attack epsilon must be a finite value ≥ 0, got {}",
                self.epsilon
            )));
        }
        if self.n_iter < 1 {
            return Err(Error::InvalidArgument("attack n_iter must be ≥ 1".into()));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidArgument("attack restarts must be ≥ 1".into()));
        }
        if self.bounds.0 >= self.bounds.1 {
            return Err(Error::InvalidArgument(format!(
                "attack bounds inverted: [{}, {}]",
                self.bounds.0, self.bounds.1
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) || !(0.0 < self.rho && self.rho < 1.0) {
            return Err(Error::InvalidArgument(
                "attack momentum must be in [0,1] and rho in (0,1)".into(),
            ));
        }
        Ok(())
    }
}

/// An ℓ∞ attack strategy, selected by registry name (`pgd`, `apgd`).
pub trait Attack: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Maximize (or minimize, per config) the objective inside the ε-ball
    /// around `x` intersected with the bounds box.
    fn run(&self, objective: &mut ObjectiveFn, x: &Tensor, cfg: &AttackConfig)
        -> Result<AttackOutcome>;

    fn clone_box(&self) -> Box<dyn Attack>;
}

impl Clone for Box<dyn Attack> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Registry names, in canonical order.
pub const ATTACK_NAMES: &[&str] = &["pgd", "apgd"];
const ATTACK_NAME_LIST: &str = "pgd, apgd";

/// Build an attack by registry name.
pub fn make_attack(name: &str) -> Result<Box<dyn Attack>> {
    match name {
        "pgd" => Ok(Box::new(Pgd)),
        "apgd" => Ok(Box::new(Apgd)),
        _ => Err(Error::UnknownVariant {
            kind: "attack",
            name: name.to_string(),
            accepted: ATTACK_NAME_LIST,
        }),
    }
}

/// Clamp `z` elementwise to the ε-ball around `x`, then to the bounds box.
/// Idempotent; the result satisfies both constraints whenever `x` does.
pub fn project_linf(z: &Tensor, x: &Tensor, epsilon: f64, bounds: (f64, f64)) -> Result<Tensor> {
    if z.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "project_linf",
            lhs: z.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let data = z
        .data()
        .iter()
        .zip(x.data())
        .map(|(&zi, &xi)| zi.clamp(xi - epsilon, xi + epsilon).clamp(bounds.0, bounds.1))
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// One objective evaluation with orientation and finiteness handling.
fn eval_oriented(
    objective: &mut ObjectiveFn,
    z: &Tensor,
    maximize: bool,
) -> Result<(f64, Vec<f64>)> {
    let (value, grad) = objective(z)?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "attack objective" });
    }
    if !grad.data().iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite { op: "attack gradient" });
    }
    if maximize {
        Ok((value, grad.data().to_vec()))
    } else {
        Ok((-value, grad.data().iter().map(|g| -g).collect()))
    }
}

fn uniform_ball_start<R: Rng>(x: &Tensor, epsilon: f64, bounds: (f64, f64), rng: &mut R) -> Tensor {
    let data: Vec<f64> = x
        .data()
        .iter()
        .map(|&xi| {
            let delta = if epsilon > 0.0 {
                rng.gen_range(-epsilon..=epsilon)
            } else {
                0.0
            };
            (xi + delta).clamp(bounds.0, bounds.1)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("start stays finite")
}

struct Tracker {
    best_z: Tensor,
    best_f: f64,
}

impl Tracker {
    fn new(z: Tensor, f: f64) -> Self {
        Self { best_z: z, best_f: f }
    }

    fn offer(&mut self, z: &Tensor, f: f64) {
        if f > self.best_f {
            self.best_f = f;
            self.best_z = z.clone();
        }
    }
}

/// Fixed-step sign-gradient ascent: step ε/4, best-iterate tracking.
#[derive(Debug, Clone)]
pub struct Pgd;

impl Attack for Pgd {
    fn name(&self) -> &'static str {
        "pgd"
    }

    fn run(
        &self,
        objective: &mut ObjectiveFn,
        x: &Tensor,
        cfg: &AttackConfig,
    ) -> Result<AttackOutcome> {
        cfg.validate()?;
        let (fx, gx) = eval_oriented(objective, x, cfg.maximize)?;
        if cfg.epsilon == 0.0 {
            return Ok(AttackOutcome {
                z: x.clone(),
                objective: orient(fx, cfg.maximize),
            });
        }
        let step = cfg.epsilon / 4.0;
        let mut tracker = Tracker::new(x.clone(), fx);

        for restart in 0..cfg.restarts {
            let mut rng = rng::seeded(rng::derive_seed(cfg.seed, restart as u64));
            let (mut z, mut grad) = if cfg.random_start {
                let z0 = uniform_ball_start(x, cfg.epsilon, cfg.bounds, &mut rng);
                let (f0, g0) = eval_oriented(objective, &z0, cfg.maximize)?;
                tracker.offer(&z0, f0);
                (z0, g0)
            } else {
                (x.clone(), gx.clone())
            };
            for _ in 0..cfg.n_iter {
                let stepped: Vec<f64> = z
                    .data()
                    .iter()
                    .zip(&grad)
                    .map(|(&zi, &gi)| zi + step * sign0(gi))
                    .collect();
                let proposal = Tensor::new(z.shape().to_vec(), stepped)?;
                z = project_linf(&proposal, x, cfg.epsilon, cfg.bounds)?;
                let (f, g) = eval_oriented(objective, &z, cfg.maximize)?;
                tracker.offer(&z, f);
                grad = g;
            }
        }
        Ok(AttackOutcome {
            z: tracker.best_z,
            objective: orient(tracker.best_f, cfg.maximize),
        })
    }

    fn clone_box(&self) -> Box<dyn Attack> {
        Box::new(self.clone())
    }
}

fn orient(f: f64, maximize: bool) -> f64 {
    if maximize {
        f
    } else {
        -f
    }
}

/// Checkpoint iterations for an APGD run: `w_j = ⌈p_j·n_iter⌉` with
/// `p₀ = 0`, `p₁` as configured, and
/// `p_{j+1} = p_j + max(p_j − p_{j−1} − p_decay, p_min_gap)`.
pub fn apgd_checkpoints(n_iter: usize, p1: f64, p_decay: f64, p_min_gap: f64) -> Vec<usize> {
    let mut ps = vec![0.0f64, p1];
    while *ps.last().expect("non-empty") < 1.0 {
        let last = ps[ps.len() - 1];
        let prev = ps[ps.len() - 2];
        ps.push(last + (last - prev - p_decay).max(p_min_gap));
    }
    let mut ws: Vec<usize> = ps
        .iter()
        .map(|p| (p * n_iter as f64 - 1e-9).ceil().max(0.0) as usize)
        .filter(|&w| w < n_iter)
        .collect();
    ws.dedup();
    ws
}

/// Auto-PGD: adaptive step halving on stalled progress, momentum 0.75,
/// restarts from the best-so-far iterate.
#[derive(Debug, Clone)]
pub struct Apgd;

impl Attack for Apgd {
    fn name(&self) -> &'static str {
        "apgd"
    }

    fn run(
        &self,
        objective: &mut ObjectiveFn,
        x: &Tensor,
        cfg: &AttackConfig,
    ) -> Result<AttackOutcome> {
        cfg.validate()?;
        let (fx, gx) = eval_oriented(objective, x, cfg.maximize)?;
        if cfg.epsilon == 0.0 {
            return Ok(AttackOutcome {
                z: x.clone(),
                objective: orient(fx, cfg.maximize),
            });
        }
        let mut tracker = Tracker::new(x.clone(), fx);
        let checkpoints = apgd_checkpoints(cfg.n_iter, cfg.p1, cfg.p_decay, cfg.p_min_gap);

        for restart in 0..cfg.restarts {
            let mut rng = rng::seeded(rng::derive_seed(cfg.seed, restart as u64));
            let (z0, f0, g0) = if cfg.random_start {
                let z0 = uniform_ball_start(x, cfg.epsilon, cfg.bounds, &mut rng);
                let (f0, g0) = eval_oriented(objective, &z0, cfg.maximize)?;
                tracker.offer(&z0, f0);
                (z0, f0, g0)
            } else {
                (x.clone(), fx, gx.clone())
            };

            let mut step = 2.0 * cfg.epsilon;

            // first plain gradient step
            let stepped: Vec<f64> = z0
                .data()
                .iter()
                .zip(&g0)
                .map(|(&zi, &gi)| zi + step * sign0(gi))
                .collect();
            let z1 = project_linf(&Tensor::new(z0.shape().to_vec(), stepped)?, x, cfg.epsilon, cfg.bounds)?;
            let (f1, g1) = eval_oriented(objective, &z1, cfg.maximize)?;
            tracker.offer(&z1, f1);

            let mut z_prev = z0;
            let mut z_cur = z1;
            let mut f_cur = f1;
            let mut g_cur = g1;

            // bookkeeping for the checkpoint conditions
            let mut improved_in_window: usize = if f1 > f0 { 1 } else { 0 };
            let mut window_len: usize = 1;
            let mut f_max_prev_ckpt = tracker.best_f;
            let mut step_prev_ckpt = step;
            let mut ckpt_idx = 1; // checkpoints[0] == 0 is the start itself

            for k in 1..cfg.n_iter {
                if ckpt_idx < checkpoints.len() && k == checkpoints[ckpt_idx] {
                    let needed = (cfg.rho * window_len as f64).ceil() as usize;
                    let cond_stall = improved_in_window < needed;
                    let cond_frozen =
                        step == step_prev_ckpt && tracker.best_f == f_max_prev_ckpt;
                    if cond_stall || cond_frozen {
                        step /= 2.0;
                        z_cur = tracker.best_z.clone();
                        z_prev = z_cur.clone();
                        let (f, g) = eval_oriented(objective, &z_cur, cfg.maximize)?;
                        f_cur = f;
                        g_cur = g;
                    }
                    step_prev_ckpt = step;
                    f_max_prev_ckpt = tracker.best_f;
                    improved_in_window = 0;
                    window_len = 0;
                    ckpt_idx += 1;
                }

                // candidate plain step, then momentum blend, then projection
                let cand: Vec<f64> = z_cur
                    .data()
                    .iter()
                    .zip(&g_cur)
                    .map(|(&zi, &gi)| zi + step * sign0(gi))
                    .collect();
                let zc = project_linf(
                    &Tensor::new(z_cur.shape().to_vec(), cand)?,
                    x,
                    cfg.epsilon,
                    cfg.bounds,
                )?;
                let blended: Vec<f64> = zc
                    .data()
                    .iter()
                    .zip(z_cur.data())
                    .zip(z_prev.data())
                    .map(|((&zci, &zi), &pi)| {
                        zi + cfg.momentum * (zci - zi) + (1.0 - cfg.momentum) * (zi - pi)
                    })
                    .collect();
                let z_next = project_linf(
                    &Tensor::new(z_cur.shape().to_vec(), blended)?,
                    x,
                    cfg.epsilon,
                    cfg.bounds,
                )?;
                let (f_next, g_next) = eval_oriented(objective, &z_next, cfg.maximize)?;
                tracker.offer(&z_next, f_next);
                if f_next > f_cur {
                    improved_in_window += 1;
                }
                window_len += 1;
                z_prev = z_cur;
                z_cur = z_next;
                f_cur = f_next;
                g_cur = g_next;
            }
        }
        Ok(AttackOutcome {
            z: tracker.best_z,
            objective: orient(tracker.best_f, cfg.maximize),
        })
    }

    fn clone_box(&self) -> Box<dyn Attack> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    /// Linear objective wᵀz with constant gradient w.
    fn linear(w: Vec<f64>) -> impl FnMut(&Tensor) -> Result<(f64, Tensor)> {
        move |z: &Tensor| {
            let val = z.data().iter().zip(&w).map(|(a, b)| a * b).sum();
            Ok((val, v(&w)))
        }
    }

    /// Convex quadratic Σ(z−c)², maximized on the ball boundary.
    fn away_from(c: Vec<f64>) -> impl FnMut(&Tensor) -> Result<(f64, Tensor)> {
        move |z: &Tensor| {
            let val = z.data().iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            let grad: Vec<f64> = z.data().iter().zip(&c).map(|(a, b)| 2.0 * (a - b)).collect();
            Ok((val, v(&grad)))
        }
    }

    #[test]
    fn registry_names() {
        for n in ATTACK_NAMES {
            assert_eq!(&make_attack(n).unwrap().name(), n);
        }
        assert!(make_attack("fgsm").is_err());
    }

    #[test]
    fn epsilon_zero_returns_input_bitwise() {
        let x = v(&[0.25, 0.75, 0.5]);
        for name in ATTACK_NAMES {
            let attack = make_attack(name).unwrap();
            let cfg = AttackConfig::train(0.0, 7);
            let mut obj = linear(vec![1.0, -2.0, 0.5]);
            let out = attack.run(&mut obj, &x, &cfg).unwrap();
            assert!(out.z.bit_eq(&x), "{name}");
        }
    }

    #[test]
    fn linear_loss_hits_closed_form_exactly() {
        // optimum of wᵀz over the ball is x + ε·sign(w), elementwise
        let x = v(&[0.5, 0.5]);
        let w = vec![1.0, -2.0];
        let eps = 0.1;
        let expect = v(&[0.5 + eps, 0.5 - eps]);
        for name in ATTACK_NAMES {
            let attack = make_attack(name).unwrap();
            let cfg = AttackConfig::train(eps, 3);
            let mut obj = linear(w.clone());
            let out = attack.run(&mut obj, &x, &cfg).unwrap();
            assert!(out.z.bit_eq(&expect), "{name}: {:?}", out.z.data());
            assert_eq!(out.z.data(), &[0.6, 0.4]);
        }
    }

    #[test]
    fn linear_loss_exact_on_random_instances() {
        // The ball optimum of wᵀz is x + ε·sign(w) with value wᵀx + ε‖w‖₁.
        // Best-iterate tracking compares objective values, whose f64
        // resolution (~1e-16) can hide the last ulp of a coordinate, so the
        // iterate check allows a few ulps while the value check is tight.
        let mut rng = seeded(11);
        for trial in 0..25 {
            let d = rng.gen_range(2..6);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..0.8)).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let eps = rng.gen_range(0.01..0.15);
            let expect: Vec<f64> = x
                .iter()
                .zip(&w)
                .map(|(&xi, &wi)| (xi + eps * sign0(wi)).clamp(0.0, 1.0))
                .collect();
            let best_value = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                + eps * w.iter().map(|b| b.abs()).sum::<f64>();
            for name in ATTACK_NAMES {
                let attack = make_attack(name).unwrap();
                let cfg = AttackConfig::train(eps, trial);
                let mut obj = linear(w.clone());
                let out = attack.run(&mut obj, &v(&x), &cfg).unwrap();
                assert!(
                    (out.objective - best_value).abs() <= 1e-13 * best_value.abs().max(1.0),
                    "{name} trial {trial}: objective {} vs optimum {best_value}",
                    out.objective
                );
                for (got, want) in out.z.data().iter().zip(&expect) {
                    assert!(
                        (got - want).abs() <= 4.0 * f64::EPSILON * want.abs().max(1.0),
                        "{name} trial {trial}: got {got} want {want} (eps {eps})"
                    );
                }
            }
        }
    }

    #[test]
    fn minimize_flag_flips_the_linear_optimum() {
        let x = v(&[0.5, 0.5]);
        let cfg = AttackConfig { maximize: false, ..AttackConfig::train(0.1, 0) };
        let mut obj = linear(vec![1.0, -2.0]);
        let out = Pgd.run(&mut obj, &x, &cfg).unwrap();
        assert!(out.z.bit_eq(&v(&[0.4, 0.6])));
        assert!((out.objective - (0.4 - 1.2)).abs() <= 1e-15);
    }

    #[test]
    fn best_iterate_never_below_clean_value() {
        let mut rng = seeded(13);
        for seed in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..0.9)).collect();
            let c: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            for name in ATTACK_NAMES {
                let attack = make_attack(name).unwrap();
                let cfg = AttackConfig::eval(0.05, seed);
                let mut probe = away_from(c.clone());
                let clean = probe(&v(&x)).unwrap().0;
                let mut obj = away_from(c.clone());
                let out = attack.run(&mut obj, &v(&x), &cfg).unwrap();
                assert!(out.objective >= clean - 1e-15, "{name}");
            }
        }
    }

    #[test]
    fn project_linf_contract() {
        let x = v(&[0.5, 0.5, 0.9]);
        // feasible points pass through bitwise
        let z = v(&[0.52, 0.47, 0.93]);
        let p = project_linf(&z, &x, 0.05, (0.0, 1.0)).unwrap();
        assert!(p.bit_eq(&z));
        // saturation: x + 10ε clamps to x + ε (then the box); the expected
        // values are spelled as the same f64 expressions the clamp computes
        let far = v(&[0.5 + 0.5, 0.5 - 0.5, 0.9 + 0.5]);
        let p = project_linf(&far, &x, 0.05, (0.0, 1.0)).unwrap();
        assert!(p.bit_eq(&v(&[0.5 + 0.05, 0.5 - 0.05, 0.9 + 0.05])));
        // box dominates when x + ε exceeds it
        let p = project_linf(&v(&[1.2, 0.5, 1.2]), &x, 0.2, (0.0, 1.0)).unwrap();
        assert_eq!(p.data()[0], 0.7);
        assert_eq!(p.data()[2], 1.0);
        // mismatched shapes rejected
        assert!(project_linf(&v(&[0.1]), &x, 0.1, (0.0, 1.0)).is_err());
    }

    #[test]
    fn project_linf_idempotent_sweep() {
        let mut rng = seeded(17);
        for _ in 0..200 {
            let d = rng.gen_range(1..6);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..1.5)).collect();
            let eps = rng.gen_range(0.0..0.3);
            let once = project_linf(&v(&z), &v(&x), eps, (0.0, 1.0)).unwrap();
            let twice = project_linf(&once, &v(&x), eps, (0.0, 1.0)).unwrap();
            assert!(once.bit_eq(&twice));
        }
    }

    #[test]
    fn feasibility_on_awkward_objectives() {
        // rapidly oscillating objective to push iterates around
        let wavy = |z: &Tensor| -> Result<(f64, Tensor)> {
            let val: f64 = z.data().iter().map(|a| (17.0 * a).sin()).sum();
            let grad: Vec<f64> = z.data().iter().map(|a| 17.0 * (17.0 * a).cos()).collect();
            Ok((val, v(&grad)))
        };
        let mut rng = seeded(19);
        for seed in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            let eps = rng.gen_range(0.01..0.2);
            for name in ATTACK_NAMES {
                let attack = make_attack(name).unwrap();
                let cfg = AttackConfig::eval(eps, seed);
                let mut obj = wavy;
                let out = attack.run(&mut obj, &v(&x), &cfg).unwrap();
                for (zi, xi) in out.z.data().iter().zip(&x) {
                    assert!((zi - xi).abs() <= eps + 1e-12, "{name}: ball violated");
                    assert!((0.0..=1.0).contains(zi), "{name}: box violated");
                }
            }
        }
    }

    #[test]
    fn budget_monotonicity_on_saturating_objectives() {
        let mut rng = seeded(23);
        for seed in 0..10 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.3..0.7)).collect();
            let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let c: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            for name in ATTACK_NAMES {
                let attack = make_attack(name).unwrap();
                let small = AttackConfig::eval(2.0 / 255.0, seed);
                let large = AttackConfig::eval(4.0 / 255.0, seed);
                let mut o1 = linear(w.clone());
                let mut o2 = linear(w.clone());
                let f_small = attack.run(&mut o1, &v(&x), &small).unwrap().objective;
                let f_large = attack.run(&mut o2, &v(&x), &large).unwrap().objective;
                assert!(f_large >= f_small - 1e-12, "{name} linear");
                let mut o1 = away_from(c.clone());
                let mut o2 = away_from(c.clone());
                let f_small = attack.run(&mut o1, &v(&x), &small).unwrap().objective;
                let f_large = attack.run(&mut o2, &v(&x), &large).unwrap().objective;
                assert!(f_large >= f_small - 1e-12, "{name} quadratic");
            }
        }
    }

    #[test]
    fn determinism_per_seed() {
        let x = v(&[0.4, 0.6, 0.5]);
        for name in ATTACK_NAMES {
            let attack = make_attack(name).unwrap();
            let cfg = AttackConfig::eval(0.1, 99);
            let run = || {
                let mut obj = away_from(vec![0.2, 0.9, 0.1]);
                attack.run(&mut obj, &x, &cfg).unwrap()
            };
            let (a, b) = (run(), run());
            assert!(a.z.bit_eq(&b.z), "{name}");
            assert_eq!(a.objective.to_bits(), b.objective.to_bits(), "{name}");
        }
    }

    #[test]
    fn checkpoint_schedule_matches_published_values() {
        // hand-applied recurrence for n_iter = 100:
        // p: 0, .22, .41, .57, .70, .80, .87, .93, .99 → w = ⌈100p⌉
        let ws = apgd_checkpoints(100, 0.22, 0.03, 0.06);
        assert_eq!(ws, vec![0, 22, 41, 57, 70, 80, 87, 93, 99]);
        // small budgets stay within range and start at 0
        for n in [1usize, 2, 5, 10] {
            let ws = apgd_checkpoints(n, 0.22, 0.03, 0.06);
            assert_eq!(ws[0], 0);
            assert!(ws.iter().all(|&w| w < n));
            assert!(ws.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn apgd_beats_pgd_on_double_well() {
        // A small bump one PGD step away traps the fixed-step attack; the
        // global peak sits near the far ball edge where APGD's large initial
        // step lands.
        let mut rng = seeded(29);
        let eps = 0.25;
        let mut apgd_wins = 0;
        let trials = 100;
        for seed in 0..trials {
            let x0: f64 = rng.gen_range(0.35..0.65);
            let near = x0 + 0.055;
            let far = x0 + 0.24;
            let bump = move |z: &Tensor| -> Result<(f64, Tensor)> {
                let t = z.data()[0];
                let g1 = (-(t - near) * (t - near) / 0.0008).exp();
                let g2 = (-(t - far) * (t - far) / 0.0008).exp();
                let val = 1.0 * g1 + 3.0 * g2;
                let d1 = g1 * (-2.0 * (t - near) / 0.0008);
                let d2 = 3.0 * g2 * (-2.0 * (t - far) / 0.0008);
                Ok((val, v(&[d1 + d2])))
            };
            let cfg = AttackConfig {
                n_iter: 100,
                ..AttackConfig::train(eps, seed)
            };
            let mut o1 = bump;
            let mut o2 = bump;
            let f_pgd = Pgd.run(&mut o1, &v(&[x0]), &cfg).unwrap().objective;
            let f_apgd = Apgd.run(&mut o2, &v(&[x0]), &cfg).unwrap().objective;
            if f_apgd >= f_pgd - 1e-12 {
                apgd_wins += 1;
            }
        }
        assert!(apgd_wins >= 90, "APGD matched or beat PGD on only {apgd_wins}/{trials}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = v(&[0.5]);
        let mut bad_val = |_: &Tensor| -> Result<(f64, Tensor)> { Ok((f64::NAN, v(&[1.0]))) };
        let mut bad_grad = |_: &Tensor| -> Result<(f64, Tensor)> { Ok((1.0, v(&[1.0]))) };
        let cfg = AttackConfig::train(0.1, 0);
        assert!(Pgd.run(&mut bad_val, &x, &cfg).is_err());
        // a gradient that goes non-finite mid-run: Tensor rejects NaN at
        // construction, so emulate via a value error instead
        let _ = &mut bad_grad;
    }

    #[test]
    fn invalid_configs_rejected() {
        let x = v(&[0.5]);
        let mut obj = linear(vec![1.0]);
        let mut cfg = AttackConfig::train(-0.1, 0);
        assert!(Pgd.run(&mut obj, &x, &cfg).is_err());
        cfg = AttackConfig::train(0.1, 0);
        cfg.n_iter = 0;
        assert!(Pgd.run(&mut obj, &x, &cfg).is_err());
        cfg = AttackConfig::train(0.1, 0);
        cfg.bounds = (1.0, 0.0);
        assert!(Apgd.run(&mut obj, &x, &cfg).is_err());
    }
}
