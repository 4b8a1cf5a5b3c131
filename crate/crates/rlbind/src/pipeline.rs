//! The three-stage training procedure, evaluation, persistence, and the
//! ablation grid.
//!
//! - **Stage 0** pretrains each modality encoder with InfoNCE against the
//!   frozen anchor columns (the anchor of a sample's class is its positive).
//! - **Stage 1** hardens each encoder unsupervised: an ℓ∞ attack maximizes
//!   the FARE distance to a frozen pre-stage snapshot, and SGD minimizes it.
//!   Labels are never read.
//! - **Stage 2** attacks cross-entropy to craft adversaries, then descends
//!   the composed objective — clean CE + adversarial CE + λ·alignment —
//!   updating encoder trainables and scorer parameters jointly. The anchor
//!   matrix and the stage-1 snapshot are never updated.
//!
//! Everything is deterministic: batch order, attack seeds, and evaluation
//! seeds all derive from the run seed with distinct stream salts, and
//! evaluation parallelism reduces exact integer counts, so parallel and
//! serial runs report identical numbers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attack::{make_attack, AttackConfig};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::{Epsilon, ExperimentConfig};
use crate::data::{self, Dataset, Split};
use crate::encoder::{
    digest_tensors, Activation, AnchorMatrix, Binding, Encoder, Layer, LowRankAdapter,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{
    cross_entropy, fare_loss, infonce, make_alignment, stage2_objective, Stage2Config,
    ALIGNMENT_NAMES,
};
use crate::rng;
use crate::scorer::{classify, make_scorer, score_against_anchors, Scorer, ScorerInit, SCORER_NAMES};
use crate::tensor::Tensor;

// Distinct derivation salts keep every random stream independent: adding a
// consumer never perturbs another stream's draws.
const SALT_ENCODER: u64 = 0x45;
const SALT_SCORER: u64 = 0x5c;
const SALT_LORA: u64 = 0x10;
const SALT_BATCH: u64 = 0xb0;
const SALT_ATTACK: u64 = 0xa0;
const SALT_EVAL: u64 = 0xe0;
const SALT_SPLIT: u64 = 0x51;
const SALT_SUBSET: u64 = 0x5b;

fn chain(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |acc, &p| rng::derive_seed(acc, p))
}

fn shuffled(indices: &[usize], seed: u64) -> Vec<usize> {
    let mut v = indices.to_vec();
    v.shuffle(&mut rng::seeded(seed));
    v
}

/// One modality's trainable pieces: its encoder and its own scorer
/// instance. Scorers are per-modality so that stage-2 training of one
/// modality never couples to another through shared scorer parameters.
/// The construction options ride along so checkpoints can rebuild the
/// scorer exactly (the trainable-α flag is not recoverable from tensors).
#[derive(Debug, Clone)]
pub struct ModalityModel {
    pub name: String,
    pub encoder: Encoder,
    pub scorer: Box<dyn Scorer>,
    pub scorer_init: ScorerInit,
}

/// The full model: per-modality encoders + scorers and the frozen anchors.
#[derive(Debug, Clone)]
pub struct Model {
    pub modalities: Vec<ModalityModel>,
    pub anchors: AnchorMatrix,
    pub embed_dim: usize,
    /// Which stage produced this model: `init`, `stage0`, a FARE tag, or
    /// `stage2`.
    pub stage_tag: String,
    pub config_hash: String,
}

impl Model {
    /// SHA-256 over every parameter tensor (anchors, encoders, scorers).
    pub fn digest(&self) -> String {
        let mut named: Vec<(String, Tensor)> =
            vec![("anchors".into(), self.anchors.matrix().clone())];
        for (i, mm) in self.modalities.iter().enumerate() {
            named.extend(mm.encoder.named_tensors(&format!("m{i}")));
            named.extend(mm.scorer.named_tensors(&format!("m{i}.scorer")));
        }
        digest_tensors(named.iter().map(|(n, t)| (n.as_str(), t)))
    }
}

/// Per-stage training record: the loss at every SGD step, per modality.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub stage: String,
    pub per_modality: Vec<(String, Vec<f64>)>,
}

/// Dataset plus the index sets every stage consumes.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub eval_subset: Vec<usize>,
}

/// Generate the dataset, split it, and draw the evaluation subset. All
/// seeds derive from the dataset seed, so the same data recipe always
/// yields the same partitions regardless of the run seed.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let dataset = data::generate(&cfg.dataset, cfg.dataset_seed)?;
    prepare_loaded(dataset, cfg)
}

/// Split and subset an already-built dataset (freshly generated or loaded
/// from a dump). Existing split marks are honored; unsplit data is split by
/// the configured fraction.
pub fn prepare_loaded(mut dataset: Dataset, cfg: &ExperimentConfig) -> Result<PreparedData> {
    let existing_train = dataset.indices_with_split(Split::Train);
    let (train, test) = if existing_train.is_empty() {
        dataset.split(cfg.dataset.train_fraction, rng::derive_seed(dataset.seed, SALT_SPLIT))?
    } else {
        (existing_train, dataset.indices_with_split(Split::Test))
    };
    let eval_subset = dataset.sample_eval_subset(
        &test,
        cfg.eval.k_per_class,
        rng::derive_seed(dataset.seed, SALT_SUBSET),
    )?;
    Ok(PreparedData { dataset, train, test, eval_subset })
}

/// Build an untrained model for the configured geometry: fresh encoders,
/// fresh per-modality scorers, and the anchor matrix.
pub fn build_model(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Model> {
    let anchors = AnchorMatrix::orthonormal(cfg.anchor_seed, ds.spec.n_classes, cfg.embed_dim)?;
    let mut modalities = Vec::with_capacity(ds.spec.modalities.len());
    for (m, mspec) in ds.spec.modalities.iter().enumerate() {
        let mut enc_rng = rng::seeded(chain(cfg.seed, &[SALT_ENCODER, m as u64]));
        let encoder = Encoder::new(mspec.input_dim, &cfg.hidden, cfg.embed_dim, &mut enc_rng);
        let (scorer_init, scorer) = fresh_scorer(cfg, m)?;
        modalities.push(ModalityModel { name: mspec.name.clone(), encoder, scorer, scorer_init });
    }
    Ok(Model {
        modalities,
        anchors,
        embed_dim: cfg.embed_dim,
        stage_tag: "init".into(),
        config_hash: cfg.config_hash(),
    })
}

/// A scorer initialized exactly as a fresh run would initialize it; the
/// seed depends only on (run seed, modality index), never on the scorer
/// name, so swapping scorers cannot perturb any other stream.
fn fresh_scorer(cfg: &ExperimentConfig, m: usize) -> Result<(ScorerInit, Box<dyn Scorer>)> {
    let init = ScorerInit {
        alpha_trainable: cfg.scorer.alpha_trainable,
        mlp_hidden: cfg.scorer.mlp_hidden,
        seed: chain(cfg.seed, &[SALT_SCORER, m as u64]),
    };
    let scorer = make_scorer(&cfg.scorer.name, cfg.embed_dim, &init)?;
    Ok((init, scorer))
}

fn guard_divergence(stage: &str, modality: &str, losses: &[f64], current: f64) -> Result<()> {
    if let Some(&first) = losses.first() {
        if current > 10.0 * first.max(1.0) {
            return Err(Error::Training(format!(
                "{stage} diverged on {modality}: loss {current} exceeds 10× the initial {first}"
            )));
        }
    }
    Ok(())
}

// ---- Stage 0: InfoNCE pretraining ---------------------------------------------

/// Pretrain every modality encoder against the frozen anchors. The anchor
/// column of a sample's class is its positive; other batch anchors are the
/// negatives. Fails unless the loss falls by ≥ 50% from the first SGD step
/// to the last.
pub fn stage0_pretrain(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    train: &[usize],
) -> Result<(Model, TrainLog)> {
    if train.is_empty() {
        return Err(Error::Training("stage0 needs a non-empty training set".into()));
    }
    let mut model = build_model(cfg, ds)?;
    let Model { modalities, anchors, .. } = &mut model;
    let mut log = Vec::new();
    for (m, mm) in modalities.iter_mut().enumerate() {
        let mut losses = Vec::new();
        for epoch in 0..cfg.train.stage0_epochs {
            let order = shuffled(train, chain(cfg.seed, &[SALT_BATCH, 0, m as u64, epoch as u64]));
            for batch in order.chunks(cfg.train.batch_size) {
                if batch.len() < 2 {
                    continue; // a singleton tail has no negatives
                }
                let mut g = Graph::new();
                let bound = mm.encoder.bind(&mut g, Binding::Trainable);
                let mut m_nodes = Vec::with_capacity(batch.len());
                let mut t_nodes = Vec::with_capacity(batch.len());
                for &i in batch {
                    let x = g.constant(ds.view(i, m).clone());
                    m_nodes.push(bound.forward(&mut g, x)?);
                    t_nodes.push(g.constant(anchors.anchor(ds.label(i))));
                }
                let loss = infonce(&mut g, &m_nodes, &t_nodes, cfg.train.tau)?;
                g.backward(loss)?;
                mm.encoder.apply_sgd(&bound, &g, cfg.train.stage0_lr)?;
                let lv = g.value(loss).item();
                guard_divergence("stage0", &mm.name, &losses, lv)?;
                losses.push(lv);
            }
        }
        if let (Some(&first), Some(&last)) = (losses.first(), losses.last()) {
            if last > 0.5 * first {
                return Err(Error::Training(format!(
                    "stage0 failed to train on {}: loss went {first} → {last}, less than a 50% drop",
                    mm.name
                )));
            }
        }
        log.push((mm.name.clone(), losses));
    }
    model.stage_tag = "stage0".into();
    model.config_hash = cfg.config_hash();
    Ok((model, TrainLog { stage: "stage0".into(), per_modality: log }))
}

// ---- Stage 1: FARE hardening --------------------------------------------------

/// Table-style tag for a stage-1 model trained at `eps`.
pub fn fare_tag(eps: &Epsilon) -> String {
    if eps.value == 2.0 / 255.0 {
        "FARE2".into()
    } else if eps.value == 4.0 / 255.0 {
        "FARE4".into()
    } else {
        format!("FARE@{}", eps.label)
    }
}

/// Unsupervised adversarial hardening. Per modality: snapshot the encoder
/// (φ_Org, never updated), optionally attach a low-rank adapter, then per
/// batch craft ℓ∞ adversaries maximizing the FARE distance and take an SGD
/// step minimizing it. Labels are never read.
pub fn stage1_fare(
    mut model: Model,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    train: &[usize],
) -> Result<(Model, TrainLog)> {
    if train.is_empty() {
        return Err(Error::Training("stage1 needs a non-empty training set".into()));
    }
    let attack = make_attack(&cfg.train.attack)?;
    let eps = cfg.train.epsilon.value;
    let mut log = Vec::new();
    let Model { modalities, .. } = &mut model;
    for (m, mm) in modalities.iter_mut().enumerate() {
        let org = mm.encoder.snapshot_frozen();
        if cfg.lora.enabled && !mm.encoder.has_lora() {
            let mut lora_rng = rng::seeded(chain(cfg.seed, &[SALT_LORA, m as u64]));
            mm.encoder.attach_lora(cfg.lora.rank, &mut lora_rng)?;
        }
        let mut losses = Vec::new();
        let mut attack_counter: u64 = 0;
        for epoch in 0..cfg.train.stage1_epochs {
            let order = shuffled(train, chain(cfg.seed, &[SALT_BATCH, 1, m as u64, epoch as u64]));
            for batch in order.chunks(cfg.train.batch_size) {
                // craft adversaries against the current encoder
                let mut zs = Vec::with_capacity(batch.len());
                {
                    let enc = &mm.encoder;
                    for &i in batch {
                        let x = ds.view(i, m);
                        let acfg = cfg.train_attack_config(chain(
                            cfg.seed,
                            &[SALT_ATTACK, 1, m as u64, attack_counter],
                        ));
                        attack_counter += 1;
                        let mut obj = |z: &Tensor| -> Result<(f64, Tensor)> {
                            let mut g = Graph::new();
                            let zn = g.leaf(z.clone(), true);
                            let bound = enc.bind(&mut g, Binding::Frozen);
                            let loss = fare_loss(&mut g, &bound, &org, x, zn, eps)?;
                            g.backward(loss)?;
                            Ok((g.value(loss).item(), g.grad(zn)?))
                        };
                        let mut out = attack.run(&mut obj, x, &acfg)?;
                        if eps > 0.0 && out.objective <= 0.0 {
                            // While the encoder is still bitwise-equal to its
                            // snapshot, the distance (and its gradient) at the
                            // clean input is exactly zero, so a gradient attack
                            // cannot leave it. A seeded in-ball start breaks
                            // the tie deterministically; one SGD step later the
                            // symmetry is gone for good.
                            let mut retry = acfg.clone();
                            retry.random_start = true;
                            out = attack.run(&mut obj, x, &retry)?;
                        }
                        zs.push(out.z);
                    }
                }
                // one SGD step on the batch-mean FARE loss
                let mut g = Graph::new();
                let bound = mm.encoder.bind(&mut g, Binding::Trainable);
                let mut total: Option<crate::graph::NodeId> = None;
                for (&i, z) in batch.iter().zip(&zs) {
                    let zn = g.constant(z.clone());
                    let li = fare_loss(&mut g, &bound, &org, ds.view(i, m), zn, eps)?;
                    total = Some(match total {
                        None => li,
                        Some(acc) => g.add(acc, li)?,
                    });
                }
                let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
                g.backward(loss)?;
                mm.encoder.apply_sgd(&bound, &g, cfg.train.stage12_lr)?;
                let lv = g.value(loss).item();
                guard_divergence("stage1", &mm.name, &losses, lv)?;
                losses.push(lv);
            }
        }
        log.push((mm.name.clone(), losses));
    }
    model.stage_tag = fare_tag(&cfg.train.epsilon);
    model.config_hash = cfg.config_hash();
    let stage = model.stage_tag.clone();
    Ok((model, TrainLog { stage, per_modality: log }))
}

// ---- Stage 2: adversarial-invariant cross-modal alignment ---------------------

/// Supervised alignment fine-tuning. Per batch: craft adversaries
/// maximizing classification cross-entropy, then descend
/// `clean-CE + adv-CE + λ·alignment` (flags per config), updating encoder
/// trainables and scorer parameters jointly. Anchors stay frozen.
pub fn stage2_align(
    mut model: Model,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    train: &[usize],
) -> Result<(Model, TrainLog)> {
    if train.is_empty() {
        return Err(Error::Training("stage2 needs a non-empty training set".into()));
    }
    let attack = make_attack(&cfg.train.attack)?;
    let alignment = make_alignment(&cfg.alignment.name, cfg.alignment.tau_prime)?;
    let s2 = Stage2Config {
        lambda: cfg.stage2.lambda,
        include_clean_ce: cfg.stage2.clean_ce,
        include_adv_ce: cfg.stage2.adv_ce,
        include_cma: cfg.stage2.cma,
    };
    s2.validate()?;
    let mut log = Vec::new();
    let Model { modalities, anchors, .. } = &mut model;
    for (m, mm) in modalities.iter_mut().enumerate() {
        if cfg.lora.enabled && !mm.encoder.has_lora() {
            let mut lora_rng = rng::seeded(chain(cfg.seed, &[SALT_LORA, m as u64]));
            mm.encoder.attach_lora(cfg.lora.rank, &mut lora_rng)?;
        }
        let mut losses = Vec::new();
        let mut attack_counter: u64 = 0;
        for epoch in 0..cfg.train.stage2_epochs {
            let order = shuffled(train, chain(cfg.seed, &[SALT_BATCH, 2, m as u64, epoch as u64]));
            for batch in order.chunks(cfg.train.batch_size) {
                let mut zs = Vec::with_capacity(batch.len());
                {
                    let enc = &mm.encoder;
                    let sc: &dyn Scorer = mm.scorer.as_ref();
                    for &i in batch {
                        let x = ds.view(i, m);
                        let acfg = cfg.train_attack_config(chain(
                            cfg.seed,
                            &[SALT_ATTACK, 2, m as u64, attack_counter],
                        ));
                        attack_counter += 1;
                        let mut obj =
                            ce_objective(enc, sc, anchors, ds.label(i));
                        zs.push(attack.run(&mut obj, x, &acfg)?.z);
                    }
                }
                let mut g = Graph::new();
                let bound = mm.encoder.bind(&mut g, Binding::Trainable);
                let sbind = mm.scorer.bind(&mut g, true);
                let mut total: Option<crate::graph::NodeId> = None;
                for (&i, z) in batch.iter().zip(&zs) {
                    let x = g.constant(ds.view(i, m).clone());
                    let e_clean = bound.forward(&mut g, x)?;
                    let zn = g.constant(z.clone());
                    let e_adv = bound.forward(&mut g, zn)?;
                    let li = stage2_objective(
                        &mut g,
                        mm.scorer.as_ref(),
                        &sbind,
                        alignment.as_ref(),
                        e_clean,
                        e_adv,
                        anchors,
                        ds.label(i),
                        &s2,
                    )?;
                    total = Some(match total {
                        None => li,
                        Some(acc) => g.add(acc, li)?,
                    });
                }
                let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
                g.backward(loss)?;
                mm.encoder.apply_sgd(&bound, &g, cfg.train.stage12_lr)?;
                mm.scorer.apply_sgd(&sbind, &g, cfg.train.stage12_lr)?;
                let lv = g.value(loss).item();
                guard_divergence("stage2", &mm.name, &losses, lv)?;
                losses.push(lv);
            }
        }
        log.push((mm.name.clone(), losses));
    }
    model.stage_tag = "stage2".into();
    model.config_hash = cfg.config_hash();
    Ok((model, TrainLog { stage: "stage2".into(), per_modality: log }))
}

/// Attackable objective: classification cross-entropy of `z`'s anchor
/// scores for true class `t`, with the gradient taken at the input only.
fn ce_objective<'a>(
    encoder: &'a Encoder,
    scorer: &'a dyn Scorer,
    anchors: &'a AnchorMatrix,
    t: usize,
) -> impl FnMut(&Tensor) -> Result<(f64, Tensor)> + 'a {
    move |z: &Tensor| {
        let mut g = Graph::new();
        let zn = g.leaf(z.clone(), true);
        let bound = encoder.bind(&mut g, Binding::Frozen);
        let e = bound.forward(&mut g, zn)?;
        let sbind = scorer.bind(&mut g, false);
        let scores = score_against_anchors(&mut g, scorer, &sbind, e, anchors)?;
        let ce = cross_entropy(&mut g, scores, t)?;
        g.backward(ce)?;
        Ok((g.value(ce).item(), g.grad(zn)?))
    }
}

// ---- Evaluation ----------------------------------------------------------------

/// One (modality, ε) measurement: exact correct counts, never floating
/// accumulations.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCell {
    pub modality: String,
    pub epsilon: Epsilon,
    pub total: usize,
    pub clean_correct: usize,
    pub robust_correct: usize,
}

impl EvalCell {
    pub fn clean_acc(&self) -> f64 {
        self.clean_correct as f64 / self.total as f64
    }

    pub fn robust_acc(&self) -> f64 {
        self.robust_correct as f64 / self.total as f64
    }
}

/// Evaluation result for one model: clean and robust accuracy per
/// (modality, ε), plus run identity.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub stage: String,
    pub cells: Vec<EvalCell>,
    pub seed: u64,
    pub config_hash: String,
    pub wall_secs: f64,
}

impl RunMetrics {
    pub fn cell(&self, modality: &str, eps_label: &str) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.modality == modality && c.epsilon.label == eps_label)
    }

    /// Mean clean accuracy over modalities (clean counts repeat per ε).
    pub fn mean_clean_acc(&self) -> f64 {
        let mut seen = Vec::new();
        let mut sum = 0.0;
        for c in &self.cells {
            if !seen.contains(&&c.modality) {
                seen.push(&c.modality);
                sum += c.clean_acc();
            }
        }
        sum / seen.len() as f64
    }

    /// Mean robust accuracy over modalities at one budget.
    pub fn mean_robust_acc(&self, eps_label: &str) -> f64 {
        let cells: Vec<&EvalCell> =
            self.cells.iter().filter(|c| c.epsilon.label == eps_label).collect();
        cells.iter().map(|c| c.robust_acc()).sum::<f64>() / cells.len() as f64
    }
}

/// Measure clean and robust accuracy on `eval_set`. For each budget the
/// configured attack maximizes classification cross-entropy per sample;
/// per-sample seeds derive from (run seed, modality, ε index, sample
/// index), so the rayon parallelism below cannot change any result.
pub fn evaluate(
    model: &Model,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    eval_set: &[usize],
) -> Result<RunMetrics> {
    if eval_set.is_empty() {
        return Err(Error::Training("evaluation needs a non-empty sample set".into()));
    }
    let attack = make_attack(&cfg.eval.attack)?;
    let start = Instant::now();
    let mut cells = Vec::new();
    for (m, mm) in model.modalities.iter().enumerate() {
        for (ei, eps) in cfg.eval.epsilons.iter().enumerate() {
            let counts: Vec<(usize, usize)> = eval_set
                .par_iter()
                .map(|&i| -> Result<(usize, usize)> {
                    let x = ds.view(i, m);
                    let t = ds.label(i);
                    let clean_pred = classify(mm.scorer.as_ref(), &mm.encoder.encode(x)?, &model.anchors)?;
                    let acfg: AttackConfig = cfg.eval_attack_config(
                        eps.value,
                        chain(cfg.seed, &[SALT_EVAL, m as u64, ei as u64, i as u64]),
                    );
                    let mut obj = ce_objective(&mm.encoder, mm.scorer.as_ref(), &model.anchors, t);
                    let out = attack.run(&mut obj, x, &acfg)?;
                    let adv_pred =
                        classify(mm.scorer.as_ref(), &mm.encoder.encode(&out.z)?, &model.anchors)?;
                    Ok(((clean_pred == t) as usize, (adv_pred == t) as usize))
                })
                .collect::<Result<_>>()?;
            let (clean_correct, robust_correct) = counts
                .iter()
                .fold((0, 0), |(c, r), &(ci, ri)| (c + ci, r + ri));
            cells.push(EvalCell {
                modality: mm.name.clone(),
                epsilon: eps.clone(),
                total: eval_set.len(),
                clean_correct,
                robust_correct,
            });
        }
    }
    Ok(RunMetrics {
        stage: model.stage_tag.clone(),
        cells,
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

// ---- Persistence ----------------------------------------------------------------

/// Save a model to the binary container. The layout is fully ordered, so
/// save → load → save reproduces identical bytes.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "model")?;
    ck.set_meta("stage", &model.stage_tag)?;
    ck.set_meta("config_hash", &model.config_hash)?;
    ck.set_meta("embed_dim", &model.embed_dim.to_string())?;
    ck.set_meta("n_modalities", &model.modalities.len().to_string())?;
    for (i, mm) in model.modalities.iter().enumerate() {
        ck.set_meta(&format!("mod.{i}.name"), &mm.name)?;
        ck.set_meta(&format!("mod.{i}.scorer"), mm.scorer.name())?;
        ck.set_meta(
            &format!("mod.{i}.alpha_trainable"),
            if mm.scorer_init.alpha_trainable { "true" } else { "false" },
        )?;
        ck.set_meta(&format!("mod.{i}.mlp_hidden"), &mm.scorer_init.mlp_hidden.to_string())?;
    }
    ck.push("anchors", model.anchors.matrix().clone())?;
    for (i, mm) in model.modalities.iter().enumerate() {
        for (name, t) in mm.encoder.named_tensors(&format!("m{i}")) {
            ck.push(&name, t)?;
        }
        for (name, t) in mm.scorer.named_tensors(&format!("m{i}.scorer")) {
            ck.push(&name, t)?;
        }
    }
    ck.save(path)
}

/// Load a model saved by [`save_model`]. Layer geometry is recovered from
/// the stored tensors; adapters reattach when their factors are present.
pub fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    let meta = |key: &str| -> Result<&str> {
        ck.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("model checkpoint missing meta key {key:?}")))
    };
    if meta("kind")? != "model" {
        return Err(Error::Checkpoint("not a model checkpoint".into()));
    }
    let stage_tag = meta("stage")?.to_string();
    let config_hash = meta("config_hash")?.to_string();
    let embed_dim: usize = meta("embed_dim")?
        .parse()
        .map_err(|_| Error::Checkpoint("embed_dim is not an integer".into()))?;
    let n_modalities: usize = meta("n_modalities")?
        .parse()
        .map_err(|_| Error::Checkpoint("n_modalities is not an integer".into()))?;

    let anchors_t = ck
        .get("anchors")
        .ok_or_else(|| Error::Checkpoint("model checkpoint missing anchors".into()))?;
    let anchors = AnchorMatrix::from_matrix(anchors_t.clone())?;

    let mut modalities = Vec::with_capacity(n_modalities);
    for i in 0..n_modalities {
        let name = meta(&format!("mod.{i}.name"))?.to_string();
        let scorer_name = meta(&format!("mod.{i}.scorer"))?.to_string();
        let alpha_trainable = match meta(&format!("mod.{i}.alpha_trainable"))? {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Checkpoint(format!(
                    "mod.{i}.alpha_trainable is {other:?}, expected true or false"
                )))
            }
        };
        let mlp_hidden: usize = meta(&format!("mod.{i}.mlp_hidden"))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("mod.{i}.mlp_hidden is not an integer")))?;

        let mut layers = Vec::new();
        let mut j = 0;
        while let Some(weight) = ck.get(&format!("m{i}.layer{j}.weight")) {
            let bias = ck
                .get(&format!("m{i}.layer{j}.bias"))
                .ok_or_else(|| Error::Checkpoint(format!("missing m{i}.layer{j}.bias")))?;
            let adapter = match (
                ck.get(&format!("m{i}.layer{j}.lora_a")),
                ck.get(&format!("m{i}.layer{j}.lora_b")),
            ) {
                (Some(a), Some(b)) => Some(LowRankAdapter {
                    rank: a.shape()[0],
                    a: a.clone(),
                    b: b.clone(),
                }),
                (None, None) => None,
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "m{i}.layer{j} has only one adapter factor"
                    )))
                }
            };
            layers.push(Layer {
                weight: weight.clone(),
                bias: bias.clone(),
                activation: Activation::Relu, // fixed after the loop ends
                adapter,
            });
            j += 1;
        }
        if layers.is_empty() {
            return Err(Error::Checkpoint(format!("modality {i} has no layers")));
        }
        layers.last_mut().expect("non-empty").activation = Activation::None;
        let encoder = Encoder::from_layers(layers)?;

        let scorer_init = ScorerInit { alpha_trainable, mlp_hidden, seed: 0 };
        let mut scorer = make_scorer(&scorer_name, embed_dim, &scorer_init)?;
        scorer.load_named(&format!("m{i}.scorer"), ck.tensors())?;
        modalities.push(ModalityModel { name, encoder, scorer, scorer_init });
    }
    Ok(Model { modalities, anchors, embed_dim, stage_tag, config_hash })
}

// ---- Metrics CSV -----------------------------------------------------------------

/// Exact column header of every metrics CSV.
pub const CSV_HEADER: &str =
    "run_id,stage,modality,scorer,alignment,lora,lambda,epsilon,clean_acc,robust_acc,seed,config_hash";

/// The `lora` CSV field for a config.
pub fn lora_label(cfg: &ExperimentConfig) -> String {
    if cfg.lora.enabled {
        format!("rank{}", cfg.lora.rank)
    } else {
        "off".into()
    }
}

/// CSV body rows (no header) for one run's metrics. Accuracies are written
/// as exact `correct/total` rationals.
pub fn csv_rows(cfg: &ExperimentConfig, rm: &RunMetrics) -> String {
    let mut s = String::new();
    for cell in &rm.cells {
        s.push_str(&format!(
            "{},{},{},{},{},{},{:?},{},{}/{},{}/{},{},{}\n",
            cfg.run_id(),
            rm.stage,
            cell.modality,
            cfg.scorer.name,
            cfg.alignment.name,
            lora_label(cfg),
            cfg.stage2.lambda,
            cell.epsilon.label,
            cell.clean_correct,
            cell.total,
            cell.robust_correct,
            cell.total,
            rm.seed,
            rm.config_hash,
        ));
    }
    s
}

/// Write `metrics.csv` (atomically) and the run manifest into `dir`.
/// Returns the CSV path.
pub fn write_metrics(
    dir: &Path,
    cfg: &ExperimentConfig,
    metrics: &[RunMetrics],
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for rm in metrics {
        text.push_str(&csv_rows(cfg, rm));
    }
    let csv_path = dir.join("metrics.csv");
    write_atomic(&csv_path, text.as_bytes())?;
    write_atomic(&dir.join("manifest.txt"), cfg.manifest_text().as_bytes())?;
    Ok(csv_path)
}

// ---- Ablation grid ----------------------------------------------------------------

/// One grid cell's coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub scorer: String,
    pub alignment: String,
    pub lora: String,
    pub lambda: f64,
}

/// A finished (or failed) cell. Failures are recorded, not propagated, so
/// one bad cell never aborts the grid.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: GridCell,
    /// The full per-cell config (base config with the cell's axis values).
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub run_id: String,
    pub result: std::result::Result<RunMetrics, String>,
}

fn parse_lora_axis(v: &str) -> Result<(bool, usize)> {
    if v == "off" {
        return Ok((false, 0));
    }
    if let Some(r) = v.strip_prefix("rank") {
        if let Ok(rank) = r.parse::<usize>() {
            if rank >= 1 {
                return Ok((true, rank));
            }
        }
    }
    Err(Error::UnknownVariant {
        kind: "lora axis value",
        name: v.to_string(),
        accepted: "off, rank<r> (r ≥ 1)",
    })
}

/// Run the Cartesian product of the given axes over the base config. Every
/// axis value is validated before any training starts. Cells share the
/// stage-0 model (scorer-independent) and share stage-1 models per LoRA
/// setting (scorer/alignment/λ-independent); sharing is exact because every
/// random stream is salted per consumer, so a grid cell's metrics are
/// bit-identical to a standalone run of the same config.
pub fn run_ablation_grid(
    base: &ExperimentConfig,
    axes: &[(String, Vec<String>)],
    ds: &Dataset,
    train: &[usize],
    eval_set: &[usize],
) -> Result<Vec<CellOutcome>> {
    let mut scorers = vec![base.scorer.name.clone()];
    let mut alignments = vec![base.alignment.name.clone()];
    let mut loras = vec![lora_label(base)];
    let mut lambdas = vec![base.stage2.lambda];
    for (axis, values) in axes {
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!("ablation axis {axis} has no values")));
        }
        match axis.as_str() {
            "scorer" => {
                for v in values {
                    if !SCORER_NAMES.contains(&v.as_str()) {
                        return Err(Error::UnknownVariant {
                            kind: "scorer",
                            name: v.clone(),
                            accepted: "dot, scaled_dot, cosine, norm_euclid, bilinear, mlp",
                        });
                    }
                }
                scorers = values.clone();
            }
            "alignment" => {
                for v in values {
                    if !ALIGNMENT_NAMES.contains(&v.as_str()) {
                        return Err(Error::UnknownVariant {
                            kind: "alignment",
                            name: v.clone(),
                            accepted: "l1, l2, kl",
                        });
                    }
                }
                alignments = values.clone();
            }
            "lora" => {
                for v in values {
                    parse_lora_axis(v)?;
                }
                loras = values.clone();
            }
            "lambda" => {
                lambdas = values
                    .iter()
                    .map(|v| {
                        v.parse::<f64>()
                            .ok()
                            .filter(|l| l.is_finite() && *l >= 0.0)
                            .ok_or_else(|| Error::InvalidArgument(format!(
                                "lambda axis value {v:?} is not a finite number ≥ 0"
                            )))
                    })
                    .collect::<Result<_>>()?;
            }
            other => {
                return Err(Error::UnknownVariant {
                    kind: "ablation axis",
                    name: other.to_string(),
                    accepted: "scorer, alignment, lora, lambda",
                })
            }
        }
    }

    // Stage 0 never touches the scorer, so one pretrained model serves
    // every cell.
    let (model0, _) = stage0_pretrain(base, ds, train)?;
    let mut stage1_cache: BTreeMap<String, Model> = BTreeMap::new();
    let mut outcomes = Vec::new();
    for s in &scorers {
        for a in &alignments {
            for l in &loras {
                for &lam in &lambdas {
                    let mut cfg = base.clone();
                    cfg.scorer.name = s.clone();
                    cfg.alignment.name = a.clone();
                    let (enabled, rank) = parse_lora_axis(l).expect("validated above");
                    cfg.lora.enabled = enabled;
                    if enabled {
                        cfg.lora.rank = rank;
                    }
                    cfg.stage2.lambda = lam;
                    let cell = GridCell {
                        scorer: s.clone(),
                        alignment: a.clone(),
                        lora: l.clone(),
                        lambda: lam,
                    };
                    let result =
                        run_cell(&cfg, ds, train, eval_set, &model0, &mut stage1_cache)
                            .map_err(|e| e.to_string());
                    outcomes.push(CellOutcome {
                        cell,
                        config_hash: cfg.config_hash(),
                        run_id: cfg.run_id(),
                        config: cfg,
                        result,
                    });
                }
            }
        }
    }
    Ok(outcomes)
}

fn run_cell(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    train: &[usize],
    eval_set: &[usize],
    model0: &Model,
    stage1_cache: &mut BTreeMap<String, Model>,
) -> Result<RunMetrics> {
    let key = lora_label(cfg);
    if !stage1_cache.contains_key(&key) {
        let (m1, _) = stage1_fare(model0.clone(), cfg, ds, train)?;
        stage1_cache.insert(key.clone(), m1);
    }
    let mut model = stage1_cache.get(&key).expect("just inserted").clone();
    // Fresh scorer per cell, seeded exactly as a standalone run would.
    for (m, mm) in model.modalities.iter_mut().enumerate() {
        let (init, scorer) = fresh_scorer(cfg, m)?;
        mm.scorer = scorer;
        mm.scorer_init = init;
    }
    let (model2, _) = stage2_align(model, cfg, ds, train)?;
    evaluate(&model2, cfg, ds, eval_set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

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

    fn tiny_cfg(extra: &[&str]) -> ExperimentConfig {
        let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        parse_config(TINY, &overrides).unwrap()
    }

    #[test]
    fn stage0_trains_halves_loss_and_freezes_anchors() {
        let cfg = tiny_cfg(&[]);
        let prep = prepare_data(&cfg).unwrap();
        let (model, log) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
        assert_eq!(model.stage_tag, "stage0");
        for (name, losses) in &log.per_modality {
            assert!(!losses.is_empty());
            assert!(
                losses.last().unwrap() <= &(0.5 * losses.first().unwrap()),
                "{name}: {} → {}",
                losses.first().unwrap(),
                losses.last().unwrap()
            );
        }
        // anchors bit-identical to an untouched build with the same seed
        let fresh = AnchorMatrix::orthonormal(cfg.anchor_seed, 4, cfg.embed_dim).unwrap();
        assert_eq!(model.anchors.digest(), fresh.digest());
    }

    #[test]
    fn stage0_zero_epochs_builds_an_untrained_model() {
        let cfg = tiny_cfg(&["train.stage0_epochs=0"]);
        let prep = prepare_data(&cfg).unwrap();
        let (model, log) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
        assert!(log.per_modality.iter().all(|(_, l)| l.is_empty()));
        let rm = evaluate(&model, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
        assert_eq!(rm.cells.len(), 2); // 2 modalities × 1 ε
        for c in &rm.cells {
            assert_eq!(c.total, 8);
            assert!(c.clean_correct <= c.total && c.robust_correct <= c.total);
        }
    }

    #[test]
    fn stage1_at_zero_epsilon_is_a_noop() {
        let cfg = tiny_cfg(&["train.epsilon=0"]);
        let prep = prepare_data(&cfg).unwrap();
        let (model0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
        let before = model0.digest();
        let (model1, log) = stage1_fare(model0, &cfg, &prep.dataset, &prep.train).unwrap();
        assert_eq!(model1.digest(), before);
        for (_, losses) in &log.per_modality {
            assert!(losses.iter().all(|&l| l == 0.0));
        }
        assert_eq!(model1.stage_tag, format!("FARE@{}", cfg.train.epsilon.label));
    }

    #[test]
    fn stage1_trains_and_tags() {
        let cfg = tiny_cfg(&[]);
        let prep = prepare_data(&cfg).unwrap();
        let (model0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
        let before = model0.digest();
        let (model1, log) = stage1_fare(model0, &cfg, &prep.dataset, &prep.train).unwrap();
        assert_eq!(model1.stage_tag, "FARE@0.1");
        assert_ne!(model1.digest(), before);
        for (name, losses) in &log.per_modality {
            assert!(losses.first().unwrap() > &0.0, "{name}: attack found no loss");
        }
        let rational = tiny_cfg(&["train.epsilon=2/255"]);
        assert_eq!(fare_tag(&rational.train.epsilon), "FARE2");
        let rational = tiny_cfg(&["train.epsilon=4/255"]);
        assert_eq!(fare_tag(&rational.train.epsilon), "FARE4");
    }

    #[test]
    fn stage2_lambda_zero_equals_dropping_the_cma_term() {
        let prep = prepare_data(&tiny_cfg(&[])).unwrap();
        let run = |extra: &[&str]| {
            let cfg = tiny_cfg(extra);
            let (m0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
            let (m1, _) = stage1_fare(m0, &cfg, &prep.dataset, &prep.train).unwrap();
            let (m2, _) = stage2_align(m1, &cfg, &prep.dataset, &prep.train).unwrap();
            m2.digest()
        };
        let lambda_zero = run(&["stage2.lambda=0"]);
        let no_cma = run(&["stage2.cma=false"]);
        assert_eq!(lambda_zero, no_cma);
        // and stage 2 actually moved the parameters
        let untouched = {
            let cfg = tiny_cfg(&[]);
            let (m0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
            let (m1, _) = stage1_fare(m0, &cfg, &prep.dataset, &prep.train).unwrap();
            m1.digest()
        };
        assert_ne!(lambda_zero, untouched);
    }

    #[test]
    fn evaluate_is_deterministic_and_eps_zero_matches_clean() {
        let cfg = tiny_cfg(&["eval.epsilons=0"]);
        let prep = prepare_data(&cfg).unwrap();
        let (model, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
        let a = evaluate(&model, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
        let b = evaluate(&model, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
        assert_eq!(a.cells, b.cells);
        for c in &a.cells {
            assert_eq!(c.clean_correct, c.robust_correct, "{}: ε=0 must match clean", c.modality);
        }
        assert!(evaluate(&model, &cfg, &prep.dataset, &[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = tiny_cfg(&["lora.enabled=true", "lora.rank=2", "scorer.name=bilinear"]);
        let prep = prepare_data(&cfg).unwrap();
        let (m0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
        let (m1, _) = stage1_fare(m0, &cfg, &prep.dataset, &prep.train).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let p1 = tmp.path().join("model.ckpt");
        let p2 = tmp.path().join("model2.ckpt");
        save_model(&m1, &p1).unwrap();
        let loaded = load_model(&p1).unwrap();
        assert_eq!(loaded.digest(), m1.digest());
        assert_eq!(loaded.stage_tag, m1.stage_tag);
        assert_eq!(loaded.modalities[0].scorer.name(), "bilinear");
        assert!(loaded.modalities[0].encoder.has_lora());
        save_model(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // metrics identical through the round trip
        let a = evaluate(&m1, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
        let b = evaluate(&loaded, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
        assert_eq!(a.cells, b.cells);
    }

    #[test]
    fn metrics_csv_has_exact_header_and_rational_accuracies() {
        let cfg = tiny_cfg(&[]);
        let prep = prepare_data(&cfg).unwrap();
        let (model, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
        let rm = evaluate(&model, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let csv = write_metrics(tmp.path(), &cfg, std::slice::from_ref(&rm)).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 2); // 2 modalities × 1 ε
        for row in rows {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields.len(), 12);
            assert_eq!(fields[0], cfg.run_id());
            assert_eq!(fields[1], "stage0");
            assert!(fields[8].contains('/') && fields[9].contains('/'));
            assert_eq!(fields[11], cfg.config_hash());
        }
        assert!(tmp.path().join("manifest.txt").exists());
        assert!(!tmp.path().join("metrics.csv.tmp").exists());
    }

    #[test]
    fn grid_cell_matches_standalone_run_bitwise() {
        let base = tiny_cfg(&[]);
        let prep = prepare_data(&base).unwrap();
        let axes = vec![
            ("scorer".to_string(), vec!["dot".to_string(), "cosine".to_string()]),
            ("alignment".to_string(), vec!["l2".to_string()]),
        ];
        let outcomes =
            run_ablation_grid(&base, &axes, &prep.dataset, &prep.train, &prep.eval_subset)
                .unwrap();
        assert_eq!(outcomes.len(), 2);
        assert!(outcomes.iter().all(|o| o.result.is_ok()));

        // standalone run of the cosine cell
        let cfg = tiny_cfg(&["scorer.name=cosine"]);
        let (m0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
        let (m1, _) = stage1_fare(m0, &cfg, &prep.dataset, &prep.train).unwrap();
        let (m2, _) = stage2_align(m1, &cfg, &prep.dataset, &prep.train).unwrap();
        let standalone = evaluate(&m2, &cfg, &prep.dataset, &prep.eval_subset).unwrap();
        let cell = outcomes.iter().find(|o| o.cell.scorer == "cosine").unwrap();
        let grid_rm = cell.result.as_ref().unwrap();
        assert_eq!(grid_rm.cells, standalone.cells);
        assert_eq!(cell.config_hash, cfg.config_hash());

        // re-running the grid reproduces every cell
        let again =
            run_ablation_grid(&base, &axes, &prep.dataset, &prep.train, &prep.eval_subset)
                .unwrap();
        for (a, b) in outcomes.iter().zip(&again) {
            assert_eq!(a.cell, b.cell);
            assert_eq!(
                a.result.as_ref().unwrap().cells,
                b.result.as_ref().unwrap().cells
            );
        }
    }

    #[test]
    fn grid_rejects_unknown_axes_and_values_before_running() {
        let base = tiny_cfg(&[]);
        let prep = prepare_data(&base).unwrap();
        let bad_axis = vec![("optimizer".to_string(), vec!["adam".to_string()])];
        assert!(run_ablation_grid(&base, &bad_axis, &prep.dataset, &prep.train, &prep.eval_subset)
            .is_err());
        let bad_value = vec![("scorer".to_string(), vec!["euclid".to_string()])];
        assert!(
            run_ablation_grid(&base, &bad_value, &prep.dataset, &prep.train, &prep.eval_subset)
                .is_err()
        );
        let bad_lora = vec![("lora".to_string(), vec!["rank0".to_string()])];
        assert!(
            run_ablation_grid(&base, &bad_lora, &prep.dataset, &prep.train, &prep.eval_subset)
                .is_err()
        );
    }

    #[test]
    fn lora_stage1_trains_only_adapters_and_biases() {
        let cfg = tiny_cfg(&["lora.enabled=true", "lora.rank=2"]);
        let prep = prepare_data(&cfg).unwrap();
        let (m0, _) = stage0_pretrain(&cfg, &prep.dataset, &prep.train).unwrap();
        let base_weights: Vec<Tensor> = m0.modalities[0]
            .encoder
            .layers()
            .iter()
            .map(|l| l.weight.clone())
            .collect();
        let (m1, _) = stage1_fare(m0, &cfg, &prep.dataset, &prep.train).unwrap();
        assert!(m1.modalities[0].encoder.has_lora());
        for (before, layer) in base_weights.iter().zip(m1.modalities[0].encoder.layers()) {
            assert!(before.bit_eq(&layer.weight), "base weight moved under LoRA");
        }
    }
}
