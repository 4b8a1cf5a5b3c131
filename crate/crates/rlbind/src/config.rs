//! Experiment configuration: a TOML file plus `key.path=value` overrides,
//! resolved against documented defaults into one fully-validated struct.
//!
//! Three properties the rest of the system leans on:
//! - **Typo safety.** Every key in the file and every override must be a
//!   known key; anything else fails naming the offending path.
//! - **Provenance.** Each key records whether its value came from the
//!   default, the file, or a flag, and the run manifest prints it.
//! - **Identity.** `config_hash` digests the resolved semantic content
//!   (everything except the output directory), so equal hashes mean equal
//!   experiments; `run_id` is derived from it and contains no timestamps.
//!
//! Budgets such as `2/255` may be written as rational strings and parse to
//! the exact f64 quotient, keeping ε comparisons and stage tags exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::attack::{AttackConfig, ATTACK_NAMES};
use crate::data::{DatasetSpec, ModalitySpec};
use crate::error::{Error, Result};
use crate::loss::ALIGNMENT_NAMES;
use crate::scorer::SCORER_NAMES;

/// Where a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl Provenance {
    fn label(self) -> &'static str {
        match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Flag => "flag",
        }
    }
}

/// An ℓ∞ budget with its exact spelling preserved: `"2/255"` keeps the
/// rational label and carries the exact f64 quotient as its value.
#[derive(Debug, Clone, PartialEq)]
pub struct Epsilon {
    pub label: String,
    pub value: f64,
}

impl Epsilon {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let value = if let Some((num, den)) = s.split_once('/') {
            let num: u64 = num.trim().parse().map_err(|_| bad_epsilon(s))?;
            let den: u64 = den.trim().parse().map_err(|_| bad_epsilon(s))?;
            if den == 0 {
                return Err(bad_epsilon(s));
            }
            return Ok(Self { label: format!("{num}/{den}"), value: num as f64 / den as f64 });
        } else {
            s.parse::<f64>().map_err(|_| bad_epsilon(s))?
        };
        Self::from_value(value)
    }

    pub fn from_value(value: f64) -> Result<Self> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(bad_epsilon(&value.to_string()));
        }
        Ok(Self { label: format!("{value:?}"), value })
    }
}

fn bad_epsilon(s: &str) -> Error {
    Error::InvalidArgument(format!(
        "epsilon must be a finite value ≥ 0, written as a decimal or a rational like 2/255; got {s:?}"
    ))
}

/// Low-rank adapter settings for the fine-tuning stages.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraCfg {
    pub enabled: bool,
    pub rank: usize,
}

/// Correspondence-scorer selection and its knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerCfg {
    pub name: String,
    pub alpha_trainable: bool,
    pub mlp_hidden: usize,
}

/// Alignment-loss selection for the stage-2 invariance term.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentCfg {
    pub name: String,
    pub tau_prime: f64,
}

/// Training-loop knobs shared by the three stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCfg {
    pub batch_size: usize,
    pub stage0_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage0_lr: f64,
    pub stage12_lr: f64,
    /// InfoNCE temperature for stage-0 pretraining.
    pub tau: f64,
    /// Training-time attack budget (stages 1 and 2).
    pub epsilon: Epsilon,
    pub attack: String,
    pub attack_iters: usize,
}

/// Stage-2 objective composition: CE on clean scores, CE on adversarial
/// scores, and the λ-weighted cross-modal alignment term.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Cfg {
    pub lambda: f64,
    pub clean_ce: bool,
    pub adv_ce: bool,
    pub cma: bool,
}

/// Evaluation protocol: budgets, attack strength, and subset size.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCfg {
    pub epsilons: Vec<Epsilon>,
    pub attack: String,
    pub attack_iters: usize,
    pub k_per_class: usize,
}

/// The fully-resolved experiment: dataset recipe, model geometry, stage
/// hyperparameters, evaluation protocol, and output location.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Run seed: training batch order, attack seeds, and splits derive from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub dataset_seed: u64,
    pub anchor_seed: u64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub lora: LoraCfg,
    pub scorer: ScorerCfg,
    pub alignment: AlignmentCfg,
    pub train: TrainCfg,
    pub stage2: Stage2Cfg,
    pub eval: EvalCfg,
    provenance: BTreeMap<String, Provenance>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetSpec::default(),
            dataset_seed: 7,
            anchor_seed: 5,
            hidden: vec![64],
            embed_dim: 16,
            lora: LoraCfg { enabled: false, rank: 4 },
            scorer: ScorerCfg { name: "dot".into(), alpha_trainable: false, mlp_hidden: 32 },
            alignment: AlignmentCfg { name: "l2".into(), tau_prime: 1.0 },
            train: TrainCfg {
                batch_size: 16,
                stage0_epochs: 40,
                stage1_epochs: 60,
                stage2_epochs: 1,
                stage0_lr: 0.05,
                stage12_lr: 0.01,
                tau: 0.07,
                epsilon: Epsilon { label: "0.05".into(), value: 0.05 },
                attack: "apgd".into(),
                attack_iters: 10,
            },
            stage2: Stage2Cfg { lambda: 1.0, clean_ce: true, adv_ce: true, cma: true },
            eval: EvalCfg {
                epsilons: vec![
                    Epsilon { label: "0.05".into(), value: 0.05 },
                    Epsilon { label: "0.1".into(), value: 0.1 },
                ],
                attack: "apgd".into(),
                attack_iters: 100,
                k_per_class: 10,
            },
            provenance: BTreeMap::new(),
        }
    }
}

/// Parse config text plus `key.path=value` overrides into a validated
/// config. Missing file content means "all defaults".
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut root: Table = text
        .parse()
        .map_err(|e| Error::Config { key: "<config>".into(), msg: format!("TOML parse error: {e}") })?;
    let mut flagged = BTreeSet::new();
    for spec in overrides {
        flagged.insert(apply_override(&mut root, spec)?);
    }
    resolve(root, flagged)
}

/// Parse a config file plus overrides.
pub fn parse_config_file(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, overrides)
}

/// Parse a standalone dataset-spec file: the dataset keys at top level,
/// optionally with a `seed`. Used by data generation.
pub fn parse_dataset_spec(text: &str) -> Result<(DatasetSpec, Option<u64>)> {
    let mut root: Table = text
        .parse()
        .map_err(|e| Error::Config { key: "<spec>".into(), msg: format!("TOML parse error: {e}") })?;
    let mut ctx = Resolver { prov: BTreeMap::new(), flagged: BTreeSet::new() };
    let seed = match root.remove("seed") {
        Some(v) => Some(ctx.u64_of(v, "seed")?),
        None => None,
    };
    let spec = ctx.resolve_dataset_keys(&mut root, "", &DatasetSpec::default())?;
    ensure_empty(&root, "")?;
    spec.validate()?;
    Ok((spec, seed))
}

fn apply_override(root: &mut Table, spec: &str) -> Result<String> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        key: spec.to_string(),
        msg: "override must look like key.path=value".into(),
    })?;
    let path = path.trim();
    let segs: Vec<&str> = path.split('.').collect();
    if path.is_empty() || segs.iter().any(|s| s.is_empty()) {
        return Err(Error::Config {
            key: spec.to_string(),
            msg: "override key path has an empty segment".into(),
        });
    }
    let mut cur = root;
    for seg in &segs[..segs.len() - 1] {
        cur = match cur
            .entry(seg.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            other => {
                return Err(Error::Config {
                    key: path.to_string(),
                    msg: format!("cannot descend into non-table value {other}"),
                })
            }
        };
    }
    cur.insert(segs[segs.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(path.to_string())
}

fn parse_override_value(raw: &str) -> Value {
    if raw.contains(',') {
        Value::Array(raw.split(',').map(|p| parse_override_scalar(p.trim())).collect())
    } else {
        parse_override_scalar(raw)
    }
}

fn parse_override_scalar(raw: &str) -> Value {
    if let Ok(i) = raw.parse::<i64>() {
        Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        Value::Boolean(b)
    } else {
        Value::String(raw.to_string())
    }
}

struct Resolver {
    prov: BTreeMap<String, Provenance>,
    flagged: BTreeSet<String>,
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn ensure_empty(t: &Table, prefix: &str) -> Result<()> {
    if let Some(key) = t.keys().next() {
        return Err(Error::UnknownConfigKey { key: join(prefix, key) });
    }
    Ok(())
}

impl Resolver {
    fn record(&mut self, path: &str, present: bool) {
        let p = if !present {
            Provenance::Default
        } else if self.flagged.contains(path) {
            Provenance::Flag
        } else {
            Provenance::File
        };
        self.prov.insert(path.to_string(), p);
    }

    fn take(&mut self, t: &mut Table, path: &str, key: &str) -> Option<Value> {
        let v = t.remove(key);
        self.record(path, v.is_some());
        v
    }

    fn section(&mut self, t: &mut Table, key: &str) -> Result<Table> {
        match t.remove(key) {
            None => Ok(Table::new()),
            Some(Value::Table(sub)) => Ok(sub),
            Some(other) => Err(Error::Config {
                key: key.to_string(),
                msg: format!("expected a table, got {other}"),
            }),
        }
    }

    fn usize_of(&self, v: Value, path: &str) -> Result<usize> {
        match v {
            Value::Integer(i) if i >= 0 => Ok(i as usize),
            other => Err(Error::Config {
                key: path.to_string(),
                msg: format!("expected a non-negative integer, got {other}"),
            }),
        }
    }

    fn u64_of(&self, v: Value, path: &str) -> Result<u64> {
        match v {
            Value::Integer(i) if i >= 0 => Ok(i as u64),
            other => Err(Error::Config {
                key: path.to_string(),
                msg: format!("expected a non-negative integer, got {other}"),
            }),
        }
    }

    fn f64_of(&self, v: Value, path: &str) -> Result<f64> {
        let f = match v {
            Value::Integer(i) => i as f64,
            Value::Float(f) => f,
            other => {
                return Err(Error::Config {
                    key: path.to_string(),
                    msg: format!("expected a number, got {other}"),
                })
            }
        };
        if !f.is_finite() {
            return Err(Error::Config { key: path.to_string(), msg: "value must be finite".into() });
        }
        Ok(f)
    }

    fn bool_of(&self, v: Value, path: &str) -> Result<bool> {
        match v {
            Value::Boolean(b) => Ok(b),
            other => Err(Error::Config {
                key: path.to_string(),
                msg: format!("expected true or false, got {other}"),
            }),
        }
    }

    fn string_of(&self, v: Value, path: &str) -> Result<String> {
        match v {
            Value::String(s) => Ok(s),
            other => Err(Error::Config {
                key: path.to_string(),
                msg: format!("expected a string, got {other}"),
            }),
        }
    }

    fn epsilon_of(&self, v: Value, path: &str) -> Result<Epsilon> {
        match v {
            Value::String(s) => Epsilon::parse(&s),
            Value::Float(f) => Epsilon::from_value(f),
            Value::Integer(i) => Epsilon::from_value(i as f64),
            other => Err(Error::Config {
                key: path.to_string(),
                msg: format!("expected an epsilon (decimal or rational string), got {other}"),
            }),
        }
        .map_err(|e| Error::Config { key: path.to_string(), msg: e.to_string() })
    }

    fn resolve_dataset_keys(
        &mut self,
        t: &mut Table,
        prefix: &str,
        defaults: &DatasetSpec,
    ) -> Result<DatasetSpec> {
        let mut spec = defaults.clone();
        if let Some(v) = self.take(t, &join(prefix, "n_classes"), "n_classes") {
            spec.n_classes = self.usize_of(v, &join(prefix, "n_classes"))?;
        }
        if let Some(v) = self.take(t, &join(prefix, "samples_per_class"), "samples_per_class") {
            spec.samples_per_class = self.usize_of(v, &join(prefix, "samples_per_class"))?;
        }
        if let Some(v) = self.take(t, &join(prefix, "latent_dim"), "latent_dim") {
            spec.latent_dim = self.usize_of(v, &join(prefix, "latent_dim"))?;
        }
        if let Some(v) = self.take(t, &join(prefix, "train_fraction"), "train_fraction") {
            spec.train_fraction = self.f64_of(v, &join(prefix, "train_fraction"))?;
        }
        let mods_path = join(prefix, "modalities");
        if let Some(v) = self.take(t, &mods_path, "modalities") {
            let arr = match v {
                Value::Array(a) => a,
                other => {
                    return Err(Error::Config {
                        key: mods_path,
                        msg: format!("expected an array of modality tables, got {other}"),
                    })
                }
            };
            let mut mods = Vec::with_capacity(arr.len());
            for (i, item) in arr.into_iter().enumerate() {
                let mpath = format!("{mods_path}[{i}]");
                let mut mt = match item {
                    Value::Table(t) => t,
                    other => {
                        return Err(Error::Config {
                            key: mpath,
                            msg: format!("expected a modality table, got {other}"),
                        })
                    }
                };
                let name = match mt.remove("name") {
                    Some(v) => self.string_of(v, &format!("{mpath}.name"))?,
                    None => {
                        return Err(Error::Config {
                            key: format!("{mpath}.name"),
                            msg: "modality needs a name".into(),
                        })
                    }
                };
                let mut m = ModalitySpec {
                    name,
                    input_dim: 32,
                    mixing_seed: 100 + i as u64,
                    noise_std: 0.25,
                    tanh_nonlinearity: false,
                };
                if let Some(v) = mt.remove("input_dim") {
                    m.input_dim = self.usize_of(v, &format!("{mpath}.input_dim"))?;
                }
                if let Some(v) = mt.remove("mixing_seed") {
                    m.mixing_seed = self.u64_of(v, &format!("{mpath}.mixing_seed"))?;
                }
                if let Some(v) = mt.remove("noise_std") {
                    m.noise_std = self.f64_of(v, &format!("{mpath}.noise_std"))?;
                }
                if let Some(v) = mt.remove("tanh") {
                    m.tanh_nonlinearity = self.bool_of(v, &format!("{mpath}.tanh"))?;
                }
                ensure_empty(&mt, &mpath)?;
                mods.push(m);
            }
            spec.modalities = mods;
        }
        Ok(spec)
    }
}

fn resolve(mut root: Table, flagged: BTreeSet<String>) -> Result<ExperimentConfig> {
    let mut ctx = Resolver { prov: BTreeMap::new(), flagged };
    let mut cfg = ExperimentConfig::default();

    if let Some(v) = ctx.take(&mut root, "seed", "seed") {
        cfg.seed = ctx.u64_of(v, "seed")?;
    }
    if let Some(v) = ctx.take(&mut root, "output_dir", "output_dir") {
        cfg.output_dir = PathBuf::from(ctx.string_of(v, "output_dir")?);
    }

    let mut ds = ctx.section(&mut root, "dataset")?;
    if let Some(v) = ctx.take(&mut ds, "dataset.seed", "seed") {
        cfg.dataset_seed = ctx.u64_of(v, "dataset.seed")?;
    }
    cfg.dataset = ctx.resolve_dataset_keys(&mut ds, "dataset", &cfg.dataset)?;
    ensure_empty(&ds, "dataset")?;

    let mut enc = ctx.section(&mut root, "encoder")?;
    if let Some(v) = ctx.take(&mut enc, "encoder.hidden", "hidden") {
        let arr = match v {
            Value::Array(a) => a,
            scalar => vec![scalar],
        };
        cfg.hidden = arr
            .into_iter()
            .map(|v| ctx.usize_of(v, "encoder.hidden"))
            .collect::<Result<_>>()?;
    }
    if let Some(v) = ctx.take(&mut enc, "encoder.embed_dim", "embed_dim") {
        cfg.embed_dim = ctx.usize_of(v, "encoder.embed_dim")?;
    }
    if let Some(v) = ctx.take(&mut enc, "encoder.anchor_seed", "anchor_seed") {
        cfg.anchor_seed = ctx.u64_of(v, "encoder.anchor_seed")?;
    }
    ensure_empty(&enc, "encoder")?;

    let mut lora = ctx.section(&mut root, "lora")?;
    if let Some(v) = ctx.take(&mut lora, "lora.enabled", "enabled") {
        cfg.lora.enabled = ctx.bool_of(v, "lora.enabled")?;
    }
    if let Some(v) = ctx.take(&mut lora, "lora.rank", "rank") {
        cfg.lora.rank = ctx.usize_of(v, "lora.rank")?;
    }
    ensure_empty(&lora, "lora")?;

    let mut sc = ctx.section(&mut root, "scorer")?;
    if let Some(v) = ctx.take(&mut sc, "scorer.name", "name") {
        cfg.scorer.name = ctx.string_of(v, "scorer.name")?;
    }
    if let Some(v) = ctx.take(&mut sc, "scorer.alpha_trainable", "alpha_trainable") {
        cfg.scorer.alpha_trainable = ctx.bool_of(v, "scorer.alpha_trainable")?;
    }
    if let Some(v) = ctx.take(&mut sc, "scorer.mlp_hidden", "mlp_hidden") {
        cfg.scorer.mlp_hidden = ctx.usize_of(v, "scorer.mlp_hidden")?;
    }
    ensure_empty(&sc, "scorer")?;

    let mut al = ctx.section(&mut root, "alignment")?;
    if let Some(v) = ctx.take(&mut al, "alignment.name", "name") {
        cfg.alignment.name = ctx.string_of(v, "alignment.name")?;
    }
    if let Some(v) = ctx.take(&mut al, "alignment.tau_prime", "tau_prime") {
        cfg.alignment.tau_prime = ctx.f64_of(v, "alignment.tau_prime")?;
    }
    ensure_empty(&al, "alignment")?;

    let mut tr = ctx.section(&mut root, "train")?;
    if let Some(v) = ctx.take(&mut tr, "train.batch_size", "batch_size") {
        cfg.train.batch_size = ctx.usize_of(v, "train.batch_size")?;
    }
    if let Some(v) = ctx.take(&mut tr, "train.stage0_epochs", "stage0_epochs") {
        cfg.train.stage0_epochs = ctx.usize_of(v, "train.stage0_epochs")?;
    }
    if let Some(v) = ctx.take(&mut tr, "train.stage1_epochs", "stage1_epochs") {
        cfg.train.stage1_epochs = ctx.usize_of(v, "train.stage1_epochs")?;
    }
    if let Some(v) = ctx.take(&mut tr, "train.stage2_epochs", "stage2_epochs") {
        cfg.train.stage2_epochs = ctx.usize_of(v, "train.stage2_epochs")?;
    }
    if let Some(v) = ctx.take(&mut tr, "train.stage0_lr", "stage0_lr") {
        cfg.train.stage0_lr = ctx.f64_of(v, "train.stage0_lr")?;
    }
    if let Some(v) = ctx.take(&mut tr, "train.stage12_lr", "stage12_lr") {
        cfg.train.stage12_lr = ctx.f64_of(v, "train.stage12_lr")?;
    }
    if let Some(v) = ctx.take(&mut tr, "train.tau", "tau") {
        cfg.train.tau = ctx.f64_of(v, "train.tau")?;
    }
    if let Some(v) = ctx.take(&mut tr, "train.epsilon", "epsilon") {
        cfg.train.epsilon = ctx.epsilon_of(v, "train.epsilon")?;
    }
    if let Some(v) = ctx.take(&mut tr, "train.attack", "attack") {
        cfg.train.attack = ctx.string_of(v, "train.attack")?;
    }
    if let Some(v) = ctx.take(&mut tr, "train.attack_iters", "attack_iters") {
        cfg.train.attack_iters = ctx.usize_of(v, "train.attack_iters")?;
    }
    ensure_empty(&tr, "train")?;

    let mut s2 = ctx.section(&mut root, "stage2")?;
    if let Some(v) = ctx.take(&mut s2, "stage2.lambda", "lambda") {
        cfg.stage2.lambda = ctx.f64_of(v, "stage2.lambda")?;
    }
    if let Some(v) = ctx.take(&mut s2, "stage2.clean_ce", "clean_ce") {
        cfg.stage2.clean_ce = ctx.bool_of(v, "stage2.clean_ce")?;
    }
    if let Some(v) = ctx.take(&mut s2, "stage2.adv_ce", "adv_ce") {
        cfg.stage2.adv_ce = ctx.bool_of(v, "stage2.adv_ce")?;
    }
    if let Some(v) = ctx.take(&mut s2, "stage2.cma", "cma") {
        cfg.stage2.cma = ctx.bool_of(v, "stage2.cma")?;
    }
    ensure_empty(&s2, "stage2")?;

    let mut ev = ctx.section(&mut root, "eval")?;
    if let Some(v) = ctx.take(&mut ev, "eval.epsilons", "epsilons") {
        let items = match v {
            Value::Array(a) => a,
            scalar => vec![scalar],
        };
        cfg.eval.epsilons = items
            .into_iter()
            .map(|v| ctx.epsilon_of(v, "eval.epsilons"))
            .collect::<Result<_>>()?;
    }
    if let Some(v) = ctx.take(&mut ev, "eval.attack", "attack") {
        cfg.eval.attack = ctx.string_of(v, "eval.attack")?;
    }
    if let Some(v) = ctx.take(&mut ev, "eval.attack_iters", "attack_iters") {
        cfg.eval.attack_iters = ctx.usize_of(v, "eval.attack_iters")?;
    }
    if let Some(v) = ctx.take(&mut ev, "eval.k_per_class", "k_per_class") {
        cfg.eval.k_per_class = ctx.usize_of(v, "eval.k_per_class")?;
    }
    ensure_empty(&ev, "eval")?;

    ensure_empty(&root, "")?;
    cfg.provenance = ctx.prov;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if !SCORER_NAMES.contains(&self.scorer.name.as_str()) {
            return Err(Error::UnknownVariant {
                kind: "scorer",
                name: self.scorer.name.clone(),
                accepted: "dot, scaled_dot, cosine, norm_euclid, bilinear, mlp",
            });
        }
        if !ALIGNMENT_NAMES.contains(&self.alignment.name.as_str()) {
            return Err(Error::UnknownVariant {
                kind: "alignment",
                name: self.alignment.name.clone(),
                accepted: "l1, l2, kl",
            });
        }
        for (key, name) in [("train.attack", &self.train.attack), ("eval.attack", &self.eval.attack)]
        {
            if !ATTACK_NAMES.contains(&name.as_str()) {
                return Err(Error::UnknownVariant {
                    kind: if key.starts_with("train") { "train attack" } else { "eval attack" },
                    name: name.clone(),
                    accepted: "pgd, apgd",
                });
            }
        }
        if self.embed_dim < 2 {
            return Err(Error::Config {
                key: "encoder.embed_dim".into(),
                msg: "embedding dimension must be ≥ 2".into(),
            });
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config {
                key: "encoder.hidden".into(),
                msg: "hidden widths must be positive".into(),
            });
        }
        if self.lora.enabled && self.lora.rank < 1 {
            return Err(Error::Config {
                key: "lora.rank".into(),
                msg: "LoRA rank must be ≥ 1 when enabled".into(),
            });
        }
        if self.scorer.mlp_hidden < 1 {
            return Err(Error::Config {
                key: "scorer.mlp_hidden".into(),
                msg: "MLP hidden width must be ≥ 1".into(),
            });
        }
        if !(self.alignment.tau_prime > 0.0 && self.alignment.tau_prime.is_finite()) {
            return Err(Error::Config {
                key: "alignment.tau_prime".into(),
                msg: "τ′ must be a finite value > 0".into(),
            });
        }
        if self.train.batch_size < 2 {
            return Err(Error::Config {
                key: "train.batch_size".into(),
                msg: "contrastive batches need ≥ 2 samples".into(),
            });
        }
        for (key, lr) in [
            ("train.stage0_lr", self.train.stage0_lr),
            ("train.stage12_lr", self.train.stage12_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "learning rate must be a finite value > 0".into(),
                });
            }
        }
        if !(self.train.tau > 0.0 && self.train.tau.is_finite()) {
            return Err(Error::Config {
                key: "train.tau".into(),
                msg: "τ must be a finite value > 0".into(),
            });
        }
        if self.train.attack_iters < 1 || self.eval.attack_iters < 1 {
            return Err(Error::Config {
                key: "attack_iters".into(),
                msg: "attack iteration counts must be ≥ 1".into(),
            });
        }
        if !(self.stage2.lambda >= 0.0 && self.stage2.lambda.is_finite()) {
            return Err(Error::Config {
                key: "stage2.lambda".into(),
                msg: "λ must be a finite value ≥ 0".into(),
            });
        }
        if !(self.stage2.clean_ce || self.stage2.adv_ce || self.stage2.cma) {
            return Err(Error::Config {
                key: "stage2".into(),
                msg: "at least one of clean_ce, adv_ce, cma must be enabled".into(),
            });
        }
        if self.eval.epsilons.is_empty() {
            return Err(Error::Config {
                key: "eval.epsilons".into(),
                msg: "evaluation needs at least one ε".into(),
            });
        }
        if self.eval.k_per_class < 1 {
            return Err(Error::Config {
                key: "eval.k_per_class".into(),
                msg: "k_per_class must be ≥ 1".into(),
            });
        }
        Ok(())
    }

    /// Attack settings for crafting training-time adversaries.
    pub fn train_attack_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            n_iter: self.train.attack_iters,
            ..AttackConfig::train(self.train.epsilon.value, seed)
        }
    }

    /// Attack settings for evaluation at the given budget.
    pub fn eval_attack_config(&self, epsilon: f64, seed: u64) -> AttackConfig {
        AttackConfig {
            n_iter: self.eval.attack_iters,
            ..AttackConfig::eval(epsilon, seed)
        }
    }

    /// The semantic content of the run, one `key = value` line each, in a
    /// fixed order. Excludes the output directory: two configs with equal
    /// identity text are the same experiment.
    pub fn identity_text(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: &str| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv(&mut s, "seed", &self.seed.to_string());
        kv(&mut s, "dataset.seed", &self.dataset_seed.to_string());
        kv(&mut s, "dataset.n_classes", &self.dataset.n_classes.to_string());
        kv(&mut s, "dataset.samples_per_class", &self.dataset.samples_per_class.to_string());
        kv(&mut s, "dataset.latent_dim", &self.dataset.latent_dim.to_string());
        kv(&mut s, "dataset.train_fraction", &format!("{:?}", self.dataset.train_fraction));
        let mods = self
            .dataset
            .modalities
            .iter()
            .map(|m| {
                format!(
                    "{}:{}:{}:{:?}:{}",
                    m.name,
                    m.input_dim,
                    m.mixing_seed,
                    m.noise_std,
                    if m.tanh_nonlinearity { "tanh" } else { "plain" }
                )
            })
            .collect::<Vec<_>>()
            .join(",");
        kv(&mut s, "dataset.modalities", &mods);
        let hidden = self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
        kv(&mut s, "encoder.hidden", &hidden);
        kv(&mut s, "encoder.embed_dim", &self.embed_dim.to_string());
        kv(&mut s, "encoder.anchor_seed", &self.anchor_seed.to_string());
        kv(&mut s, "lora.enabled", &self.lora.enabled.to_string());
        kv(&mut s, "lora.rank", &self.lora.rank.to_string());
        kv(&mut s, "scorer.name", &self.scorer.name);
        kv(&mut s, "scorer.alpha_trainable", &self.scorer.alpha_trainable.to_string());
        kv(&mut s, "scorer.mlp_hidden", &self.scorer.mlp_hidden.to_string());
        kv(&mut s, "alignment.name", &self.alignment.name);
        kv(&mut s, "alignment.tau_prime", &format!("{:?}", self.alignment.tau_prime));
        kv(&mut s, "train.batch_size", &self.train.batch_size.to_string());
        kv(&mut s, "train.stage0_epochs", &self.train.stage0_epochs.to_string());
        kv(&mut s, "train.stage1_epochs", &self.train.stage1_epochs.to_string());
        kv(&mut s, "train.stage2_epochs", &self.train.stage2_epochs.to_string());
        kv(&mut s, "train.stage0_lr", &format!("{:?}", self.train.stage0_lr));
        kv(&mut s, "train.stage12_lr", &format!("{:?}", self.train.stage12_lr));
        kv(&mut s, "train.tau", &format!("{:?}", self.train.tau));
        kv(&mut s, "train.epsilon", &self.train.epsilon.label);
        kv(&mut s, "train.attack", &self.train.attack);
        kv(&mut s, "train.attack_iters", &self.train.attack_iters.to_string());
        kv(&mut s, "stage2.lambda", &format!("{:?}", self.stage2.lambda));
        kv(&mut s, "stage2.clean_ce", &self.stage2.clean_ce.to_string());
        kv(&mut s, "stage2.adv_ce", &self.stage2.adv_ce.to_string());
        kv(&mut s, "stage2.cma", &self.stage2.cma.to_string());
        let eps = self
            .eval
            .epsilons
            .iter()
            .map(|e| e.label.clone())
            .collect::<Vec<_>>()
            .join(",");
        kv(&mut s, "eval.epsilons", &eps);
        kv(&mut s, "eval.attack", &self.eval.attack);
        kv(&mut s, "eval.attack_iters", &self.eval.attack_iters.to_string());
        kv(&mut s, "eval.k_per_class", &self.eval.k_per_class.to_string());
        s
    }

    /// Hex SHA-256 of the identity text.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.identity_text().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Stable run identifier: a hash prefix, no timestamps.
    pub fn run_id(&self) -> String {
        self.config_hash()[..12].to_string()
    }

    /// Provenance of a resolved key (`Default` if never touched).
    pub fn provenance(&self, key: &str) -> Provenance {
        self.provenance.get(key).copied().unwrap_or(Provenance::Default)
    }

    /// Human-readable manifest: version, identity, and per-key provenance.
    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# run manifest");
        let _ = writeln!(s, "# library version {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "# run_id {}", self.run_id());
        let _ = writeln!(s, "# config_hash {}", self.config_hash());
        let _ = writeln!(s, "# output_dir {}", self.output_dir.display());
        for line in self.identity_text().lines() {
            let key = line.split(" = ").next().unwrap_or("");
            let _ = writeln!(s, "{line}  # {}", self.provenance(key).label());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse_config("", &[]).unwrap();
        let def = ExperimentConfig::default();
        assert_eq!(cfg.seed, def.seed);
        assert_eq!(cfg.dataset, def.dataset);
        assert_eq!(cfg.scorer, def.scorer);
        assert_eq!(cfg.alignment, def.alignment);
        assert_eq!(cfg.train, def.train);
        assert_eq!(cfg.stage2, def.stage2);
        assert_eq!(cfg.eval, def.eval);
        assert_eq!(cfg.provenance("scorer.name"), Provenance::Default);
        assert_eq!(cfg.identity_text(), def.identity_text());
    }

    #[test]
    fn rational_epsilon_parses_exactly() {
        let e = Epsilon::parse("2/255").unwrap();
        assert_eq!(e.label, "2/255");
        assert_eq!(e.value.to_bits(), (2.0f64 / 255.0f64).to_bits());
        let e = Epsilon::parse("4/255").unwrap();
        assert_eq!(e.value.to_bits(), (4.0f64 / 255.0f64).to_bits());
        let e = Epsilon::parse("0.05").unwrap();
        assert_eq!(e.value, 0.05);
        assert!(Epsilon::parse("2/0").is_err());
        assert!(Epsilon::parse("-0.1").is_err());
        assert!(Epsilon::parse("nan").is_err());

        let cfg = parse_config("[train]\nepsilon = \"2/255\"", &[]).unwrap();
        assert_eq!(cfg.train.epsilon.value.to_bits(), (2.0f64 / 255.0f64).to_bits());
        assert_eq!(cfg.train.epsilon.label, "2/255");
    }

    #[test]
    fn flag_override_beats_file_and_records_provenance() {
        let text = "[scorer]\nname = \"cosine\"\n[train]\nbatch_size = 8\n";
        let cfg = parse_config(text, &["scorer.name=dot".into()]).unwrap();
        assert_eq!(cfg.scorer.name, "dot");
        assert_eq!(cfg.provenance("scorer.name"), Provenance::Flag);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.provenance("train.batch_size"), Provenance::File);
        assert_eq!(cfg.provenance("train.tau"), Provenance::Default);
    }

    #[test]
    fn override_types_and_lists() {
        let cfg = parse_config(
            "",
            &[
                "seed=42".into(),
                "stage2.lambda=0.5".into(),
                "stage2.cma=false".into(),
                "eval.epsilons=2/255,4/255".into(),
                "train.epsilon=0.05".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.stage2.lambda, 0.5);
        assert!(!cfg.stage2.cma);
        assert_eq!(cfg.eval.epsilons.len(), 2);
        assert_eq!(cfg.eval.epsilons[0].label, "2/255");
        assert_eq!(cfg.train.epsilon.value, 0.05);
        // single scalar is accepted as a one-element ε list
        let cfg = parse_config("", &["eval.epsilons=0.1".into()]).unwrap();
        assert_eq!(cfg.eval.epsilons.len(), 1);
        assert_eq!(cfg.eval.epsilons[0].value, 0.1);
    }

    #[test]
    fn unknown_keys_rejected_with_full_path() {
        let err = parse_config("[train]\nlearning_rate = 0.1\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::UnknownConfigKey { key } if key == "train.learning_rate"));
        let err = parse_config("wat = 1\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::UnknownConfigKey { key } if key == "wat"));
        let text = "[[dataset.modalities]]\nname = \"image\"\ncolor_space = \"rgb\"\n";
        let err = parse_config(text, &[]).unwrap_err();
        assert!(
            matches!(&err, Error::UnknownConfigKey { key } if key == "dataset.modalities[0].color_space"),
            "{err}"
        );
        let err = parse_config("", &["train.learning_rate=0.1".into()]).unwrap_err();
        assert!(matches!(&err, Error::UnknownConfigKey { key } if key == "train.learning_rate"));
    }

    #[test]
    fn wrong_types_name_the_key() {
        let err = parse_config("[train]\nbatch_size = \"large\"\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "train.batch_size"));
        let err = parse_config("[stage2]\nclean_ce = 1\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "stage2.clean_ce"));
    }

    #[test]
    fn unknown_variant_names_fail_with_accepted_list() {
        let err = parse_config("[scorer]\nname = \"euclid\"\n", &[]).unwrap_err();
        match err {
            Error::UnknownVariant { kind, name, accepted } => {
                assert_eq!(kind, "scorer");
                assert_eq!(name, "euclid");
                assert!(accepted.contains("cosine"));
            }
            other => panic!("unexpected error {other}"),
        }
        assert!(parse_config("[alignment]\nname = \"js\"\n", &[]).is_err());
        assert!(parse_config("[eval]\nattack = \"fgsm\"\n", &[]).is_err());
    }

    #[test]
    fn validation_failures() {
        assert!(parse_config(
            "[stage2]\nclean_ce = false\nadv_ce = false\ncma = false\n",
            &[]
        )
        .is_err());
        assert!(parse_config("[stage2]\nlambda = -1.0\n", &[]).is_err());
        assert!(parse_config("[train]\ntau = 0.0\n", &[]).is_err());
        assert!(parse_config("[eval]\nepsilons = []\n", &[]).is_err());
        assert!(parse_config("[train]\nbatch_size = 1\n", &[]).is_err());
        assert!(parse_config("[alignment]\ntau_prime = -1.0\n", &[]).is_err());
    }

    #[test]
    fn hash_tracks_semantics_not_output_location() {
        let a = parse_config("seed = 3\n", &[]).unwrap();
        let b = parse_config("seed = 3\noutput_dir = \"elsewhere\"\n", &[]).unwrap();
        let c = parse_config("seed = 4\n", &[]).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.run_id().len(), 12);
        assert_eq!(a.run_id(), a.config_hash()[..12].to_string());
    }

    #[test]
    fn manifest_lists_every_key_with_provenance() {
        let cfg = parse_config("seed = 9\n", &["stage2.lambda=2.0".into()]).unwrap();
        let m = cfg.manifest_text();
        assert!(m.contains("seed = 9  # file"));
        assert!(m.contains("stage2.lambda = 2.0  # flag"));
        assert!(m.contains("train.tau = 0.07  # default"));
        assert!(m.contains(&format!("# run_id {}", cfg.run_id())));
    }

    #[test]
    fn custom_modalities_resolve() {
        let text = r#"
[dataset]
n_classes = 4
samples_per_class = 10
[[dataset.modalities]]
name = "thermal"
input_dim = 24
mixing_seed = 9
noise_std = 0.4
tanh = true
"#;
        let cfg = parse_config(text, &[]).unwrap();
        assert_eq!(cfg.dataset.modalities.len(), 1);
        let m = &cfg.dataset.modalities[0];
        assert_eq!(m.name, "thermal");
        assert_eq!(m.input_dim, 24);
        assert_eq!(m.mixing_seed, 9);
        assert_eq!(m.noise_std, 0.4);
        assert!(m.tanh_nonlinearity);
    }

    #[test]
    fn dataset_spec_file_parses_standalone() {
        let text = "seed = 13\nn_classes = 4\nsamples_per_class = 6\n";
        let (spec, seed) = parse_dataset_spec(text).unwrap();
        assert_eq!(spec.n_classes, 4);
        assert_eq!(spec.samples_per_class, 6);
        assert_eq!(seed, Some(13));
        let (_, none) = parse_dataset_spec("n_classes = 4\n").unwrap();
        assert_eq!(none, None);
        assert!(parse_dataset_spec("n_classez = 4\n").is_err());
    }

    #[test]
    fn attack_config_builders_reflect_settings() {
        let cfg = parse_config(
            "[train]\nepsilon = \"4/255\"\nattack_iters = 7\n[eval]\nattack_iters = 50\n",
            &[],
        )
        .unwrap();
        let t = cfg.train_attack_config(3);
        assert_eq!(t.epsilon.to_bits(), (4.0f64 / 255.0f64).to_bits());
        assert_eq!(t.n_iter, 7);
        assert!(!t.random_start);
        let e = cfg.eval_attack_config(0.05, 4);
        assert_eq!(e.n_iter, 50);
        assert!(e.random_start);
        assert_eq!(e.seed, 4);
    }
}
