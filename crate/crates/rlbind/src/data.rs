//! Deterministic synthetic multi-modal classification data.
//!
//! Each class owns a latent prototype (a unit vector kept at pairwise
//! cosine ≤ 0.5 from the others, reusing the anchor construction). A sample
//! draws an independent Gaussian perturbation of its class prototype per
//! modality, pushes it through that modality's fixed random mixing matrix,
//! and squashes with a sigmoid so every observed value lands in [0,1] —
//! which is what makes ε = k/255 budgets meaningful. Modalities differ by
//! mixing matrix, noise level, and an optional bounded nonlinearity.
//!
//! Everything is a pure function of (spec, seed): generation, the stratified
//! train/test split, and evaluation subsampling are all bit-reproducible.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::encoder::AnchorMatrix;
use crate::error::{Error, Result};
use crate::rng::{self, standard_normal};
use crate::tensor::Tensor;

/// One synthetic modality: a fixed random linear map out of latent space
/// plus its own noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    /// Short identifier (no whitespace), e.g. `image` or `audio`.
    pub name: String,
    /// Observed dimensionality after mixing.
    pub input_dim: usize,
    /// Seed for the mixing matrix, independent of the dataset seed so the
    /// same "sensor" can be paired with different sample draws.
    pub mixing_seed: u64,
    /// Std-dev of the latent Gaussian perturbation for this modality.
    pub noise_std: f64,
    /// Pass the mixed pre-activation through 2·tanh(·) before the sigmoid,
    /// giving this modality a bounded, compressed response.
    pub tanh_nonlinearity: bool,
}

/// Full recipe for a dataset; `(spec, seed)` determines every byte.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    /// Dimensionality of the shared latent space the prototypes live in.
    pub latent_dim: usize,
    pub modalities: Vec<ModalitySpec>,
    /// Per-class fraction routed to train by `split` (floor; rest is test).
    pub train_fraction: f64,
}

impl Default for DatasetSpec {
    /// Two heterogeneous 32-dim modalities over 8 classes; noise 0.25 keeps
    /// clean accuracy high but leaves headroom for adversarial degradation.
    fn default() -> Self {
        Self {
            n_classes: 8,
            samples_per_class: 200,
            latent_dim: 16,
            modalities: vec![
                ModalitySpec {
                    name: "image".into(),
                    input_dim: 32,
                    mixing_seed: 101,
                    noise_std: 0.25,
                    tanh_nonlinearity: false,
                },
                ModalitySpec {
                    name: "audio".into(),
                    input_dim: 32,
                    mixing_seed: 202,
                    noise_std: 0.30,
                    tanh_nonlinearity: true,
                },
            ],
            train_fraction: 0.8,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("dataset needs ≥ 2 classes".into()));
        }
        if self.samples_per_class < 1 {
            return Err(Error::InvalidArgument(
                "dataset needs ≥ 1 sample per class".into(),
            ));
        }
        if self.latent_dim < 2 {
            return Err(Error::InvalidArgument("latent_dim must be ≥ 2".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train_fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        if self.modalities.is_empty() {
            return Err(Error::InvalidArgument("dataset needs ≥ 1 modality".into()));
        }
        for m in &self.modalities {
            if m.name.is_empty() || m.name.split_whitespace().count() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "modality name must be a single token, got {:?}",
                    m.name
                )));
            }
            if m.input_dim < 1 {
                return Err(Error::InvalidArgument(format!(
                    "modality {} input_dim must be ≥ 1",
                    m.name
                )));
            }
            if !(m.noise_std >= 0.0 && m.noise_std.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "modality {} noise_std must be finite and ≥ 0",
                    m.name
                )));
            }
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.modalities.len() {
            return Err(Error::InvalidArgument("modality names must be unique".into()));
        }
        Ok(())
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no modality named {name:?}")))
    }

    pub fn n_samples(&self) -> usize {
        self.n_classes * self.samples_per_class
    }
}

/// Which partition a sample landed in; `Unsplit` until `split` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Unsplit,
    Train,
    Test,
}

/// One multi-modal example: an observed vector per modality, the latent it
/// came from (kept for diagnostics and latent-space probes), and a label.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Observed [0,1] vectors, indexed like `spec.modalities`.
    pub views: Vec<Tensor>,
    /// Pre-mixing latents, indexed like `spec.modalities`.
    pub latents: Vec<Tensor>,
    pub label: usize,
    pub split: Split,
}

/// A generated dataset: immutable samples plus the recipe that made them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    /// Class prototypes in latent space, `n_classes` unit vectors.
    pub prototypes: Vec<Tensor>,
    /// Mixing matrices, one `input_dim × latent_dim` map per modality.
    pub mixers: Vec<Tensor>,
    pub samples: Vec<Sample>,
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Generate a dataset. Deterministic: the same `(spec, seed)` yields
/// bit-identical samples, prototypes, and mixing matrices.
pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    // Prototypes: separated unit vectors, same construction as the anchors.
    let proto = AnchorMatrix::build(rng::derive_seed(seed, 0), spec.n_classes, spec.latent_dim)?;
    let prototypes: Vec<Tensor> = (0..spec.n_classes).map(|c| proto.anchor(c)).collect();

    let mut mixers = Vec::with_capacity(spec.modalities.len());
    for m in &spec.modalities {
        let mut mix_rng = rng::seeded(m.mixing_seed);
        let scale = 1.0 / (spec.latent_dim as f64).sqrt();
        let data: Vec<f64> = (0..m.input_dim * spec.latent_dim)
            .map(|_| scale * standard_normal(&mut mix_rng))
            .collect();
        mixers.push(Tensor::new(vec![m.input_dim, spec.latent_dim], data)?);
    }

    // One noise stream per modality, drawn in sample order, so adding or
    // reordering modalities never perturbs another modality's samples.
    let mut noise_rngs: Vec<_> = (0..spec.modalities.len())
        .map(|m| rng::seeded(rng::derive_seed(seed, 1 + m as u64)))
        .collect();

    let mut samples = Vec::with_capacity(spec.n_samples());
    for (class, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let mut views = Vec::with_capacity(spec.modalities.len());
            let mut latents = Vec::with_capacity(spec.modalities.len());
            for (m, mspec) in spec.modalities.iter().enumerate() {
                let latent: Vec<f64> = proto
                    .data()
                    .iter()
                    .map(|&p| p + mspec.noise_std * standard_normal(&mut noise_rngs[m]))
                    .collect();
                let mixed = matvec(&mixers[m], &latent);
                let observed: Vec<f64> = mixed
                    .into_iter()
                    .map(|u| {
                        let pre = if mspec.tanh_nonlinearity { 2.0 * u.tanh() } else { u };
                        sigmoid(pre)
                    })
                    .collect();
                views.push(Tensor::vector(observed)?);
                latents.push(Tensor::vector(latent)?);
            }
            samples.push(Sample { views, latents, label: class, split: Split::Unsplit });
        }
    }
    Ok(Dataset { spec: spec.clone(), seed, prototypes, mixers, samples })
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let rows = m.shape()[0];
    let cols = m.shape()[1];
    debug_assert_eq!(cols, v.len());
    (0..rows)
        .map(|r| (0..cols).map(|c| m.at(r, c) * v[c]).sum())
        .collect()
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Indices with the given split mark.
    pub fn indices_with_split(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Stratified per-class split: exactly `floor(fraction·count)` of each
    /// class goes to train, the remainder to test, membership chosen by a
    /// seeded shuffle. Marks every sample and returns (train, test) indices.
    pub fn split(&mut self, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train_fraction must lie in (0,1), got {train_fraction}"
            )));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.spec.n_classes];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (class, mut members) in by_class.into_iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "class {class} has {} sample(s); splitting needs ≥ 2",
                    members.len()
                )));
            }
            let n_train = (train_fraction * members.len() as f64).floor() as usize;
            if n_train == 0 || n_train == members.len() {
                return Err(Error::InvalidArgument(format!(
                    "train_fraction {train_fraction} leaves class {class} with an empty side"
                )));
            }
            let mut class_rng = rng::seeded(rng::derive_seed(seed, class as u64));
            members.shuffle(&mut class_rng);
            for (k, idx) in members.into_iter().enumerate() {
                if k < n_train {
                    self.samples[idx].split = Split::Train;
                    train.push(idx);
                } else {
                    self.samples[idx].split = Split::Test;
                    test.push(idx);
                }
            }
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((train, test))
    }

    /// Seeded without-replacement draw of `min(k, available)` indices per
    /// class from `pool`, returned sorted.
    pub fn sample_eval_subset(
        &self,
        pool: &[usize],
        k_per_class: usize,
        seed: u64,
    ) -> Result<Vec<usize>> {
        if k_per_class < 1 {
            return Err(Error::InvalidArgument("k_per_class must be ≥ 1".into()));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.spec.n_classes];
        for &i in pool {
            if i >= self.samples.len() {
                return Err(Error::InvalidArgument(format!(
                    "subset pool index {i} out of range ({} samples)",
                    self.samples.len()
                )));
            }
            by_class[self.samples[i].label].push(i);
        }
        let mut chosen = Vec::new();
        for (class, mut members) in by_class.into_iter().enumerate() {
            let take = k_per_class.min(members.len());
            let mut class_rng = rng::seeded(rng::derive_seed(seed, class as u64));
            members.shuffle(&mut class_rng);
            chosen.extend(members.into_iter().take(take));
        }
        chosen.sort_unstable();
        Ok(chosen)
    }

    /// Label of the nearest prototype in latent space for modality `m` of
    /// sample `i` — a linear classifier used by separability probes.
    pub fn nearest_prototype(&self, i: usize, m: usize) -> usize {
        let latent = self.latents(i, m);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, p) in self.prototypes.iter().enumerate() {
            let d: f64 = latent
                .data()
                .iter()
                .zip(p.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }

    pub fn view(&self, i: usize, m: usize) -> &Tensor {
        &self.samples[i].views[m]
    }

    pub fn latents(&self, i: usize, m: usize) -> &Tensor {
        &self.samples[i].latents[m]
    }

    pub fn label(&self, i: usize) -> usize {
        self.samples[i].label
    }

    /// Human-readable manifest: the recipe plus headline counts.
    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "synthetic multi-modal dataset");
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "classes {}", self.spec.n_classes);
        let _ = writeln!(out, "samples_per_class {}", self.spec.samples_per_class);
        let _ = writeln!(out, "latent_dim {}", self.spec.latent_dim);
        let _ = writeln!(out, "train_fraction {}", self.spec.train_fraction);
        for m in &self.spec.modalities {
            let _ = writeln!(
                out,
                "modality {} input_dim {} mixing_seed {} noise_std {} tanh {}",
                m.name, m.input_dim, m.mixing_seed, m.noise_std, m.tanh_nonlinearity
            );
        }
        let n_train = self.indices_with_split(Split::Train).len();
        let n_test = self.indices_with_split(Split::Test).len();
        let _ = writeln!(out, "samples {} train {} test {}", self.n_samples(), n_train, n_test);
        out
    }

    /// Write `dataset.txt` (manifest) and `dataset.ckpt` (tensors + machine
    /// metadata) into `dir`. Loading the dump bypasses generation.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "dataset")?;
        ck.set_meta("seed", &self.seed.to_string())?;
        ck.set_meta("n_classes", &self.spec.n_classes.to_string())?;
        ck.set_meta("samples_per_class", &self.spec.samples_per_class.to_string())?;
        ck.set_meta("latent_dim", &self.spec.latent_dim.to_string())?;
        ck.set_meta("train_fraction", &format!("{:?}", self.spec.train_fraction))?;
        ck.set_meta("n_modalities", &self.spec.modalities.len().to_string())?;
        for (i, m) in self.spec.modalities.iter().enumerate() {
            ck.set_meta(&format!("modality.{i}.name"), &m.name)?;
            ck.set_meta(&format!("modality.{i}.input_dim"), &m.input_dim.to_string())?;
            ck.set_meta(&format!("modality.{i}.mixing_seed"), &m.mixing_seed.to_string())?;
            ck.set_meta(&format!("modality.{i}.noise_std"), &format!("{:?}", m.noise_std))?;
            ck.set_meta(
                &format!("modality.{i}.tanh"),
                if m.tanh_nonlinearity { "true" } else { "false" },
            )?;
        }

        let n = self.n_samples();
        let proto_flat: Vec<f64> = self.prototypes.iter().flat_map(|p| p.data().to_vec()).collect();
        ck.push(
            "prototypes",
            Tensor::new(vec![self.spec.n_classes, self.spec.latent_dim], proto_flat)?,
        )?;
        for (m, mspec) in self.spec.modalities.iter().enumerate() {
            ck.push(&format!("mixer.{}", mspec.name), self.mixers[m].clone())?;
            let views: Vec<f64> = self
                .samples
                .iter()
                .flat_map(|s| s.views[m].data().to_vec())
                .collect();
            ck.push(
                &format!("views.{}", mspec.name),
                Tensor::new(vec![n, mspec.input_dim], views)?,
            )?;
            let latents: Vec<f64> = self
                .samples
                .iter()
                .flat_map(|s| s.latents[m].data().to_vec())
                .collect();
            ck.push(
                &format!("latents.{}", mspec.name),
                Tensor::new(vec![n, self.spec.latent_dim], latents)?,
            )?;
        }
        let labels: Vec<f64> = self.samples.iter().map(|s| s.label as f64).collect();
        ck.push("labels", Tensor::new(vec![n], labels)?)?;
        let splits: Vec<f64> = self
            .samples
            .iter()
            .map(|s| match s.split {
                Split::Unsplit => 0.0,
                Split::Train => 1.0,
                Split::Test => 2.0,
            })
            .collect();
        ck.push("splits", Tensor::new(vec![n], splits)?)?;

        ck.save(&dir.join("dataset.ckpt"))?;
        std::fs::write(dir.join("dataset.txt"), self.manifest_text())?;
        Ok(())
    }

    /// Load a dump written by `save`.
    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(&dir.join("dataset.ckpt"))?;
        let meta = |key: &str| -> Result<&str> {
            ck.meta(key)
                .ok_or_else(|| Error::Checkpoint(format!("dataset dump missing meta key {key:?}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("meta key {key:?} is not an integer")))
        };
        if meta("kind")? != "dataset" {
            return Err(Error::Checkpoint("not a dataset dump".into()));
        }
        let seed: u64 = meta("seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("meta key \"seed\" is not an integer".into()))?;
        let n_classes = parse_usize("n_classes")?;
        let samples_per_class = parse_usize("samples_per_class")?;
        let latent_dim = parse_usize("latent_dim")?;
        let train_fraction: f64 = meta("train_fraction")?
            .parse()
            .map_err(|_| Error::Checkpoint("meta key \"train_fraction\" is not a float".into()))?;
        let n_modalities = parse_usize("n_modalities")?;
        let mut modalities = Vec::with_capacity(n_modalities);
        for i in 0..n_modalities {
            modalities.push(ModalitySpec {
                name: meta(&format!("modality.{i}.name"))?.to_string(),
                input_dim: parse_usize(&format!("modality.{i}.input_dim"))?,
                mixing_seed: meta(&format!("modality.{i}.mixing_seed"))?
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("modality {i} mixing_seed invalid")))?,
                noise_std: meta(&format!("modality.{i}.noise_std"))?
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("modality {i} noise_std invalid")))?,
                tanh_nonlinearity: match meta(&format!("modality.{i}.tanh"))? {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(Error::Checkpoint(format!(
                            "modality {i} tanh flag invalid: {other:?}"
                        )))
                    }
                },
            });
        }
        let spec = DatasetSpec {
            n_classes,
            samples_per_class,
            latent_dim,
            modalities,
            train_fraction,
        };
        spec.validate()?;

        let tensor = |name: &str| -> Result<&Tensor> {
            ck.get(name)
                .ok_or_else(|| Error::Checkpoint(format!("dataset dump missing tensor {name:?}")))
        };
        let proto = tensor("prototypes")?;
        if proto.shape() != [n_classes, latent_dim] {
            return Err(Error::Checkpoint("prototypes tensor has wrong shape".into()));
        }
        let prototypes: Vec<Tensor> = (0..n_classes).map(|c| proto.row(c)).collect();

        let n = spec.n_samples();
        let labels_t = tensor("labels")?;
        let splits_t = tensor("splits")?;
        if labels_t.shape() != [n] || splits_t.shape() != [n] {
            return Err(Error::Checkpoint("labels/splits tensor has wrong shape".into()));
        }

        let mut mixers = Vec::with_capacity(spec.modalities.len());
        let mut view_mats = Vec::with_capacity(spec.modalities.len());
        let mut latent_mats = Vec::with_capacity(spec.modalities.len());
        for m in &spec.modalities {
            let mixer = tensor(&format!("mixer.{}", m.name))?;
            if mixer.shape() != [m.input_dim, latent_dim] {
                return Err(Error::Checkpoint(format!("mixer.{} has wrong shape", m.name)));
            }
            mixers.push(mixer.clone());
            let views = tensor(&format!("views.{}", m.name))?;
            if views.shape() != [n, m.input_dim] {
                return Err(Error::Checkpoint(format!("views.{} has wrong shape", m.name)));
            }
            view_mats.push(views.clone());
            let latents = tensor(&format!("latents.{}", m.name))?;
            if latents.shape() != [n, latent_dim] {
                return Err(Error::Checkpoint(format!("latents.{} has wrong shape", m.name)));
            }
            latent_mats.push(latents.clone());
        }

        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let label = labels_t.data()[i];
            if label.fract() != 0.0 || label < 0.0 || label as usize >= n_classes {
                return Err(Error::Checkpoint(format!("sample {i} has invalid label {label}")));
            }
            let code = splits_t.data()[i];
            let split = if code == 0.0 {
                Split::Unsplit
            } else if code == 1.0 {
                Split::Train
            } else if code == 2.0 {
                Split::Test
            } else {
                return Err(Error::Checkpoint(format!(
                    "sample {i} has invalid split code {code}"
                )));
            };
            let views: Vec<Tensor> = view_mats.iter().map(|vm| vm.row(i)).collect();
            let latents: Vec<Tensor> = latent_mats.iter().map(|lm| lm.row(i)).collect();
            samples.push(Sample { views, latents, label: label as usize, split });
        }
        Ok(Dataset { spec, seed, prototypes, mixers, samples })
    }
}
