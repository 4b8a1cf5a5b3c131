//! Cross-modal correspondence scorers and the anchor-score-vector
//! construction.
//!
//! Six scorers measure how well two embeddings correspond. Three are
//! parameter-free (`dot`, `cosine`, `norm_euclid`), three carry trainable
//! state (`scaled_dot` optionally trains its α, `bilinear` trains a d×d
//! matrix, `mlp` trains a small two-layer network over the concatenated
//! pair). All are registered by name through [`make_scorer`], so configs and
//! ablation grids select them as strings.
//!
//! Each scorer offers two evaluation paths that must agree: [`Scorer::score`]
//! records onto a [`Graph`] (used inside losses and attacks, where gradients
//! flow to embeddings and scorer parameters), and [`Scorer::score_plain`] is
//! a straight-line recomputation (used for fast classification).
//!
//! `norm_euclid` follows its defining formula `1 − ‖e1−e2‖/max(‖e1‖,‖e2‖)`
//! exactly, which ranges over [−1, 1] — not the narrower [0, 1] sometimes
//! claimed for it; no clipping is applied. `mlp` is generally asymmetric in
//! its arguments; that is inherent to scoring a concatenation.

use rand::Rng;

use crate::encoder::AnchorMatrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng;
use crate::tensor::Tensor;

/// Whether a score vector came from a clean or an attacked input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Clean,
    Adv,
}

/// Per-class correspondence scores for one embedding.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

/// Graph handles for one scorer's parameters, in the scorer's fixed order.
#[derive(Debug, Clone, Default)]
pub struct ScorerBinding {
    params: Vec<NodeId>,
}

impl ScorerBinding {
    fn param(&self, i: usize, scorer: &'static str) -> Result<NodeId> {
        self.params.get(i).copied().ok_or_else(|| {
            Error::Training(format!("binding does not match scorer {scorer}"))
        })
    }
}

/// A correspondence scorer. Implementations are registered in
/// [`make_scorer`] under the exact names used in configs and CSV output.
pub trait Scorer: Send + Sync + std::fmt::Debug {
    /// Registry/config name.
    fn name(&self) -> &'static str;

    /// Record parameters on `graph`; empty binding for parameter-free
    /// scorers. `trainable` controls whether gradients accumulate on them.
    fn bind(&self, graph: &mut Graph, trainable: bool) -> ScorerBinding;

    /// Taped score of an embedding pair.
    fn score(
        &self,
        graph: &mut Graph,
        binding: &ScorerBinding,
        e1: NodeId,
        e2: NodeId,
    ) -> Result<NodeId>;

    /// Straight-line score without a graph.
    fn score_plain(&self, e1: &Tensor, e2: &Tensor) -> Result<f64>;

    /// Descend parameters by the gradients accumulated on `graph`.
    fn apply_sgd(&mut self, binding: &ScorerBinding, graph: &Graph, lr: f64) -> Result<()>;

    /// Trainable parameter count.
    fn param_count(&self) -> usize;

    /// Parameters under stable dotted names for checkpointing.
    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)>;

    /// Restore parameters previously written by [`Self::named_tensors`].
    fn load_named(&mut self, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()>;

    fn clone_box(&self) -> Box<dyn Scorer>;
}

impl Clone for Box<dyn Scorer> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Registry names, in canonical order.
pub const SCORER_NAMES: &[&str] = &["dot", "scaled_dot", "cosine", "norm_euclid", "bilinear", "mlp"];
const SCORER_NAME_LIST: &str = "dot, scaled_dot, cosine, norm_euclid, bilinear, mlp";

/// Construction options for the parameterized scorers.
#[derive(Debug, Clone)]
pub struct ScorerInit {
    /// Train `scaled_dot`'s α instead of fixing it at 1/√d.
    pub alpha_trainable: bool,
    /// Hidden width of the `mlp` scorer.
    pub mlp_hidden: usize,
    /// Seed for the `mlp` scorer's weight init.
    pub seed: u64,
}

impl Default for ScorerInit {
    fn default() -> Self {
        Self {
            alpha_trainable: false,
            mlp_hidden: 32,
            seed: 0,
        }
    }
}

/// Build a scorer by registry name for embedding dimension `d`.
pub fn make_scorer(name: &str, d: usize, init: &ScorerInit) -> Result<Box<dyn Scorer>> {
    if d < 1 {
        return Err(Error::InvalidArgument("embedding dimension must be ≥ 1".into()));
    }
    match name {
        "dot" => Ok(Box::new(Dot)),
        "scaled_dot" => Ok(Box::new(ScaledDot::new(d, init.alpha_trainable))),
        "cosine" => Ok(Box::new(Cosine)),
        "norm_euclid" => Ok(Box::new(NormEuclid)),
        "bilinear" => Ok(Box::new(Bilinear::new(d))),
        "mlp" => Ok(Box::new(MlpScore::new(
            d,
            init.mlp_hidden,
            &mut rng::seeded(init.seed),
        ))),
        _ => Err(Error::UnknownVariant {
            kind: "scorer",
            name: name.to_string(),
            accepted: SCORER_NAME_LIST,
        }),
    }
}

fn check_pair(op: &'static str, e1: &[usize], e2: &[usize]) -> Result<()> {
    if e1.len() != 1 || e1 != e2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: e1.to_vec(),
            rhs: e2.to_vec(),
        });
    }
    Ok(())
}

fn plain_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn plain_norm(a: &[f64]) -> f64 {
    plain_dot(a, a).sqrt()
}

// ---- dot -----------------------------------------------------------------

/// Plain inner product; no parameters.
#[derive(Debug, Clone)]
pub struct Dot;

impl Scorer for Dot {
    fn name(&self) -> &'static str {
        "dot"
    }

    fn bind(&self, _graph: &mut Graph, _trainable: bool) -> ScorerBinding {
        ScorerBinding::default()
    }

    fn score(
        &self,
        graph: &mut Graph,
        _binding: &ScorerBinding,
        e1: NodeId,
        e2: NodeId,
    ) -> Result<NodeId> {
        check_pair("dot", graph.value(e1).shape(), graph.value(e2).shape())?;
        graph.dot(e1, e2)
    }

    fn score_plain(&self, e1: &Tensor, e2: &Tensor) -> Result<f64> {
        check_pair("dot", e1.shape(), e2.shape())?;
        Ok(plain_dot(e1.data(), e2.data()))
    }

    fn apply_sgd(&mut self, _b: &ScorerBinding, _g: &Graph, _lr: f64) -> Result<()> {
        Ok(())
    }

    fn param_count(&self) -> usize {
        0
    }

    fn named_tensors(&self, _prefix: &str) -> Vec<(String, Tensor)> {
        Vec::new()
    }

    fn load_named(&mut self, _prefix: &str, _tensors: &[(String, Tensor)]) -> Result<()> {
        Ok(())
    }

    fn clone_box(&self) -> Box<dyn Scorer> {
        Box::new(self.clone())
    }
}

// ---- scaled_dot ------------------------------------------------------------

/// `α·e1ᵀe2` with α either fixed at 1/√d or a trainable scalar started there.
#[derive(Debug, Clone)]
pub struct ScaledDot {
    pub alpha: f64,
    pub trainable: bool,
}

impl ScaledDot {
    pub fn new(d: usize, trainable: bool) -> Self {
        Self {
            alpha: 1.0 / (d as f64).sqrt(),
            trainable,
        }
    }
}

impl Scorer for ScaledDot {
    fn name(&self) -> &'static str {
        "scaled_dot"
    }

    fn bind(&self, graph: &mut Graph, trainable: bool) -> ScorerBinding {
        if self.trainable {
            let id = graph.leaf(Tensor::scalar(self.alpha), trainable);
            ScorerBinding { params: vec![id] }
        } else {
            ScorerBinding::default()
        }
    }

    fn score(
        &self,
        graph: &mut Graph,
        binding: &ScorerBinding,
        e1: NodeId,
        e2: NodeId,
    ) -> Result<NodeId> {
        check_pair("scaled_dot", graph.value(e1).shape(), graph.value(e2).shape())?;
        let d = graph.dot(e1, e2)?;
        if self.trainable {
            let alpha = binding.param(0, "scaled_dot")?;
            graph.mul(d, alpha)
        } else {
            graph.scale(d, self.alpha)
        }
    }

    fn score_plain(&self, e1: &Tensor, e2: &Tensor) -> Result<f64> {
        check_pair("scaled_dot", e1.shape(), e2.shape())?;
        Ok(self.alpha * plain_dot(e1.data(), e2.data()))
    }

    fn apply_sgd(&mut self, binding: &ScorerBinding, graph: &Graph, lr: f64) -> Result<()> {
        if self.trainable {
            let id = binding.param(0, "scaled_dot")?;
            self.alpha -= lr * graph.grad(id)?.item();
        }
        Ok(())
    }

    fn param_count(&self) -> usize {
        if self.trainable {
            1
        } else {
            0
        }
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![(format!("{prefix}.alpha"), Tensor::scalar(self.alpha))]
    }

    fn load_named(&mut self, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        let key = format!("{prefix}.alpha");
        let t = find_tensor(tensors, &key)?;
        self.alpha = t.item();
        Ok(())
    }

    fn clone_box(&self) -> Box<dyn Scorer> {
        Box::new(self.clone())
    }
}

// ---- cosine ----------------------------------------------------------------

/// Cosine similarity; magnitude-invariant, no parameters.
#[derive(Debug, Clone)]
pub struct Cosine;

impl Scorer for Cosine {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn bind(&self, _graph: &mut Graph, _trainable: bool) -> ScorerBinding {
        ScorerBinding::default()
    }

    fn score(
        &self,
        graph: &mut Graph,
        _binding: &ScorerBinding,
        e1: NodeId,
        e2: NodeId,
    ) -> Result<NodeId> {
        check_pair("cosine", graph.value(e1).shape(), graph.value(e2).shape())?;
        let u = graph.l2_normalize(e1)?;
        let v = graph.l2_normalize(e2)?;
        graph.dot(u, v)
    }

    fn score_plain(&self, e1: &Tensor, e2: &Tensor) -> Result<f64> {
        check_pair("cosine", e1.shape(), e2.shape())?;
        let (n1, n2) = (plain_norm(e1.data()), plain_norm(e2.data()));
        if n1 <= 1e-12 || n2 <= 1e-12 {
            return Err(Error::DegenerateVector {
                what: "cosine",
                tol: 1e-12,
            });
        }
        Ok(plain_dot(e1.data(), e2.data()) / (n1 * n2))
    }

    fn apply_sgd(&mut self, _b: &ScorerBinding, _g: &Graph, _lr: f64) -> Result<()> {
        Ok(())
    }

    fn param_count(&self) -> usize {
        0
    }

    fn named_tensors(&self, _prefix: &str) -> Vec<(String, Tensor)> {
        Vec::new()
    }

    fn load_named(&mut self, _prefix: &str, _tensors: &[(String, Tensor)]) -> Result<()> {
        Ok(())
    }

    fn clone_box(&self) -> Box<dyn Scorer> {
        Box::new(self.clone())
    }
}

// ---- norm_euclid -------------------------------------------------------------

/// `1 − ‖e1−e2‖ / max(‖e1‖, ‖e2‖)`; magnitude-sensitive, no parameters.
#[derive(Debug, Clone)]
pub struct NormEuclid;

impl Scorer for NormEuclid {
    fn name(&self) -> &'static str {
        "norm_euclid"
    }

    fn bind(&self, _graph: &mut Graph, _trainable: bool) -> ScorerBinding {
        ScorerBinding::default()
    }

    fn score(
        &self,
        graph: &mut Graph,
        _binding: &ScorerBinding,
        e1: NodeId,
        e2: NodeId,
    ) -> Result<NodeId> {
        check_pair("norm_euclid", graph.value(e1).shape(), graph.value(e2).shape())?;
        let n1v = graph.value(e1).l2_norm();
        let n2v = graph.value(e2).l2_norm();
        if n1v.max(n2v) <= 1e-12 {
            return Err(Error::DegenerateVector {
                what: "norm_euclid",
                tol: 1e-12,
            });
        }
        let diff = graph.sub(e1, e2)?;
        let dist = graph.l2norm(diff)?;
        let n1 = graph.l2norm(e1)?;
        let n2 = graph.l2norm(e2)?;
        let m = graph.maximum(n1, n2)?;
        let inv = graph.pow(m, -1.0)?;
        let ratio = graph.mul(dist, inv)?;
        let neg = graph.scale(ratio, -1.0)?;
        graph.offset(neg, 1.0)
    }

    fn score_plain(&self, e1: &Tensor, e2: &Tensor) -> Result<f64> {
        check_pair("norm_euclid", e1.shape(), e2.shape())?;
        let (n1, n2) = (plain_norm(e1.data()), plain_norm(e2.data()));
        let m = n1.max(n2);
        if m <= 1e-12 {
            return Err(Error::DegenerateVector {
                what: "norm_euclid",
                tol: 1e-12,
            });
        }
        let dist = e1
            .data()
            .iter()
            .zip(e2.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(1.0 - dist / m)
    }

    fn apply_sgd(&mut self, _b: &ScorerBinding, _g: &Graph, _lr: f64) -> Result<()> {
        Ok(())
    }

    fn param_count(&self) -> usize {
        0
    }

    fn named_tensors(&self, _prefix: &str) -> Vec<(String, Tensor)> {
        Vec::new()
    }

    fn load_named(&mut self, _prefix: &str, _tensors: &[(String, Tensor)]) -> Result<()> {
        Ok(())
    }

    fn clone_box(&self) -> Box<dyn Scorer> {
        Box::new(self.clone())
    }
}

// ---- bilinear --------------------------------------------------------------

/// `e1ᵀWe2` with trainable d×d `W`, initialized to the identity so training
/// starts from plain dot.
#[derive(Debug, Clone)]
pub struct Bilinear {
    pub w: Tensor,
}

impl Bilinear {
    pub fn new(d: usize) -> Self {
        Self { w: Tensor::eye(d) }
    }

    fn d(&self) -> usize {
        self.w.shape()[0]
    }
}

impl Scorer for Bilinear {
    fn name(&self) -> &'static str {
        "bilinear"
    }

    fn bind(&self, graph: &mut Graph, trainable: bool) -> ScorerBinding {
        let id = graph.leaf(self.w.clone(), trainable);
        ScorerBinding { params: vec![id] }
    }

    fn score(
        &self,
        graph: &mut Graph,
        binding: &ScorerBinding,
        e1: NodeId,
        e2: NodeId,
    ) -> Result<NodeId> {
        check_pair("bilinear", graph.value(e1).shape(), graph.value(e2).shape())?;
        if graph.value(e1).shape() != [self.d()] {
            return Err(Error::ShapeMismatch {
                op: "bilinear",
                lhs: self.w.shape().to_vec(),
                rhs: graph.value(e1).shape().to_vec(),
            });
        }
        let w = binding.param(0, "bilinear")?;
        let we2 = graph.matmul(w, e2)?;
        graph.dot(e1, we2)
    }

    fn score_plain(&self, e1: &Tensor, e2: &Tensor) -> Result<f64> {
        check_pair("bilinear", e1.shape(), e2.shape())?;
        let d = self.d();
        if e1.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "bilinear",
                lhs: self.w.shape().to_vec(),
                rhs: e1.shape().to_vec(),
            });
        }
        let mut acc = 0.0;
        for i in 0..d {
            let row = &self.w.data()[i * d..(i + 1) * d];
            acc += e1.data()[i] * plain_dot(row, e2.data());
        }
        Ok(acc)
    }

    fn apply_sgd(&mut self, binding: &ScorerBinding, graph: &Graph, lr: f64) -> Result<()> {
        let id = binding.param(0, "bilinear")?;
        let grad = graph.grad(id)?;
        for (w, g) in self.w.data_mut().iter_mut().zip(grad.data()) {
            *w -= lr * g;
        }
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.w.len()
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![(format!("{prefix}.w"), self.w.clone())]
    }

    fn load_named(&mut self, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        let key = format!("{prefix}.w");
        let t = find_tensor(tensors, &key)?;
        if t.shape() != self.w.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {key} has shape {:?}, expected {:?}",
                t.shape(),
                self.w.shape()
            )));
        }
        self.w = t.clone();
        Ok(())
    }

    fn clone_box(&self) -> Box<dyn Scorer> {
        Box::new(self.clone())
    }
}

// ---- mlp ---------------------------------------------------------------------

/// Two-layer network over the concatenated pair: `2d → hidden → 1`, relu
/// hidden, linear output.
#[derive(Debug, Clone)]
pub struct MlpScore {
    /// hidden × 2d
    pub w1: Tensor,
    /// hidden
    pub b1: Tensor,
    /// 1 × hidden
    pub w2: Tensor,
    /// 1
    pub b2: Tensor,
}

impl MlpScore {
    pub fn new<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        let in_dim = 2 * d;
        let w1 = Tensor::matrix(
            hidden,
            in_dim,
            (0..hidden * in_dim)
                .map(|_| rng::fan_in_uniform(rng, in_dim))
                .collect(),
        )
        .expect("positive dims");
        let w2 = Tensor::matrix(
            1,
            hidden,
            (0..hidden).map(|_| rng::fan_in_uniform(rng, hidden)).collect(),
        )
        .expect("positive dims");
        Self {
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[1]),
        }
    }

    fn in_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }
}

impl Scorer for MlpScore {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn bind(&self, graph: &mut Graph, trainable: bool) -> ScorerBinding {
        ScorerBinding {
            params: vec![
                graph.leaf(self.w1.clone(), trainable),
                graph.leaf(self.b1.clone(), trainable),
                graph.leaf(self.w2.clone(), trainable),
                graph.leaf(self.b2.clone(), trainable),
            ],
        }
    }

    fn score(
        &self,
        graph: &mut Graph,
        binding: &ScorerBinding,
        e1: NodeId,
        e2: NodeId,
    ) -> Result<NodeId> {
        check_pair("mlp", graph.value(e1).shape(), graph.value(e2).shape())?;
        if graph.value(e1).len() * 2 != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp",
                lhs: self.w1.shape().to_vec(),
                rhs: graph.value(e1).shape().to_vec(),
            });
        }
        let x = graph.concat(&[e1, e2])?;
        let w1 = binding.param(0, "mlp")?;
        let b1 = binding.param(1, "mlp")?;
        let w2 = binding.param(2, "mlp")?;
        let b2 = binding.param(3, "mlp")?;
        let h = graph.matmul(w1, x)?;
        let hb = graph.add(h, b1)?;
        let a = graph.relu(hb)?;
        let o = graph.matmul(w2, a)?;
        graph.add(o, b2)
    }

    fn score_plain(&self, e1: &Tensor, e2: &Tensor) -> Result<f64> {
        check_pair("mlp", e1.shape(), e2.shape())?;
        if e1.len() * 2 != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp",
                lhs: self.w1.shape().to_vec(),
                rhs: e1.shape().to_vec(),
            });
        }
        let mut x = e1.data().to_vec();
        x.extend_from_slice(e2.data());
        let (h, n) = (self.hidden(), self.in_dim());
        let mut acc = self.b2.data()[0];
        for i in 0..h {
            let row = &self.w1.data()[i * n..(i + 1) * n];
            let z = (plain_dot(row, &x) + self.b1.data()[i]).max(0.0);
            acc += self.w2.data()[i] * z;
        }
        Ok(acc)
    }

    fn apply_sgd(&mut self, binding: &ScorerBinding, graph: &Graph, lr: f64) -> Result<()> {
        let ids = [
            binding.param(0, "mlp")?,
            binding.param(1, "mlp")?,
            binding.param(2, "mlp")?,
            binding.param(3, "mlp")?,
        ];
        for (t, id) in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
            .into_iter()
            .zip(ids)
        {
            let grad = graph.grad(id)?;
            for (v, g) in t.data_mut().iter_mut().zip(grad.data()) {
                *v -= lr * g;
            }
        }
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.w1"), self.w1.clone()),
            (format!("{prefix}.b1"), self.b1.clone()),
            (format!("{prefix}.w2"), self.w2.clone()),
            (format!("{prefix}.b2"), self.b2.clone()),
        ]
    }

    fn load_named(&mut self, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        for (field, slot) in [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ] {
            let key = format!("{prefix}.{field}");
            let t = find_tensor(tensors, &key)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    fn clone_box(&self) -> Box<dyn Scorer> {
        Box::new(self.clone())
    }
}

fn find_tensor<'a>(tensors: &'a [(String, Tensor)], key: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|(n, _)| n == key)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key:?}")))
}

// ---- anchor scoring ------------------------------------------------------------

/// Taped per-class scores of `e` against every anchor column, concatenated
/// into one length-C node.
pub fn score_against_anchors(
    graph: &mut Graph,
    scorer: &dyn Scorer,
    binding: &ScorerBinding,
    e: NodeId,
    anchors: &AnchorMatrix,
) -> Result<NodeId> {
    let mut scores = Vec::with_capacity(anchors.num_classes());
    for j in 0..anchors.num_classes() {
        let a = graph.constant(anchors.anchor(j));
        scores.push(scorer.score(graph, binding, e, a)?);
    }
    graph.concat(&scores)
}

/// Straight-line per-class scores of `e` against every anchor column.
pub fn score_vector_plain(
    scorer: &dyn Scorer,
    e: &Tensor,
    anchors: &AnchorMatrix,
    provenance: Provenance,
) -> Result<ScoreVector> {
    let mut values = Vec::with_capacity(anchors.num_classes());
    for j in 0..anchors.num_classes() {
        values.push(scorer.score_plain(e, &anchors.anchor(j))?);
    }
    Ok(ScoreVector { values, provenance })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of `e`: argmax of its anchor scores, lowest index on ties.
pub fn classify(scorer: &dyn Scorer, e: &Tensor, anchors: &AnchorMatrix) -> Result<usize> {
    let sv = score_vector_plain(scorer, e, anchors, Provenance::Clean)?;
    Ok(argmax_lowest(&sv.values))
}
