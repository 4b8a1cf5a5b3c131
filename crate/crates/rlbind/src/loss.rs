//! Training objectives: contrastive pretraining, unsupervised adversarial
//! fine-tuning, cross-entropy over anchor scores, and the cross-modal
//! alignment penalties, plus the stage-2 composite that combines them.
//!
//! All losses build onto a caller-supplied [`Graph`], so gradients reach
//! whatever the caller bound as trainable: encoder weights, scorer
//! parameters, or — inside attacks — the input itself.
//!
//! The alignment penalties (`l1`, `l2`, `kl`) sit behind the [`Alignment`]
//! trait and are selected by name through [`make_alignment`], mirroring the
//! scorer registry.

use crate::encoder::{AnchorMatrix, BoundEncoder, FrozenEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scorer::{score_against_anchors, Scorer, ScorerBinding};
use crate::tensor::Tensor;

fn check_same_vectors(op: &'static str, g: &Graph, a: NodeId, b: NodeId) -> Result<usize> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa.len() != 1 || sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(sa[0])
}

// ---- InfoNCE ----------------------------------------------------------------

/// Both directional terms of the contrastive loss, before averaging:
/// `(L_M2T, L_T2M)`. Embeddings are L2-normalized internally; position `i`
/// of one batch is the positive for position `i` of the other.
pub fn infonce_parts(
    graph: &mut Graph,
    batch_m: &[NodeId],
    batch_t: &[NodeId],
    tau: f64,
) -> Result<(NodeId, NodeId)> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "infonce temperature must be > 0, got {tau}"
        )));
    }
    let k = batch_m.len();
    if k == 0 || k != batch_t.len() {
        return Err(Error::InvalidArgument(format!(
            "infonce needs equal non-empty batches, got {} and {}",
            k,
            batch_t.len()
        )));
    }
    let m_norm: Vec<NodeId> = batch_m
        .iter()
        .map(|&e| graph.l2_normalize(e))
        .collect::<Result<_>>()?;
    let t_norm: Vec<NodeId> = batch_t
        .iter()
        .map(|&e| graph.l2_normalize(e))
        .collect::<Result<_>>()?;

    // S[i][j] = <m_i, t_j> / τ
    let mut rows: Vec<Vec<NodeId>> = Vec::with_capacity(k);
    for &mi in &m_norm {
        let mut row = Vec::with_capacity(k);
        for &tj in &t_norm {
            let d = graph.dot(mi, tj)?;
            row.push(graph.scale(d, 1.0 / tau)?);
        }
        rows.push(row);
    }

    // L_M2T: softmax over each row, positive on the diagonal.
    let mut m2t_terms = Vec::with_capacity(k);
    for (i, row) in rows.iter().enumerate() {
        let logits = graph.concat(row)?;
        m2t_terms.push(cross_entropy(graph, logits, i)?);
    }
    // L_T2M: softmax over each column (rows of Sᵀ).
    let mut t2m_terms = Vec::with_capacity(k);
    for j in 0..k {
        let col: Vec<NodeId> = rows.iter().map(|row| row[j]).collect();
        let logits = graph.concat(&col)?;
        t2m_terms.push(cross_entropy(graph, logits, j)?);
    }

    let m2t_all = graph.concat(&m2t_terms)?;
    let m2t = graph.mean(m2t_all)?;
    let t2m_all = graph.concat(&t2m_terms)?;
    let t2m = graph.mean(t2m_all)?;
    Ok((m2t, t2m))
}

/// Contrastive loss `(L_M2T + L_T2M) / 2` over a batch of embedding pairs.
pub fn infonce(
    graph: &mut Graph,
    batch_m: &[NodeId],
    batch_t: &[NodeId],
    tau: f64,
) -> Result<NodeId> {
    let (m2t, t2m) = infonce_parts(graph, batch_m, batch_t, tau)?;
    let s = graph.add(m2t, t2m)?;
    graph.scale(s, 0.5)
}

// ---- FARE -------------------------------------------------------------------

/// Unsupervised adversarial fine-tuning distance:
/// `‖φ_FT(z) − φ_Org(x)‖₂²`.
///
/// `z` must already live on the graph (an attack leaf or a constant); the
/// frozen side is evaluated outside the graph, so no gradient can reach it.
/// The ℓ∞ ball `‖z − x‖_∞ ≤ ε` is the caller's contract and is asserted
/// here — a violation means an attack bug, not a data problem.
pub fn fare_loss(
    graph: &mut Graph,
    ft: &BoundEncoder,
    org: &FrozenEncoder,
    x: &Tensor,
    z: NodeId,
    epsilon: f64,
) -> Result<NodeId> {
    let zv = graph.value(z);
    if zv.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "fare_loss",
            lhs: x.shape().to_vec(),
            rhs: zv.shape().to_vec(),
        });
    }
    let worst = zv
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if worst > epsilon + 1e-12 {
        return Err(Error::BallViolation(format!(
            "‖z − x‖_∞ = {worst} exceeds ε = {epsilon}"
        )));
    }
    let e_ft = ft.forward(graph, z)?;
    let e_org = graph.constant(org.encode(x)?);
    let diff = graph.sub(e_ft, e_org)?;
    let sq = graph.mul(diff, diff)?;
    graph.sum(sq)
}

// ---- cross-entropy ------------------------------------------------------------

/// `−log softmax(scores)[t]`, via the fused log-sum-exp path.
pub fn cross_entropy(graph: &mut Graph, scores: NodeId, t: usize) -> Result<NodeId> {
    let c = graph.value(scores).len();
    if graph.value(scores).shape().len() != 1 {
        return Err(Error::UnsupportedShape {
            op: "cross_entropy",
            expected: "a 1-D score vector",
            shape: graph.value(scores).shape().to_vec(),
        });
    }
    if t >= c {
        return Err(Error::InvalidArgument(format!(
            "target class {t} out of range for {c} classes"
        )));
    }
    let ls = graph.log_softmax(scores)?;
    let picked = graph.slice(ls, t, 1)?;
    graph.scale(picked, -1.0)
}

/// Straight-line cross-entropy for oracles and quick evaluation.
pub fn cross_entropy_plain(scores: &[f64], t: usize) -> Result<f64> {
    if t >= scores.len() {
        return Err(Error::InvalidArgument(format!(
            "target class {t} out of range for {} classes",
            scores.len()
        )));
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - scores[t])
}

// ---- alignment penalties ---------------------------------------------------------

/// Cross-modal alignment penalty between clean and adversarial score
/// vectors. Implementations registered by name: `l1`, `l2`, `kl`.
pub trait Alignment: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn loss(&self, graph: &mut Graph, s_clean: NodeId, s_adv: NodeId) -> Result<NodeId>;
    fn clone_box(&self) -> Box<dyn Alignment>;
}

impl Clone for Box<dyn Alignment> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Registry names, in canonical order.
pub const ALIGNMENT_NAMES: &[&str] = &["l1", "l2", "kl"];
const ALIGNMENT_NAME_LIST: &str = "l1, l2, kl";

/// Build an alignment penalty by registry name. `tau_prime` only affects
/// `kl` (the softmax temperature of its score normalization).
pub fn make_alignment(name: &str, tau_prime: f64) -> Result<Box<dyn Alignment>> {
    match name {
        "l1" => Ok(Box::new(LpAlign { p: 1 })),
        "l2" => Ok(Box::new(LpAlign { p: 2 })),
        "kl" => {
            if tau_prime <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "kl alignment temperature must be > 0, got {tau_prime}"
                )));
            }
            Ok(Box::new(SymKlAlign { tau_prime }))
        }
        _ => Err(Error::UnknownVariant {
            kind: "alignment",
            name: name.to_string(),
            accepted: ALIGNMENT_NAME_LIST,
        }),
    }
}

/// Point-wise penalty `(1/C) Σ |Δ|^p`, p ∈ {1, 2}.
#[derive(Debug, Clone)]
pub struct LpAlign {
    pub p: u32,
}

impl Alignment for LpAlign {
    fn name(&self) -> &'static str {
        match self.p {
            1 => "l1",
            _ => "l2",
        }
    }

    fn loss(&self, graph: &mut Graph, s_clean: NodeId, s_adv: NodeId) -> Result<NodeId> {
        check_same_vectors("align_lp", graph, s_clean, s_adv)?;
        let diff = graph.sub(s_clean, s_adv)?;
        match self.p {
            1 => {
                let a = graph.abs(diff)?;
                graph.mean(a)
            }
            2 => {
                let sq = graph.mul(diff, diff)?;
                graph.mean(sq)
            }
            p => Err(Error::InvalidArgument(format!(
                "alignment exponent must be 1 or 2, got {p}"
            ))),
        }
    }

    fn clone_box(&self) -> Box<dyn Alignment> {
        Box::new(self.clone())
    }
}

/// Symmetric KL between the τ′-softmaxes of the two score vectors:
/// `KL(P‖Q) + KL(Q‖P) = Σ (P−Q)(log P − log Q)`. Invariant to a constant
/// shift of either side.
#[derive(Debug, Clone)]
pub struct SymKlAlign {
    pub tau_prime: f64,
}

impl Alignment for SymKlAlign {
    fn name(&self) -> &'static str {
        "kl"
    }

    fn loss(&self, graph: &mut Graph, s_clean: NodeId, s_adv: NodeId) -> Result<NodeId> {
        check_same_vectors("align_symkl", graph, s_clean, s_adv)?;
        let sc = graph.scale(s_clean, 1.0 / self.tau_prime)?;
        let sa = graph.scale(s_adv, 1.0 / self.tau_prime)?;
        let log_p = graph.log_softmax(sc)?;
        let log_q = graph.log_softmax(sa)?;
        let p = graph.exp(log_p)?;
        let q = graph.exp(log_q)?;
        let pd = graph.sub(p, q)?;
        let ld = graph.sub(log_p, log_q)?;
        let prod = graph.mul(pd, ld)?;
        graph.sum(prod)
    }

    fn clone_box(&self) -> Box<dyn Alignment> {
        Box::new(self.clone())
    }
}

// ---- stage-2 composite -------------------------------------------------------------

/// Term switches and weight for the stage-2 objective
/// `L = CE(clean, t) + CE(adv, t) + λ·CMA`, with each term toggleable for
/// the ablation grid.
#[derive(Debug, Clone)]
pub struct Stage2Config {
    pub lambda: f64,
    pub include_clean_ce: bool,
    pub include_adv_ce: bool,
    pub include_cma: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            include_clean_ce: true,
            include_adv_ce: true,
            include_cma: true,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "stage-2 λ must be ≥ 0, got {}",
                self.lambda
            )));
        }
        if !(self.include_clean_ce || self.include_adv_ce || self.include_cma) {
            return Err(Error::InvalidArgument(
                "stage-2 objective needs at least one enabled term".into(),
            ));
        }
        Ok(())
    }
}

/// The stage-2 composite over one clean/adversarial embedding pair.
/// Gradients flow to the embeddings (and through them to encoders) and to
/// scorer parameters bound trainable.
#[allow(clippy::too_many_arguments)]
pub fn stage2_objective(
    graph: &mut Graph,
    scorer: &dyn Scorer,
    binding: &ScorerBinding,
    alignment: &dyn Alignment,
    e_clean: NodeId,
    e_adv: NodeId,
    anchors: &AnchorMatrix,
    t: usize,
    cfg: &Stage2Config,
) -> Result<NodeId> {
    cfg.validate()?;
    if t >= anchors.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "target class {t} out of range for {} classes",
            anchors.num_classes()
        )));
    }
    let s_clean = score_against_anchors(graph, scorer, binding, e_clean, anchors)?;
    let s_adv = score_against_anchors(graph, scorer, binding, e_adv, anchors)?;

    let mut total: Option<NodeId> = None;
    let mut add_term = |graph: &mut Graph, term: NodeId| -> Result<()> {
        total = Some(match total {
            Some(acc) => graph.add(acc, term)?,
            None => term,
        });
        Ok(())
    };

    if cfg.include_clean_ce {
        let ce = cross_entropy(graph, s_clean, t)?;
        add_term(graph, ce)?;
    }
    if cfg.include_adv_ce {
        let ce = cross_entropy(graph, s_adv, t)?;
        add_term(graph, ce)?;
    }
    if cfg.include_cma {
        let cma = alignment.loss(graph, s_clean, s_adv)?;
        let weighted = graph.scale(cma, cfg.lambda)?;
        add_term(graph, weighted)?;
    }
    Ok(total.expect("validate guarantees at least one term"))
}

// ---- embedding-drift bound ------------------------------------------------------------

/// Check `|cos(u, t) − cos(v, t)| ≤ (2 / max(‖u‖, ‖v‖)) · ‖u − v‖₂` and
/// return (holds, slack = rhs − lhs). Test-only property tying embedding
/// drift to anchor-score drift; never part of a training objective.
pub fn check_cosine_l2_bound(u: &Tensor, v: &Tensor, t_anchor: &Tensor) -> Result<(bool, f64)> {
    if u.shape() != v.shape() || u.shape() != t_anchor.shape() || u.shape().len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "cosine_l2_bound",
            lhs: u.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let nu = u.l2_norm();
    let nv = v.l2_norm();
    let nt = t_anchor.l2_norm();
    if nu <= 1e-12 || nv <= 1e-12 || nt <= 1e-12 {
        return Err(Error::DegenerateVector {
            what: "cosine_l2_bound",
            tol: 1e-12,
        });
    }
    let cos = |a: &Tensor, na: f64| -> f64 {
        a.data()
            .iter()
            .zip(t_anchor.data())
            .map(|(x, y)| x * y)
            .sum::<f64>()
            / (na * nt)
    };
    let lhs = (cos(u, nu) - cos(v, nv)).abs();
    let dist = u
        .data()
        .iter()
        .zip(v.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let rhs = 2.0 / nu.max(nv) * dist;
    Ok((lhs <= rhs + 1e-12, rhs - lhs))
}
