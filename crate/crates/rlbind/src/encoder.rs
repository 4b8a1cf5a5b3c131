//! Per-modality MLP encoders, low-rank adapters, and the frozen class-anchor
//! matrix that stands in for a locked text encoder.
//!
//! Encoders map a raw modality vector (values in `[0,1]`) to a length-`d`
//! embedding. The embedding is intentionally *not* normalized here: the
//! contrastive loss normalizes internally, while the correspondence scorers
//! receive raw embeddings so that magnitude-sensitive and magnitude-invariant
//! scorers actually differ.
//!
//! Two training regimes exist per encoder. Full fine-tuning updates every
//! weight and bias. With a [`LowRankAdapter`] attached, the base weights
//! freeze and the trainable set becomes exactly the adapter factors plus the
//! biases; the effective weight is `W + B·A`, and with `B = 0` (the attach
//! state) the adapted forward is bit-identical to the base forward.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng;
use crate::tensor::Tensor;

/// Layer nonlinearity. The final layer of an encoder is always `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Low-rank update `B·A` over a frozen base weight.
#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    /// r × d_in
    pub a: Tensor,
    /// d_out × r
    pub b: Tensor,
    pub rank: usize,
}

/// One affine layer `W·x + b`, optionally adapted, optionally rectified.
#[derive(Debug, Clone)]
pub struct Layer {
    /// d_out × d_in; frozen while an adapter is attached.
    pub weight: Tensor,
    /// d_out
    pub bias: Tensor,
    pub activation: Activation,
    pub adapter: Option<LowRankAdapter>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Feed-forward encoder for one modality.
#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<Layer>,
    input_dim: usize,
    embed_dim: usize,
}

impl Encoder {
    /// Fresh encoder `input_dim -> hidden[0] -> … -> embed_dim` with relu
    /// between layers, linear output, and weights drawn uniform ±1/√fan_in.
    pub fn new<R: Rng>(input_dim: usize, hidden: &[usize], embed_dim: usize, rng: &mut R) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);
        let layers = (0..dims.len() - 1)
            .map(|i| {
                let (d_in, d_out) = (dims[i], dims[i + 1]);
                let weight = Tensor::matrix(
                    d_out,
                    d_in,
                    (0..d_out * d_in)
                        .map(|_| rng::fan_in_uniform(rng, d_in))
                        .collect(),
                )
                .expect("positive layer dims");
                let activation = if i + 2 == dims.len() {
                    Activation::None
                } else {
                    Activation::Relu
                };
                Layer {
                    weight,
                    bias: Tensor::zeros(&[d_out]),
                    activation,
                    adapter: None,
                }
            })
            .collect();
        Self {
            layers,
            input_dim,
            embed_dim,
        }
    }

    /// Assemble from explicit layers, validating the dimension chain and the
    /// linear-output invariant.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "encoder layer chain",
                    lhs: pair[0].weight.shape().to_vec(),
                    rhs: pair[1].weight.shape().to_vec(),
                });
            }
        }
        let last = layers.last().expect("non-empty");
        if last.activation != Activation::None {
            return Err(Error::InvalidArgument(
                "final encoder layer must be linear".into(),
            ));
        }
        let input_dim = layers[0].in_dim();
        let embed_dim = last.out_dim();
        Ok(Self {
            layers,
            input_dim,
            embed_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Forward pass outside any graph (no gradients; used for plain
    /// classification and as a cross-check against the taped forward).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != [self.input_dim] {
            return Err(Error::UnsupportedShape {
                op: "encode",
                expected: "input vector matching encoder input_dim",
                shape: x.shape().to_vec(),
            });
        }
        let mut h = x.data().to_vec();
        for layer in &self.layers {
            let (d_out, d_in) = (layer.out_dim(), layer.in_dim());
            let w = layer.weight.data();
            let mut z = layer.bias.data().to_vec();
            for i in 0..d_out {
                let row = &w[i * d_in..(i + 1) * d_in];
                z[i] += row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            }
            if let Some(ad) = &layer.adapter {
                let r = ad.rank;
                let mut ax = vec![0.0; r];
                for (i, slot) in ax.iter_mut().enumerate() {
                    let row = &ad.a.data()[i * d_in..(i + 1) * d_in];
                    *slot = row.iter().zip(&h).map(|(a, b)| a * b).sum();
                }
                for (i, zi) in z.iter_mut().enumerate() {
                    let row = &ad.b.data()[i * r..(i + 1) * r];
                    *zi += row.iter().zip(&ax).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if layer.activation == Activation::Relu {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            h = z;
        }
        Tensor::vector(h)
    }

    /// Deep frozen copy; training the source later cannot touch it.
    pub fn snapshot_frozen(&self) -> FrozenEncoder {
        FrozenEncoder(self.clone())
    }

    /// Attach rank-`r` adapters to every layer. Base weights freeze; the
    /// trainable set becomes {A, B, biases}. `A` starts small random,
    /// `B` starts at zero so the adapted forward equals the base forward.
    pub fn attach_lora<R: Rng>(&mut self, rank: usize, rng: &mut R) -> Result<()> {
        if rank < 1 {
            return Err(Error::InvalidArgument("LoRA rank must be ≥ 1".into()));
        }
        for layer in &self.layers {
            let lim = layer.in_dim().min(layer.out_dim());
            if rank >= lim {
                return Err(Error::InvalidArgument(format!(
                    "LoRA rank {rank} must be < min(d_in, d_out) = {lim} for a {}x{} layer",
                    layer.out_dim(),
                    layer.in_dim()
                )));
            }
        }
        for layer in self.layers.iter_mut() {
            let (d_in, d_out) = (layer.in_dim(), layer.out_dim());
            let a = Tensor::matrix(
                rank,
                d_in,
                (0..rank * d_in)
                    .map(|_| rng::fan_in_uniform(rng, d_in))
                    .collect(),
            )
            .expect("positive dims");
            layer.adapter = Some(LowRankAdapter {
                a,
                b: Tensor::zeros(&[d_out, rank]),
                rank,
            });
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.layers.iter().any(|l| l.adapter.is_some())
    }

    /// Total parameter count (weights and biases; adapters excluded).
    pub fn base_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Count of parameters the current regime would update: with adapters,
    /// {A, B, biases}; otherwise {weights, biases}.
    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.adapter {
                Some(ad) => ad.a.len() + ad.b.len() + l.bias.len(),
                None => l.weight.len() + l.bias.len(),
            })
            .sum()
    }

    /// All tensors under stable dotted names, for checkpoints and digests.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.layer{i}.weight"), layer.weight.clone()));
            out.push((format!("{prefix}.layer{i}.bias"), layer.bias.clone()));
            if let Some(ad) = &layer.adapter {
                out.push((format!("{prefix}.layer{i}.lora_a"), ad.a.clone()));
                out.push((format!("{prefix}.layer{i}.lora_b"), ad.b.clone()));
            }
        }
        out
    }

    /// SHA-256 over all named tensors (names, shapes, little-endian values).
    pub fn digest(&self) -> String {
        digest_tensors(self.named_tensors("enc").iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Record this encoder's parameters on `graph`. With
    /// [`Binding::Trainable`], the regime's trainable set requires grad.
    pub fn bind(&self, graph: &mut Graph, binding: Binding) -> BoundEncoder {
        let train = binding == Binding::Trainable;
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let has_adapter = layer.adapter.is_some();
                let weight = graph.leaf(layer.weight.clone(), train && !has_adapter);
                let bias = graph.leaf(layer.bias.clone(), train);
                let adapter = layer.adapter.as_ref().map(|ad| BoundAdapter {
                    a: graph.leaf(ad.a.clone(), train),
                    b: graph.leaf(ad.b.clone(), train),
                });
                BoundLayer {
                    weight,
                    bias,
                    adapter,
                    activation: layer.activation,
                }
            })
            .collect();
        BoundEncoder {
            layers,
            input_dim: self.input_dim,
            embed_dim: self.embed_dim,
        }
    }

    /// Gradient-descend the trainable set using gradients accumulated on
    /// `graph` for the nodes of `bound` (which must come from
    /// [`Self::bind`] with [`Binding::Trainable`] on this encoder).
    pub fn apply_sgd(&mut self, bound: &BoundEncoder, graph: &Graph, lr: f64) -> Result<()> {
        if bound.layers.len() != self.layers.len() {
            return Err(Error::Training(
                "bound encoder does not match this encoder".into(),
            ));
        }
        for (layer, b) in self.layers.iter_mut().zip(&bound.layers) {
            step_tensor(&mut layer.bias, graph, b.bias, lr)?;
            match (&mut layer.adapter, &b.adapter) {
                (Some(ad), Some(ba)) => {
                    step_tensor(&mut ad.a, graph, ba.a, lr)?;
                    step_tensor(&mut ad.b, graph, ba.b, lr)?;
                }
                (None, None) => step_tensor(&mut layer.weight, graph, b.weight, lr)?,
                _ => {
                    return Err(Error::Training(
                        "bound encoder adapter layout does not match this encoder".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

fn step_tensor(t: &mut Tensor, graph: &Graph, id: NodeId, lr: f64) -> Result<()> {
    let grad = graph.grad(id)?;
    for (v, g) in t.data_mut().iter_mut().zip(grad.data()) {
        *v -= lr * g;
    }
    Ok(())
}

/// Whether a [`Encoder::bind`] marks the trainable set as requiring grad.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Frozen,
    Trainable,
}

#[derive(Debug, Clone, Copy)]
struct BoundAdapter {
    a: NodeId,
    b: NodeId,
}

#[derive(Debug, Clone, Copy)]
struct BoundLayer {
    weight: NodeId,
    bias: NodeId,
    adapter: Option<BoundAdapter>,
    activation: Activation,
}

/// Parameters of one encoder recorded on one graph.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    layers: Vec<BoundLayer>,
    input_dim: usize,
    embed_dim: usize,
}

impl BoundEncoder {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Taped forward pass; gradients flow to the input node and to whatever
    /// parameters were bound trainable.
    pub fn forward(&self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        if graph.value(x).shape() != [self.input_dim] {
            return Err(Error::UnsupportedShape {
                op: "encoder forward",
                expected: "input vector matching encoder input_dim",
                shape: graph.value(x).shape().to_vec(),
            });
        }
        let mut h = x;
        for layer in &self.layers {
            let input = h;
            let wx = graph.matmul(layer.weight, input)?;
            let mut z = graph.add(wx, layer.bias)?;
            if let Some(ad) = &layer.adapter {
                let ax = graph.matmul(ad.a, input)?;
                let bax = graph.matmul(ad.b, ax)?;
                z = graph.add(z, bax)?;
            }
            h = match layer.activation {
                Activation::Relu => graph.relu(z)?,
                Activation::None => z,
            };
        }
        Ok(h)
    }
}

/// Immutable snapshot of an encoder; the stage-1 objective measures drift
/// against it. It has no mutators and only frozen bindings.
#[derive(Debug, Clone)]
pub struct FrozenEncoder(Encoder);

impl FrozenEncoder {
    pub fn encoder(&self) -> &Encoder {
        &self.0
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.0.encode(x)
    }

    pub fn bind(&self, graph: &mut Graph) -> BoundEncoder {
        self.0.bind(graph, Binding::Frozen)
    }

    pub fn digest(&self) -> String {
        self.0.digest()
    }
}

/// Frozen unit-norm class anchors: `d×C`, one column per class.
#[derive(Debug, Clone)]
pub struct AnchorMatrix {
    e_ctr: Tensor,
    class_names: Vec<String>,
}

impl AnchorMatrix {
    /// Rejection-sample `C` unit vectors with pairwise cosine ≤ 0.5.
    /// Deterministic per seed; fails after 10,000 candidate draws.
    pub fn build(seed: u64, c: usize, d: usize) -> Result<Self> {
        Self::check_dims(c, d)?;
        let mut rng = rng::seeded(seed);
        let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(c);
        let mut attempts = 0;
        while anchors.len() < c {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InvalidArgument(format!(
                    "could not place {c} anchors with pairwise cosine ≤ 0.5 in {d} dimensions \
                     after 10000 attempts; raise d or lower C"
                )));
            }
            let cand = unit_gaussian(&mut rng, d);
            let separated = anchors
                .iter()
                .all(|prev| dot(prev, &cand) <= 0.5);
            if separated {
                anchors.push(cand);
            }
        }
        Ok(Self::from_columns(&anchors, c, d))
    }

    /// Mutually orthogonal anchors (pairwise cosine exactly 0), from seeded
    /// Gram–Schmidt. Requires `C ≤ d`.
    pub fn orthonormal(seed: u64, c: usize, d: usize) -> Result<Self> {
        Self::check_dims(c, d)?;
        if c > d {
            return Err(Error::InvalidArgument(format!(
                "cannot fit {c} orthogonal anchors in {d} dimensions"
            )));
        }
        let mut rng = rng::seeded(seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(c);
        while basis.len() < c {
            let mut v = unit_gaussian(&mut rng, d);
            for prev in &basis {
                let proj = dot(prev, &v);
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= proj * pi;
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm < 1e-8 {
                continue; // candidate fell in the current span; redraw
            }
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            basis.push(v);
        }
        Ok(Self::from_columns(&basis, c, d))
    }

    fn check_dims(c: usize, d: usize) -> Result<()> {
        if c < 2 || d < 2 {
            return Err(Error::InvalidArgument(format!(
                "anchor matrix needs C ≥ 2 and d ≥ 2, got C={c}, d={d}"
            )));
        }
        Ok(())
    }

    fn from_columns(cols: &[Vec<f64>], c: usize, d: usize) -> Self {
        let mut data = vec![0.0; d * c];
        for (j, col) in cols.iter().enumerate() {
            for i in 0..d {
                data[i * c + j] = col[i];
            }
        }
        Self {
            e_ctr: Tensor::matrix(d, c, data).expect("validated dims"),
            class_names: (0..c).map(|j| format!("class_{j}")).collect(),
        }
    }

    /// Rebuild from a previously saved `d × C` matrix (checkpoint loading).
    /// Columns must be unit vectors; separation was a construction-time
    /// property and is not re-checked.
    pub fn from_matrix(e_ctr: Tensor) -> Result<Self> {
        if e_ctr.shape().len() != 2 {
            return Err(Error::UnsupportedShape {
                op: "anchor matrix",
                expected: "a d × C matrix",
                shape: e_ctr.shape().to_vec(),
            });
        }
        let (d, c) = (e_ctr.shape()[0], e_ctr.shape()[1]);
        Self::check_dims(c, d)?;
        for j in 0..c {
            let norm = e_ctr.column(j).l2_norm();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "anchor column {j} is not unit-norm (‖·‖ = {norm})"
                )));
            }
        }
        Ok(Self {
            class_names: (0..c).map(|j| format!("class_{j}")).collect(),
            e_ctr,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.e_ctr.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.e_ctr.shape()[0]
    }

    /// Column `j`: the anchor embedding of class `j`.
    pub fn anchor(&self, j: usize) -> Tensor {
        self.e_ctr.column(j)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.e_ctr
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// SHA-256 over the matrix bytes; used to assert the anchors never move.
    pub fn digest(&self) -> String {
        digest_tensors(std::iter::once(("anchors", &self.e_ctr)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_gaussian<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng::standard_normal(rng)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// SHA-256 hex digest over (name, shape, little-endian values) records.
pub fn digest_tensors<'a, I>(tensors: I) -> String
where
    I: Iterator<Item = (&'a str, &'a Tensor)>,
{
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &e in t.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
