//! Image/clinical fusion networks.
//!
//! Both modalities are projected to `proj_dim` with an affine map and relu.
//! The projected pair is then fused in one of three ways:
//!
//! * `Concat`: `k = [ẽ, c̃]`
//! * `CoAttention`: `α_e = σ(W_eᵀ[e, c] + b_e)`, `α_c = σ(W_cᵀ[e, c] + b_c)`,
//!   `k = [α_e ⊙ ẽ, α_c ⊙ c̃]`
//! * `CrossAttention`: as co-attention, but each gate sees only the other
//!   modality: `α_e = σ(W_eᵀc + b_e)`, `α_c = σ(W_cᵀe + b_c)`
//!
//! Gates read the raw (unprojected) inputs and scale the projected ones.
//! `GateInput::Projected` switches gate inputs to `ẽ`/`c̃` instead.
//!
//! `k` goes through `affine → relu → affine` to produce class logits.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clinical::{ClinicalVector, CLINICAL_DIM};
use crate::error::{Error, Result};
use crate::tensor::{softmax, Graph, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    Concat,
    CoAttention,
    CrossAttention,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [
        FusionKind::Concat,
        FusionKind::CoAttention,
        FusionKind::CrossAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Concat => "concat",
            FusionKind::CoAttention => "co-attention",
            FusionKind::CrossAttention => "cross-attention",
        }
    }

    pub fn has_gates(self) -> bool {
        self != FusionKind::Concat
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionKind::Concat),
            "co-attention" | "coattention" => Ok(FusionKind::CoAttention),
            "cross-attention" | "crossattention" => Ok(FusionKind::CrossAttention),
            other => Err(Error::Config(format!("unknown fusion variant {other:?}"))),
        }
    }
}

/// What the attention gates are computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInput {
    /// Raw image embedding and raw clinical vector.
    #[default]
    Raw,
    /// Projected embeddings.
    Projected,
}

/// Architecture of a fusion model. Parameter shapes follow from this alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionVariant {
    pub kind: FusionKind,
    pub image_dim: usize,
    pub clinical_dim: usize,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub gate_input: GateInput,
}

impl Default for FusionVariant {
    fn default() -> Self {
        Self {
            kind: FusionKind::Concat,
            image_dim: 2048,
            clinical_dim: CLINICAL_DIM,
            proj_dim: 100,
            hidden_dim: 200,
            num_classes: 4,
            gate_input: GateInput::Raw,
        }
    }
}

impl FusionVariant {
    pub fn new(kind: FusionKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_dim == 0 {
            return fail("image_dim must be positive".into());
        }
        if self.clinical_dim != CLINICAL_DIM {
            return fail(format!(
                "clinical_dim must equal the vocabulary width {CLINICAL_DIM}, got {}",
                self.clinical_dim
            ));
        }
        if self.proj_dim == 0 || self.hidden_dim == 0 {
            return fail("proj_dim and hidden_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Input widths of the (image gate, clinical gate), if the variant has gates.
    pub fn gate_input_dims(&self) -> Option<(usize, usize)> {
        let (img, clin) = match self.gate_input {
            GateInput::Raw => (self.image_dim, self.clinical_dim),
            GateInput::Projected => (self.proj_dim, self.proj_dim),
        };
        match self.kind {
            FusionKind::Concat => None,
            FusionKind::CoAttention => Some((img + clin, img + clin)),
            FusionKind::CrossAttention => Some((clin, img)),
        }
    }
}

/// Affine map `x ↦ Wᵀx + b` with `W` stored row-major as `[in_dim, out_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Weights uniform in `[-1/√in_dim, 1/√in_dim]`, zero biases.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatePair {
    pub image_gate: Affine,
    pub clinical_gate: Affine,
}

/// Parameter set of one fusion variant.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    variant: FusionVariant,
    pub image_proj: Affine,
    pub clinical_proj: Affine,
    pub gates: Option<GatePair>,
    pub hidden: Affine,
    pub output: Affine,
}

fn param_name(block: &str, bias: bool) -> &'static str {
    match (block, bias) {
        ("image_proj", false) => "image_proj.weight",
        ("image_proj", true) => "image_proj.bias",
        ("clinical_proj", false) => "clinical_proj.weight",
        ("clinical_proj", true) => "clinical_proj.bias",
        ("image_gate", false) => "image_gate.weight",
        ("image_gate", true) => "image_gate.bias",
        ("clinical_gate", false) => "clinical_gate.weight",
        ("clinical_gate", true) => "clinical_gate.bias",
        ("hidden", false) => "hidden.weight",
        ("hidden", true) => "hidden.bias",
        ("output", false) => "output.weight",
        _ => "output.bias",
    }
}

/// Borrowed view of one parameter array.
#[derive(Clone, Copy, Debug)]
pub struct NamedParam<'a> {
    pub name: &'static str,
    pub shape: [usize; 2],
    pub values: &'a [f64],
}

impl FusionModel {
    fn build(variant: FusionVariant, mut make: impl FnMut(usize, usize) -> Affine) -> Result<Self> {
        variant.validate()?;
        let p = variant.proj_dim;
        let image_proj = make(variant.image_dim, p);
        let clinical_proj = make(variant.clinical_dim, p);
        let gates = variant.gate_input_dims().map(|(gi, gc)| GatePair {
            image_gate: make(gi, p),
            clinical_gate: make(gc, p),
        });
        let hidden = make(2 * p, variant.hidden_dim);
        let output = make(variant.hidden_dim, variant.num_classes);
        Ok(Self {
            variant,
            image_proj,
            clinical_proj,
            gates,
            hidden,
            output,
        })
    }

    pub fn zeros(variant: FusionVariant) -> Result<Self> {
        Self::build(variant, Affine::zeros)
    }

    pub fn init<R: Rng + ?Sized>(variant: FusionVariant, rng: &mut R) -> Result<Self> {
        Self::build(variant, |i, o| Affine::init(i, o, rng))
    }

    pub fn seeded(variant: FusionVariant, seed: u64) -> Result<Self> {
        Self::init(variant, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn variant(&self) -> &FusionVariant {
        &self.variant
    }

    pub fn kind(&self) -> FusionKind {
        self.variant.kind
    }

    fn affines(&self) -> Vec<(&'static str, &Affine)> {
        let mut out = vec![("image_proj", &self.image_proj), ("clinical_proj", &self.clinical_proj)];
        if let Some(g) = &self.gates {
            out.push(("image_gate", &g.image_gate));
            out.push(("clinical_gate", &g.clinical_gate));
        }
        out.push(("hidden", &self.hidden));
        out.push(("output", &self.output));
        out
    }

    /// All parameter arrays in declared order: for each affine block, weight then bias.
    pub fn parameters(&self) -> Vec<NamedParam<'_>> {
        self.affines()
            .into_iter()
            .flat_map(|(block, a)| {
                [
                    NamedParam {
                        name: param_name(block, false),
                        shape: [a.in_dim, a.out_dim],
                        values: &a.weight,
                    },
                    NamedParam {
                        name: param_name(block, true),
                        shape: [1, a.out_dim],
                        values: &a.bias,
                    },
                ]
            })
            .collect()
    }

    /// Mutable parameter arrays, same order and names as [`FusionModel::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        let mut affines: Vec<(&'static str, &mut Affine)> = vec![
            ("image_proj", &mut self.image_proj),
            ("clinical_proj", &mut self.clinical_proj),
        ];
        if let Some(g) = &mut self.gates {
            affines.push(("image_gate", &mut g.image_gate));
            affines.push(("clinical_gate", &mut g.clinical_gate));
        }
        affines.push(("hidden", &mut self.hidden));
        affines.push(("output", &mut self.output));
        affines
            .into_iter()
            .flat_map(|(block, a)| {
                [
                    (param_name(block, false), &mut a.weight),
                    (param_name(block, true), &mut a.bias),
                ]
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.values.len()).sum()
    }

    /// Records every parameter as a leaf on `graph`.
    pub fn attach(&self, graph: &mut Graph) -> ModelNodes {
        let mut leaf = |a: &Affine| AffineNodes {
            weight: graph
                .leaf(&[a.in_dim, a.out_dim], a.weight.clone())
                .expect("affine weight shape"),
            bias: graph.vector(a.bias.clone()),
        };
        let image_proj = leaf(&self.image_proj);
        let clinical_proj = leaf(&self.clinical_proj);
        let gates = self
            .gates
            .as_ref()
            .map(|g| (leaf(&g.image_gate), leaf(&g.clinical_gate)));
        let hidden = leaf(&self.hidden);
        let output = leaf(&self.output);
        ModelNodes {
            variant: self.variant,
            image_proj,
            clinical_proj,
            gates,
            hidden,
            output,
        }
    }

    /// Class probabilities for one sample.
    pub fn predict(&self, image: &[f64], clinical: &ClinicalVector) -> Result<Vec<f64>> {
        self.predict_raw(image, clinical.values())
    }

    pub fn predict_raw(&self, image: &[f64], clinical: &[f64]) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let nodes = self.attach(&mut graph);
        let e = graph.vector(image.to_vec());
        let c = graph.vector(clinical.to_vec());
        let trace = forward(&mut graph, &nodes, e, c)?;
        Ok(trace.probabilities(&graph))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AffineNodes {
    pub weight: TensorId,
    pub bias: TensorId,
}

/// Leaf handles of a model's parameters on one graph.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub variant: FusionVariant,
    pub image_proj: AffineNodes,
    pub clinical_proj: AffineNodes,
    pub gates: Option<(AffineNodes, AffineNodes)>,
    pub hidden: AffineNodes,
    pub output: AffineNodes,
}

impl ModelNodes {
    fn in_order(&self) -> Vec<AffineNodes> {
        let mut out = vec![self.image_proj, self.clinical_proj];
        if let Some((i, c)) = self.gates {
            out.push(i);
            out.push(c);
        }
        out.push(self.hidden);
        out.push(self.output);
        out
    }

    /// Leaf ids in the same order as [`FusionModel::parameters`].
    pub fn leaf_ids(&self) -> Vec<TensorId> {
        self.in_order()
            .into_iter()
            .flat_map(|a| [a.weight, a.bias])
            .collect()
    }

    /// Accumulated gradients in parameter order.
    pub fn gradients(&self, graph: &Graph) -> Vec<Vec<f64>> {
        self.leaf_ids().into_iter().map(|id| graph.grad(id).to_vec()).collect()
    }

    /// Rebuilds handles from leaf ids laid out as by [`ModelNodes::leaf_ids`].
    pub fn from_leaf_ids(variant: FusionVariant, ids: &[TensorId]) -> Result<Self> {
        let expected = if variant.kind.has_gates() { 12 } else { 8 };
        if ids.len() != expected {
            return Err(Error::dim("model leaves", &[ids.len()], &[expected]));
        }
        let pair = |i: usize| AffineNodes {
            weight: ids[2 * i],
            bias: ids[2 * i + 1],
        };
        let (gates, rest) = if variant.kind.has_gates() {
            (Some((pair(2), pair(3))), 4)
        } else {
            (None, 2)
        };
        Ok(Self {
            variant,
            image_proj: pair(0),
            clinical_proj: pair(1),
            gates,
            hidden: pair(rest),
            output: pair(rest + 1),
        })
    }
}

fn expect_len(graph: &Graph, id: TensorId, len: usize, op: &'static str) -> Result<()> {
    let shape = graph.shape(id);
    if shape != [len] {
        return Err(Error::dim(op, shape, &[len]));
    }
    Ok(())
}

/// `relu(W_xᵀe + b_x)`.
pub fn project_image(graph: &mut Graph, nodes: &ModelNodes, image: TensorId) -> Result<TensorId> {
    expect_len(graph, image, nodes.variant.image_dim, "project_image")?;
    let z = graph.linear(image, nodes.image_proj.weight, nodes.image_proj.bias)?;
    Ok(graph.relu(z))
}

/// `relu(W_tᵀc + b_t)`.
pub fn project_clinical(graph: &mut Graph, nodes: &ModelNodes, clinical: TensorId) -> Result<TensorId> {
    expect_len(graph, clinical, nodes.variant.clinical_dim, "project_clinical")?;
    let z = graph.linear(clinical, nodes.clinical_proj.weight, nodes.clinical_proj.bias)?;
    Ok(graph.relu(z))
}

/// Fused embedding and, for attention variants, the two gates.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub output: TensorId,
    pub image_gate: Option<TensorId>,
    pub clinical_gate: Option<TensorId>,
}

pub fn fuse_concat(graph: &mut Graph, image_proj: TensorId, clinical_proj: TensorId) -> Result<TensorId> {
    let p = graph.shape(image_proj).to_vec();
    if graph.shape(clinical_proj) != p.as_slice() {
        return Err(Error::dim("fuse_concat", &p, graph.shape(clinical_proj)));
    }
    graph.concat(image_proj, clinical_proj)
}

fn gated(
    graph: &mut Graph,
    nodes: &ModelNodes,
    image_gate_in: TensorId,
    clinical_gate_in: TensorId,
    image_proj: TensorId,
    clinical_proj: TensorId,
) -> Result<Fused> {
    let p = nodes.variant.proj_dim;
    expect_len(graph, image_proj, p, "fuse")?;
    expect_len(graph, clinical_proj, p, "fuse")?;
    let (ig, cg) = nodes
        .gates
        .ok_or_else(|| Error::Contract("model has no gate parameters".into()))?;
    let za = graph.linear(image_gate_in, ig.weight, ig.bias)?;
    let alpha_e = graph.sigmoid(za);
    let zc = graph.linear(clinical_gate_in, cg.weight, cg.bias)?;
    let alpha_c = graph.sigmoid(zc);
    let e_aug = graph.hadamard(alpha_e, image_proj)?;
    let c_aug = graph.hadamard(alpha_c, clinical_proj)?;
    let output = graph.concat(e_aug, c_aug)?;
    Ok(Fused {
        output,
        image_gate: Some(alpha_e),
        clinical_gate: Some(alpha_c),
    })
}

fn gate_sources(
    graph: &Graph,
    nodes: &ModelNodes,
    image: TensorId,
    clinical: TensorId,
    image_proj: TensorId,
    clinical_proj: TensorId,
) -> Result<(TensorId, TensorId)> {
    match nodes.variant.gate_input {
        GateInput::Raw => {
            expect_len(graph, image, nodes.variant.image_dim, "gate input")?;
            expect_len(graph, clinical, nodes.variant.clinical_dim, "gate input")?;
            Ok((image, clinical))
        }
        GateInput::Projected => Ok((image_proj, clinical_proj)),
    }
}

/// Co-attention: both gates read `[e, c]`.
pub fn fuse_coattention(
    graph: &mut Graph,
    nodes: &ModelNodes,
    image: TensorId,
    clinical: TensorId,
    image_proj: TensorId,
    clinical_proj: TensorId,
) -> Result<Fused> {
    if nodes.variant.kind != FusionKind::CoAttention {
        return Err(Error::Contract(format!(
            "co-attention fusion on a {} model",
            nodes.variant.kind
        )));
    }
    let (e, c) = gate_sources(graph, nodes, image, clinical, image_proj, clinical_proj)?;
    let joint = graph.concat(e, c)?;
    gated(graph, nodes, joint, joint, image_proj, clinical_proj)
}

/// Cross-attention: the image gate reads `c`, the clinical gate reads `e`.
pub fn fuse_crossattention(
    graph: &mut Graph,
    nodes: &ModelNodes,
    image: TensorId,
    clinical: TensorId,
    image_proj: TensorId,
    clinical_proj: TensorId,
) -> Result<Fused> {
    if nodes.variant.kind != FusionKind::CrossAttention {
        return Err(Error::Contract(format!(
            "cross-attention fusion on a {} model",
            nodes.variant.kind
        )));
    }
    let (e, c) = gate_sources(graph, nodes, image, clinical, image_proj, clinical_proj)?;
    gated(graph, nodes, c, e, image_proj, clinical_proj)
}

/// Classifier head logits: `affine₂(relu(affine₁(k)))`.
pub fn classify_logits(graph: &mut Graph, nodes: &ModelNodes, fused: TensorId) -> Result<TensorId> {
    expect_len(graph, fused, 2 * nodes.variant.proj_dim, "classify")?;
    let h = graph.linear(fused, nodes.hidden.weight, nodes.hidden.bias)?;
    let h = graph.relu(h);
    graph.linear(h, nodes.output.weight, nodes.output.bias)
}

/// Softmax of the classifier head.
pub fn classify(graph: &mut Graph, nodes: &ModelNodes, fused: TensorId) -> Result<Vec<f64>> {
    let logits = classify_logits(graph, nodes, fused)?;
    Ok(softmax(graph.value(logits)))
}

/// Intermediate nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    pub image_proj: TensorId,
    pub clinical_proj: TensorId,
    pub fused: Fused,
    pub logits: TensorId,
}

impl ForwardTrace {
    pub fn probabilities(&self, graph: &Graph) -> Vec<f64> {
        softmax(graph.value(self.logits))
    }
}

/// project → fuse → classify for the model's variant.
pub fn forward(graph: &mut Graph, nodes: &ModelNodes, image: TensorId, clinical: TensorId) -> Result<ForwardTrace> {
    let image_proj = project_image(graph, nodes, image)?;
    let clinical_proj = project_clinical(graph, nodes, clinical)?;
    let fused = match nodes.variant.kind {
        FusionKind::Concat => Fused {
            output: fuse_concat(graph, image_proj, clinical_proj)?,
            image_gate: None,
            clinical_gate: None,
        },
        FusionKind::CoAttention => {
            fuse_coattention(graph, nodes, image, clinical, image_proj, clinical_proj)?
        }
        FusionKind::CrossAttention => {
            fuse_crossattention(graph, nodes, image, clinical, image_proj, clinical_proj)?
        }
    };
    let logits = classify_logits(graph, nodes, fused.output)?;
    Ok(ForwardTrace {
        image_proj,
        clinical_proj,
        fused,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;

    fn small(kind: FusionKind) -> FusionVariant {
        FusionVariant {
            kind,
            image_dim: 6,
            proj_dim: 3,
            hidden_dim: 5,
            ..FusionVariant::default()
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn one_hot_clinical(j: usize) -> Vec<f64> {
        let mut c = vec![0.0; CLINICAL_DIM];
        c[j] = 1.0;
        c
    }

    #[test]
    fn default_dims() {
        let v = FusionVariant::new(FusionKind::CoAttention);
        assert_eq!((v.image_dim, v.clinical_dim, v.proj_dim, v.hidden_dim, v.num_classes), (2048, 36, 100, 200, 4));
        let m = FusionModel::zeros(v).unwrap();
        assert_eq!(m.hidden.in_dim, 200);
        assert_eq!(m.hidden.out_dim, 200);
        let g = m.gates.as_ref().unwrap();
        assert_eq!(g.image_gate.in_dim, 2048 + 36);
        let cross = FusionModel::zeros(FusionVariant::new(FusionKind::CrossAttention)).unwrap();
        let g = cross.gates.as_ref().unwrap();
        assert_eq!((g.image_gate.in_dim, g.clinical_gate.in_dim), (36, 2048));
        assert!(FusionModel::zeros(FusionVariant::new(FusionKind::Concat)).unwrap().gates.is_none());
    }

    #[test]
    fn variant_validation() {
        let mut v = FusionVariant::default();
        v.num_classes = 1;
        assert!(v.validate().is_err());
        let mut v = FusionVariant::default();
        v.proj_dim = 0;
        assert!(v.validate().is_err());
        let mut v = FusionVariant::default();
        v.clinical_dim = 30;
        assert!(v.validate().is_err());
    }

    #[test]
    fn projection_examples() {
        let v = FusionVariant::new(FusionKind::Concat);
        let mut m = FusionModel::zeros(v).unwrap();
        let mut g = Graph::new();
        let nodes = m.attach(&mut g);
        let e = g.vector(vec![1.0; 2048]);
        let p = project_image(&mut g, &nodes, e).unwrap();
        assert_eq!(g.value(p).len(), 100);
        assert!(g.value(p).iter().all(|&x| x == 0.0));

        m.image_proj.bias = vec![-1e6; 100];
        let mut g = Graph::new();
        let nodes = m.attach(&mut g);
        let e = g.vector(vec![3.0; 2048]);
        let p = project_image(&mut g, &nodes, e).unwrap();
        assert!(g.value(p).iter().all(|&x| x == 0.0));

        let bad = g.vector(vec![1.0; 2047]);
        assert!(matches!(project_image(&mut g, &nodes, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn clinical_projection_examples() {
        let v = small(FusionKind::Concat);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = FusionModel::init(v, &mut rng).unwrap();
        m.clinical_proj.bias = random_vec(&mut rng, 3);

        let mut g = Graph::new();
        let nodes = m.attach(&mut g);
        let c = g.vector(vec![0.0; CLINICAL_DIM]);
        let p = project_clinical(&mut g, &nodes, c).unwrap();
        let expected: Vec<f64> = m.clinical_proj.bias.iter().map(|&b| b.max(0.0)).collect();
        assert_eq!(g.value(p), expected.as_slice());

        let j = 7;
        let c = g.vector(one_hot_clinical(j));
        let p = project_clinical(&mut g, &nodes, c).unwrap();
        let row = &m.clinical_proj.weight[j * 3..j * 3 + 3];
        let expected: Vec<f64> = row
            .iter()
            .zip(&m.clinical_proj.bias)
            .map(|(w, b)| (w + b).max(0.0))
            .collect();
        assert_eq!(g.value(p), expected.as_slice());
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.vector((0..100).map(|i| i as f64).collect());
        let b = g.vector(vec![0.5; 100]);
        let k = fuse_concat(&mut g, a, b).unwrap();
        assert_eq!(g.value(k).len(), 200);
        assert_eq!(&g.value(k)[..100], g.value(a));
        let z1 = g.vector(vec![0.0; 4]);
        let z2 = g.vector(vec![0.0; 4]);
        let k = fuse_concat(&mut g, z1, z2).unwrap();
        assert!(g.value(k).iter().all(|&x| x == 0.0));
        let short = g.vector(vec![0.0; 3]);
        assert!(fuse_concat(&mut g, z1, short).is_err());
    }

    #[test]
    fn coattention_zero_gate_weights_halve() {
        let v = small(FusionKind::CoAttention);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = FusionModel::init(v, &mut rng).unwrap();
        let gates = m.gates.as_mut().unwrap();
        gates.image_gate = Affine::zeros(6 + 36, 3);
        gates.clinical_gate = Affine::zeros(6 + 36, 3);
        let mut g = Graph::new();
        let nodes = m.attach(&mut g);
        let e = g.vector(random_vec(&mut rng, 6));
        let c = g.vector(one_hot_clinical(3));
        let ep = g.vector(vec![1.0, 2.0, 3.0]);
        let cp = g.vector(vec![4.0, 0.0, 6.0]);
        let fused = fuse_coattention(&mut g, &nodes, e, c, ep, cp).unwrap();
        assert_eq!(g.value(fused.output), &[0.5, 1.0, 1.5, 2.0, 0.0, 3.0]);
    }

    #[test]
    fn coattention_saturated_image_gate_passes_projection() {
        let v = small(FusionKind::CoAttention);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = FusionModel::init(v, &mut rng).unwrap();
        m.gates.as_mut().unwrap().image_gate.bias = vec![1000.0; 3];
        let mut g = Graph::new();
        let nodes = m.attach(&mut g);
        let e = g.vector(random_vec(&mut rng, 6));
        let c = g.vector(one_hot_clinical(0));
        let ep = g.vector(vec![0.3, 1.7, 2.2]);
        let cp = g.vector(vec![1.0, 1.0, 1.0]);
        let fused = fuse_coattention(&mut g, &nodes, e, c, ep, cp).unwrap();
        for (a, b) in g.value(fused.output)[..3].iter().zip(g.value(ep)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn crossattention_missing_clinical_gate_is_sigmoid_bias() {
        let v = small(FusionKind::CrossAttention);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = FusionModel::init(v, &mut rng).unwrap();
        m.gates.as_mut().unwrap().image_gate.bias = random_vec(&mut rng, 3);
        let mut g = Graph::new();
        let nodes = m.attach(&mut g);
        let e = g.vector(random_vec(&mut rng, 6));
        let c = g.vector(vec![0.0; CLINICAL_DIM]);
        let ep = project_image(&mut g, &nodes, e).unwrap();
        let cp = project_clinical(&mut g, &nodes, c).unwrap();
        let fused = fuse_crossattention(&mut g, &nodes, e, c, ep, cp).unwrap();
        let expected: Vec<f64> = m.gates.as_ref().unwrap().image_gate.bias.iter().map(|&b| sigmoid(b)).collect();
        assert_eq!(g.value(fused.image_gate.unwrap()), expected.as_slice());

        m.gates.as_mut().unwrap().image_gate.bias = vec![0.0; 3];
        let mut g = Graph::new();
        let nodes = m.attach(&mut g);
        let e = g.vector(random_vec(&mut rng, 6));
        let c = g.vector(vec![0.0; CLINICAL_DIM]);
        let trace = forward(&mut g, &nodes, e, c).unwrap();
        assert!(g.value(trace.fused.image_gate.unwrap()).iter().all(|&a| a == 0.5));
    }

    #[test]
    fn wrong_fusion_for_kind_is_rejected() {
        let m = FusionModel::seeded(small(FusionKind::Concat), 0).unwrap();
        let mut g = Graph::new();
        let nodes = m.attach(&mut g);
        let e = g.vector(vec![0.0; 6]);
        let c = g.vector(vec![0.0; 36]);
        let p = g.vector(vec![0.0; 3]);
        assert!(fuse_coattention(&mut g, &nodes, e, c, p, p).is_err());
        assert!(fuse_crossattention(&mut g, &nodes, e, c, p, p).is_err());
    }

    #[test]
    fn classify_examples() {
        let v = small(FusionKind::Concat);
        let m = FusionModel::zeros(v).unwrap();
        let mut g = Graph::new();
        let nodes = m.attach(&mut g);
        let k = g.vector(vec![1.0; 6]);
        let probs = classify(&mut g, &nodes, k).unwrap();
        assert_eq!(probs, vec![0.25; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = FusionModel::init(v, &mut rng).unwrap();
        for _ in 0..20 {
            let mut g = Graph::new();
            let nodes = m.attach(&mut g);
            let k = g.vector(random_vec(&mut rng, 6));
            let probs = classify(&mut g, &nodes, k).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let bad = g.vector(vec![0.0; 5]);
        let nodes = m.attach(&mut g);
        assert!(classify(&mut g, &nodes, bad).is_err());
    }

    #[test]
    fn parameter_order_and_mut_agree() {
        for kind in FusionKind::ALL {
            let mut m = FusionModel::seeded(small(kind), 5).unwrap();
            let lens: Vec<usize> = m.parameters().iter().map(|p| p.values.len()).collect();
            let mut_lens: Vec<usize> = m.parameters_mut().iter().map(|(_, p)| p.len()).collect();
            assert_eq!(lens, mut_lens);
            let mut g = Graph::new();
            let nodes = m.attach(&mut g);
            let ids = nodes.leaf_ids();
            assert_eq!(ids.len(), lens.len());
            let rebuilt = ModelNodes::from_leaf_ids(*m.variant(), &ids).unwrap();
            assert_eq!(rebuilt.leaf_ids(), ids);
        }
    }

    #[test]
    fn projected_gate_input_shapes() {
        let mut v = small(FusionKind::CoAttention);
        v.gate_input = GateInput::Projected;
        let m = FusionModel::seeded(v, 1).unwrap();
        assert_eq!(m.gates.as_ref().unwrap().image_gate.in_dim, 6);
        let probs = m.predict_raw(&[0.1; 6], &one_hot_clinical(2)).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kind_parsing() {
        for kind in FusionKind::ALL {
            assert_eq!(kind.name().parse::<FusionKind>().unwrap(), kind);
        }
        assert!("late".parse::<FusionKind>().is_err());
    }
}
