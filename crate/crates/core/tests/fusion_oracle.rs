//! Fusion forward passes against a plain-loop reimplementation.

use mmfusion::fusion::{forward, Affine, FusionKind, FusionModel, FusionVariant};
use mmfusion::tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn affine(a: &Affine, x: &[f64]) -> Vec<f64> {
    (0..a.out_dim)
        .map(|j| a.bias[j] + (0..a.in_dim).map(|i| a.weight[i * a.out_dim + j] * x[i]).sum::<f64>())
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn sig(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
}

struct Dense {
    logits: Vec<f64>,
    image_gate: Option<Vec<f64>>,
    clinical_gate: Option<Vec<f64>>,
}

fn dense_forward(m: &FusionModel, e: &[f64], c: &[f64]) -> Dense {
    let ep = relu(affine(&m.image_proj, e));
    let cp = relu(affine(&m.clinical_proj, c));
    let joint: Vec<f64> = e.iter().chain(c).copied().collect();
    let (fused, ig, cg) = match (m.kind(), &m.gates) {
        (FusionKind::Concat, _) => ([ep, cp].concat(), None, None),
        (kind, Some(g)) => {
            let (ig_in, cg_in) = if kind == FusionKind::CoAttention { (&joint[..], &joint[..]) } else { (c, e) };
            let ig = sig(affine(&g.image_gate, ig_in));
            let cg = sig(affine(&g.clinical_gate, cg_in));
            let f: Vec<f64> = ig.iter().zip(&ep).map(|(a, b)| a * b).chain(cg.iter().zip(&cp).map(|(a, b)| a * b)).collect();
            (f, Some(ig), Some(cg))
        }
        _ => unreachable!("attention model without gates"),
    };
    let logits = affine(&m.output, &relu(affine(&m.hidden, &fused)));
    Dense { logits, image_gate: ig, clinical_gate: cg }
}

fn small(kind: FusionKind) -> FusionVariant {
    FusionVariant {
        kind,
        image_dim: 12,
        proj_dim: 6,
        hidden_dim: 10,
        num_classes: 4,
        ..FusionVariant::default()
    }
}

fn random_inputs(rng: &mut ChaCha8Rng, image_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let e = (0..image_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let c = (0..36).map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect();
    (e, c)
}

fn randomize_biases(model: &mut FusionModel, rng: &mut ChaCha8Rng) {
    for (name, values) in model.parameters_mut() {
        if name.ends_with(".bias") {
            values.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        }
    }
}

fn graph_forward(m: &FusionModel, e: &[f64], c: &[f64]) -> Dense {
    let mut g = Graph::new();
    let nodes = m.attach(&mut g);
    let ei = g.vector(e.to_vec());
    let ci = g.vector(c.to_vec());
    let t = forward(&mut g, &nodes, ei, ci).unwrap();
    Dense {
        logits: g.value(t.logits).to_vec(),
        image_gate: t.fused.image_gate.map(|id| g.value(id).to_vec()),
        clinical_gate: t.fused.clinical_gate.map(|id| g.value(id).to_vec()),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn all_variants_match_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for kind in FusionKind::ALL {
        for _ in 0..25 {
            let mut model = FusionModel::init(small(kind), &mut rng).unwrap();
            randomize_biases(&mut model, &mut rng);
            let (e, c) = random_inputs(&mut rng, 12);
            let want = dense_forward(&model, &e, &c);
            let got = graph_forward(&model, &e, &c);
            assert!(max_diff(&want.logits, &got.logits) <= 1e-12, "{kind} logits");
            if kind.has_gates() {
                assert!(max_diff(want.image_gate.as_ref().unwrap(), got.image_gate.as_ref().unwrap()) <= 1e-12);
                assert!(max_diff(want.clinical_gate.as_ref().unwrap(), got.clinical_gate.as_ref().unwrap()) <= 1e-12);
            } else {
                assert!(got.image_gate.is_none() && got.clinical_gate.is_none());
            }
        }
    }
}

#[test]
fn cross_attention_gates_read_only_the_other_modality() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut model = FusionModel::init(small(FusionKind::CrossAttention), &mut rng).unwrap();
    randomize_biases(&mut model, &mut rng);
    let (e1, c) = random_inputs(&mut rng, 12);
    let (e2, _) = random_inputs(&mut rng, 12);
    let a = graph_forward(&model, &e1, &c);
    let b = graph_forward(&model, &e2, &c);
    // image gate depends on c only
    assert_eq!(a.image_gate, b.image_gate);
    assert_ne!(a.clinical_gate, b.clinical_gate);
}

#[test]
fn coattention_gates_read_both_modalities() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut model = FusionModel::init(small(FusionKind::CoAttention), &mut rng).unwrap();
    randomize_biases(&mut model, &mut rng);
    let (e1, c1) = random_inputs(&mut rng, 12);
    let (e2, mut c2) = random_inputs(&mut rng, 12);
    if c2 == c1 {
        c2[0] = 1.0 - c2[0];
    }
    let base = graph_forward(&model, &e1, &c1);
    let image_changed = graph_forward(&model, &e2, &c1);
    let clinical_changed = graph_forward(&model, &e1, &c2);
    for other in [&image_changed, &clinical_changed] {
        assert_ne!(base.image_gate, other.image_gate);
        assert_ne!(base.clinical_gate, other.clinical_gate);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for kind in FusionKind::ALL {
        let model = FusionModel::seeded(small(kind), 9).unwrap();
        let (e, c) = random_inputs(&mut rng, 12);
        let a = graph_forward(&model, &e, &c).logits;
        let b = graph_forward(&model, &e, &c).logits;
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(FusionModel::seeded(small(kind), 9).unwrap(), model);
    }
}
