//! Finite-difference check of a whole fusion model on random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clinical::{ClinicalBlock, CLINICAL_DIM};
use crate::error::Result;
use crate::fusion::{forward, FusionKind, FusionModel, FusionVariant, ModelNodes};
use crate::tensor::{gradient_check, GradCheckReport, ParamValue, TensorId};

/// Reduced architecture used for gradient checks.
pub fn reduced_variant(kind: FusionKind) -> FusionVariant {
    FusionVariant {
        kind,
        image_dim: 32,
        proj_dim: 8,
        hidden_dim: 16,
        num_classes: 4,
        ..FusionVariant::default()
    }
}

fn random_clinical<R: Rng>(rng: &mut R) -> Vec<f64> {
    let mut c = vec![0.0; CLINICAL_DIM];
    for block in ClinicalBlock::ALL {
        if rng.random_bool(0.6) {
            c[block.offset() + rng.random_range(0..block.size())] = 1.0;
        }
    }
    c
}

/// Mean cross-entropy of a random two-sample batch, checked against central
/// differences over every parameter entry.
pub fn check_model_gradients(variant: &FusionVariant, seed: u64, epsilon: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FusionModel::init(*variant, &mut rng)?;
    // nonzero biases so gates and relus are exercised away from their init point
    for (name, values) in model.parameters_mut() {
        if name.ends_with(".bias") {
            values.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
    }
    let batch: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..2)
        .map(|_| {
            let e = (0..variant.image_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            (e, random_clinical(&mut rng), rng.random_range(0..variant.num_classes))
        })
        .collect();
    let params: Vec<ParamValue> = model
        .parameters()
        .iter()
        .map(|p| {
            let shape: &[usize] = if p.name.ends_with(".bias") { &p.shape[1..] } else { &p.shape };
            ParamValue::new(shape, p.values.to_vec())
        })
        .collect();

    let v = *variant;
    gradient_check(
        move |graph, ids: &[TensorId]| {
            let nodes = ModelNodes::from_leaf_ids(v, ids)?;
            let mut total = None;
            for (e, c, label) in &batch {
                let e = graph.vector(e.clone());
                let c = graph.vector(c.clone());
                let trace = forward(graph, &nodes, e, c)?;
                let loss = graph.softmax_cross_entropy(trace.logits, *label)?;
                total = Some(match total {
                    Some(t) => graph.add(t, loss)?,
                    None => loss,
                });
            }
            Ok(graph.scale(total.expect("non-empty batch"), 0.5))
        },
        &params,
        epsilon,
    )
}
