//! Seeded synthetic datasets: class-conditional Gaussian image embeddings and
//! class-conditional categorical clinical variables.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clinical::{ClinicalBlock, ClinicalRecord, ClinicalVocabulary, NUM_BLOCKS};
use crate::data::{write_dataset, SampleRecord};
use crate::error::{Error, Result};

/// Category probabilities for each block. `None` means the block is never
/// present for this class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockDistributions {
    pub breast_density: Option<Vec<f64>>,
    pub mass_shape: Option<Vec<f64>>,
    pub mass_margins: Option<Vec<f64>>,
    pub calcification_type: Option<Vec<f64>>,
    pub calcification_distribution: Option<Vec<f64>>,
}

impl BlockDistributions {
    pub fn get(&self, block: ClinicalBlock) -> Option<&[f64]> {
        match block {
            ClinicalBlock::BreastDensity => self.breast_density.as_deref(),
            ClinicalBlock::MassShape => self.mass_shape.as_deref(),
            ClinicalBlock::MassMargins => self.mass_margins.as_deref(),
            ClinicalBlock::CalcificationType => self.calcification_type.as_deref(),
            ClinicalBlock::CalcificationDistribution => self.calcification_distribution.as_deref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClass {
    pub name: String,
    pub train_count: usize,
    pub test_count: usize,
    /// Embedding mean, length `image_dim`.
    pub mean: Vec<f64>,
    /// Isotropic standard deviation.
    pub std: f64,
    pub clinical: BlockDistributions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub image_dim: usize,
    /// Extra per-block probability of a present block going missing,
    /// ordered density, shape, margins, calcification type, distribution.
    #[serde(default)]
    pub block_missing_rate: [f64; NUM_BLOCKS],
    pub classes: Vec<SynthClass>,
}

impl SynthSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("synth spec: {e}")))?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self, vocab: &ClinicalVocabulary) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_dim == 0 {
            return fail("image_dim must be positive".into());
        }
        if self.classes.len() < 2 {
            return fail("need at least two classes".into());
        }
        for (b, &rate) in self.block_missing_rate.iter().enumerate() {
            if !(0.0..=1.0).contains(&rate) {
                return fail(format!("missing rate {rate} for {} outside [0, 1]", ClinicalBlock::ALL[b]));
            }
        }
        for class in &self.classes {
            let name = &class.name;
            if class.mean.len() != self.image_dim {
                return fail(format!("class {name}: mean has {} entries, image_dim is {}", class.mean.len(), self.image_dim));
            }
            if !(class.std > 0.0) || !class.std.is_finite() {
                return fail(format!("class {name}: std must be positive, got {}", class.std));
            }
            for block in ClinicalBlock::ALL {
                let Some(probs) = class.clinical.get(block) else { continue };
                if probs.len() != vocab.block(block).len() {
                    return fail(format!(
                        "class {name}, block {block}: {} probabilities for {} categories",
                        probs.len(),
                        vocab.block(block).len()
                    ));
                }
                let total: f64 = probs.iter().sum();
                if probs.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return fail(format!("class {name}, block {block}: probabilities must be >= 0 and sum to 1 (sum {total})"));
                }
            }
        }
        Ok(())
    }
}

fn draw_category<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn generate_split<R: Rng>(
    spec: &SynthSpec,
    vocab: &ClinicalVocabulary,
    prefix: &str,
    count: impl Fn(&SynthClass) -> usize,
    rng: &mut R,
) -> Vec<SampleRecord> {
    let mut records = Vec::new();
    for class in &spec.classes {
        let noise = Normal::new(0.0, class.std).expect("validated std");
        for _ in 0..count(class) {
            let image_embedding = class.mean.iter().map(|m| m + noise.sample(rng)).collect();
            let mut clinical = ClinicalRecord::new();
            for block in ClinicalBlock::ALL {
                let Some(probs) = class.clinical.get(block) else { continue };
                let cat = draw_category(probs, rng);
                let missing = rng.random_bool(spec.block_missing_rate[block.index()]);
                if !missing {
                    clinical.set(block, Some(vocab.block(block)[cat].clone()));
                }
            }
            records.push(SampleRecord {
                id: String::new(),
                label: class.name.clone(),
                image_embedding,
                clinical,
            });
        }
    }
    records.shuffle(rng);
    for (i, r) in records.iter_mut().enumerate() {
        r.id = format!("{prefix}-{i:05}");
    }
    records
}

/// Generates `(train, test)` record lists.
pub fn generate(spec: &SynthSpec, vocab: &ClinicalVocabulary) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    spec.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = generate_split(spec, vocab, "train", |c| c.train_count, &mut rng);
    let test = generate_split(spec, vocab, "test", |c| c.test_count, &mut rng);
    Ok((train, test))
}

/// Writes `train.csv` and `test.csv` under `out_dir` and returns their paths.
pub fn gen_synth(spec: &SynthSpec, vocab: &ClinicalVocabulary, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let (train, test) = generate(spec, vocab)?;
    let train_path = out_dir.join("train.csv");
    let test_path = out_dir.join("test.csv");
    write_dataset(&train_path, &train, spec.image_dim)?;
    write_dataset(&test_path, &test, spec.image_dim)?;
    Ok((train_path, test_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    fn tiny_spec() -> SynthSpec {
        let class = |name: &str, shift: f64| SynthClass {
            name: name.into(),
            train_count: 30,
            test_count: 10,
            mean: vec![shift; 3],
            std: 1.0,
            clinical: BlockDistributions {
                breast_density: Some(uniform(4)),
                mass_shape: Some(uniform(8)),
                ..Default::default()
            },
        };
        SynthSpec {
            seed: 42,
            image_dim: 3,
            block_missing_rate: [0.0; 5],
            classes: vec![class("a", 0.0), class("b", 2.0)],
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let vocab = ClinicalVocabulary::default();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (a_train, a_test) = gen_synth(&tiny_spec(), &vocab, d1.path()).unwrap();
        let (b_train, b_test) = gen_synth(&tiny_spec(), &vocab, d2.path()).unwrap();
        assert_eq!(std::fs::read(a_train).unwrap(), std::fs::read(b_train).unwrap());
        assert_eq!(std::fs::read(a_test).unwrap(), std::fs::read(b_test).unwrap());
    }

    #[test]
    fn full_missingness_drops_block() {
        let vocab = ClinicalVocabulary::default();
        let mut spec = tiny_spec();
        spec.block_missing_rate[ClinicalBlock::MassShape.index()] = 1.0;
        let (train, test) = generate(&spec, &vocab).unwrap();
        assert_eq!(train.len(), 60);
        assert_eq!(test.len(), 20);
        for r in train.iter().chain(&test) {
            assert!(r.clinical.get(ClinicalBlock::MassShape).is_none());
            assert!(r.clinical.get(ClinicalBlock::BreastDensity).is_some());
            assert!(r.clinical.get(ClinicalBlock::CalcificationType).is_none());
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let vocab = ClinicalVocabulary::default();
        let mut spec = tiny_spec();
        spec.classes[0].clinical.breast_density = Some(vec![0.5, 0.4, 0.0, 0.0]);
        assert!(matches!(generate(&spec, &vocab), Err(Error::Config(_))));
        let mut spec = tiny_spec();
        spec.classes[1].std = 0.0;
        assert!(generate(&spec, &vocab).is_err());
        let mut spec = tiny_spec();
        spec.classes[1].mean.pop();
        assert!(generate(&spec, &vocab).is_err());
        let mut spec = tiny_spec();
        spec.classes[0].clinical.mass_margins = Some(uniform(4));
        assert!(generate(&spec, &vocab).is_err());
    }

    #[test]
    fn category_draw_handles_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(draw_category(&[0.0, 0.0, 1.0, 0.0], &mut rng), 2);
        }
    }
}
