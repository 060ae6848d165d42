//! Block-structured one-hot encoding of the five categorical clinical
//! variables, plus whole-record masking for missing-modality training.
//!
//! Layout of the 36-wide vector, in order:
//!
//! | block                      | width | offset |
//! |----------------------------|-------|--------|
//! | breast density             | 4     | 0      |
//! | mass shape                 | 8     | 4      |
//! | mass margins               | 5     | 12     |
//! | calcification type         | 14    | 17     |
//! | calcification distribution | 5     | 31     |
//!
//! An absent variable encodes as an all-zero block.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_BLOCKS: usize = 5;
pub const BLOCK_SIZES: [usize; NUM_BLOCKS] = [4, 8, 5, 14, 5];
pub const CLINICAL_DIM: usize = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClinicalBlock {
    BreastDensity,
    MassShape,
    MassMargins,
    CalcificationType,
    CalcificationDistribution,
}

impl ClinicalBlock {
    pub const ALL: [ClinicalBlock; NUM_BLOCKS] = [
        ClinicalBlock::BreastDensity,
        ClinicalBlock::MassShape,
        ClinicalBlock::MassMargins,
        ClinicalBlock::CalcificationType,
        ClinicalBlock::CalcificationDistribution,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn size(self) -> usize {
        BLOCK_SIZES[self.index()]
    }

    pub fn offset(self) -> usize {
        BLOCK_SIZES[..self.index()].iter().sum()
    }

    pub fn key(self) -> &'static str {
        match self {
            ClinicalBlock::BreastDensity => "breast_density",
            ClinicalBlock::MassShape => "mass_shape",
            ClinicalBlock::MassMargins => "mass_margins",
            ClinicalBlock::CalcificationType => "calcification_type",
            ClinicalBlock::CalcificationDistribution => "calcification_distribution",
        }
    }
}

impl fmt::Display for ClinicalBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Ordered category names for each block. On-disk form is a JSON object with
/// one array per block key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicalVocabulary {
    pub breast_density: Vec<String>,
    pub mass_shape: Vec<String>,
    pub mass_margins: Vec<String>,
    pub calcification_type: Vec<String>,
    pub calcification_distribution: Vec<String>,
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for ClinicalVocabulary {
    /// CBIS-DDSM category names.
    fn default() -> Self {
        Self {
            breast_density: names(&[
                "entirely_fatty",
                "scattered_fibroglandular",
                "heterogeneously_dense",
                "extremely_dense",
            ]),
            mass_shape: names(&[
                "round",
                "oval",
                "irregular",
                "lobulated",
                "architectural_distortion",
                "asymmetric_breast_tissue",
                "focal_asymmetric_density",
                "lymph_node",
            ]),
            mass_margins: names(&[
                "circumscribed",
                "ill_defined",
                "spiculated",
                "microlobulated",
                "obscured",
            ]),
            calcification_type: names(&[
                "amorphous",
                "punctate",
                "vascular",
                "pleomorphic",
                "fine_linear_branching",
                "lucent_center",
                "round_and_regular",
                "coarse",
                "eggshell",
                "dystrophic",
                "milk_of_calcium",
                "skin",
                "large_rodlike",
                "lucent_centered",
            ]),
            calcification_distribution: names(&[
                "clustered",
                "linear",
                "regional",
                "diffusely_scattered",
                "segmental",
            ]),
        }
    }
}

impl ClinicalVocabulary {
    pub fn block(&self, block: ClinicalBlock) -> &[String] {
        match block {
            ClinicalBlock::BreastDensity => &self.breast_density,
            ClinicalBlock::MassShape => &self.mass_shape,
            ClinicalBlock::MassMargins => &self.mass_margins,
            ClinicalBlock::CalcificationType => &self.calcification_type,
            ClinicalBlock::CalcificationDistribution => &self.calcification_distribution,
        }
    }

    pub fn dim(&self) -> usize {
        ClinicalBlock::ALL.iter().map(|&b| self.block(b).len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for block in ClinicalBlock::ALL {
            let cats = self.block(block);
            if cats.len() != block.size() {
                return Err(Error::Config(format!(
                    "vocabulary block {block} has {} categories, expected {}",
                    cats.len(),
                    block.size()
                )));
            }
            let mut seen = HashSet::new();
            for name in cats {
                if name.is_empty() {
                    return Err(Error::Config(format!("vocabulary block {block} has an empty name")));
                }
                if !seen.insert(name.as_str()) {
                    return Err(Error::Config(format!(
                        "vocabulary block {block} repeats category {name:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn category_index(&self, block: ClinicalBlock, name: &str) -> Result<usize> {
        self.block(block)
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Vocabulary {
                block: block.key().to_string(),
                name: name.to_string(),
            })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let vocab: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("vocabulary: {e}")))?;
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// One optional category name per block.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    values: [Option<String>; NUM_BLOCKS],
}

impl ClinicalRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, block: ClinicalBlock, name: impl Into<String>) -> Self {
        self.set(block, Some(name.into()));
        self
    }

    pub fn set(&mut self, block: ClinicalBlock, name: Option<String>) {
        self.values[block.index()] = name;
    }

    pub fn get(&self, block: ClinicalBlock) -> Option<&str> {
        self.values[block.index()].as_deref()
    }

    pub fn present_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// Encoded clinical input: 36 values plus a presence flag per block.
#[derive(Clone, Debug, PartialEq)]
pub struct ClinicalVector {
    values: Vec<f64>,
    presence: [bool; NUM_BLOCKS],
}

impl ClinicalVector {
    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; CLINICAL_DIM],
            presence: [false; NUM_BLOCKS],
        }
    }

    /// Builds a vector from raw values, checking the one-hot block structure.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != CLINICAL_DIM {
            return Err(Error::dim("clinical vector", &[values.len()], &[CLINICAL_DIM]));
        }
        let mut presence = [false; NUM_BLOCKS];
        for block in ClinicalBlock::ALL {
            let slice = &values[block.offset()..block.offset() + block.size()];
            let ones = slice.iter().filter(|&&v| v == 1.0).count();
            let zeros = slice.iter().filter(|&&v| v == 0.0).count();
            match (ones, zeros) {
                (0, z) if z == slice.len() => {}
                (1, z) if z + 1 == slice.len() => presence[block.index()] = true,
                _ => {
                    return Err(Error::Contract(format!(
                        "block {block} is neither one-hot nor all-zero"
                    )))
                }
            }
        }
        Ok(Self { values, presence })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn presence(&self) -> [bool; NUM_BLOCKS] {
        self.presence
    }

    pub fn is_present(&self, block: ClinicalBlock) -> bool {
        self.presence[block.index()]
    }

    pub fn block_values(&self, block: ClinicalBlock) -> &[f64] {
        &self.values[block.offset()..block.offset() + block.size()]
    }

    pub fn is_empty(&self) -> bool {
        self.presence.iter().all(|p| !p)
    }
}

pub fn encode(record: &ClinicalRecord, vocab: &ClinicalVocabulary) -> Result<ClinicalVector> {
    let mut out = ClinicalVector::zeros();
    for block in ClinicalBlock::ALL {
        if let Some(name) = record.get(block) {
            let idx = vocab.category_index(block, name)?;
            out.values[block.offset() + idx] = 1.0;
            out.presence[block.index()] = true;
        }
    }
    Ok(out)
}

pub fn decode(vector: &ClinicalVector, vocab: &ClinicalVocabulary) -> ClinicalRecord {
    let mut record = ClinicalRecord::new();
    for block in ClinicalBlock::ALL {
        if !vector.is_present(block) {
            continue;
        }
        let hot = vector.block_values(block).iter().position(|&v| v == 1.0);
        if let Some(i) = hot {
            record.set(block, Some(vocab.block(block)[i].clone()));
        }
    }
    record
}

/// Drops the entire clinical modality when `drop` is set.
pub fn mask_clinical(vector: &ClinicalVector, drop: bool) -> ClinicalVector {
    if drop {
        ClinicalVector::zeros()
    } else {
        vector.clone()
    }
}

/// `n` independent Bernoulli(`p`) draws.
pub fn sample_drop_flags<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("mask probability must lie in [0, 1], got {p}")));
    }
    Ok((0..n).map(|_| rng.random_bool(p)).collect())
}
