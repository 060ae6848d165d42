use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clinical::ClinicalVocabulary;
use crate::data::{load_dataset, DatasetSchema, Sample};
use crate::error::{Error, Result};
use crate::fusion::FusionVariant;
use crate::trainer::TrainConfig;

pub fn default_class_names() -> Vec<String> {
    [
        "benign_mass",
        "malignant_mass",
        "benign_calcification",
        "malignant_calcification",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Experiment description read from JSON. Relative paths resolve against the
/// directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train_data: PathBuf,
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    /// Vocabulary JSON; the built-in vocabulary when absent.
    #[serde(default)]
    pub vocabulary: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_class_names")]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub model: FusionVariant,
    #[serde(default)]
    pub training: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut config.train_data);
        resolve(&mut config.output_dir);
        if let Some(p) = config.test_data.as_mut() {
            resolve(p);
        }
        if let Some(p) = config.vocabulary.as_mut() {
            resolve(p);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        if self.class_names.len() != self.model.num_classes {
            return Err(Error::Config(format!(
                "{} class names but model.num_classes = {}",
                self.class_names.len(),
                self.model.num_classes
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.class_names.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::Config(format!("duplicate class name {dup:?}")));
        }
        let files = std::iter::once(&self.train_data)
            .chain(self.test_data.as_ref())
            .chain(self.vocabulary.as_ref());
        for f in files {
            if !f.is_file() {
                return Err(Error::Config(format!("referenced file {} does not exist", f.display())));
            }
        }
        Ok(())
    }

    pub fn load_vocabulary(&self) -> Result<ClinicalVocabulary> {
        match &self.vocabulary {
            Some(p) => ClinicalVocabulary::load(p),
            None => Ok(ClinicalVocabulary::default()),
        }
    }

    /// Loads and encodes a dataset file against this config's schema.
    pub fn load_samples(&self, path: &Path, vocab: &ClinicalVocabulary) -> Result<Vec<Sample>> {
        let schema = DatasetSchema {
            vocab,
            class_names: &self.class_names,
            image_dim: self.model.image_dim,
        };
        let records = load_dataset(path, &schema)?;
        schema.encode_all(&records)
    }
}
