//! Delimiter-separated dataset files.
//!
//! Header, in order:
//!
//! ```text
//! id,label,breast_density,mass_shape,mass_margins,calcification_type,calcification_distribution,e0,e1,...,e{D-1}
//! ```
//!
//! An empty clinical cell means the variable is missing. Cells holding
//! several categories joined by `|` are multi-label and rejected.

use std::path::Path;

use crate::clinical::{encode, ClinicalBlock, ClinicalRecord, ClinicalVector, ClinicalVocabulary};
use crate::error::{Error, Result};
use crate::persist::write_atomic;

pub const FIXED_COLUMNS: [&str; 7] = [
    "id",
    "label",
    "breast_density",
    "mass_shape",
    "mass_margins",
    "calcification_type",
    "calcification_distribution",
];

/// One row as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub label: String,
    pub image_embedding: Vec<f64>,
    pub clinical: ClinicalRecord,
}

/// Encoded, model-ready sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub image: Vec<f64>,
    pub clinical: ClinicalVector,
}

/// Schema a dataset file is validated against.
#[derive(Clone, Copy, Debug)]
pub struct DatasetSchema<'a> {
    pub vocab: &'a ClinicalVocabulary,
    pub class_names: &'a [String],
    pub image_dim: usize,
}

impl DatasetSchema<'_> {
    pub fn header(&self) -> Vec<String> {
        header(self.image_dim)
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == label)
    }

    pub fn encode(&self, record: &SampleRecord) -> Result<Sample> {
        let label = self.class_index(&record.label).ok_or_else(|| {
            Error::Config(format!("label {:?} is not one of {:?}", record.label, self.class_names))
        })?;
        if record.image_embedding.len() != self.image_dim {
            return Err(Error::dim(
                "image embedding",
                &[record.image_embedding.len()],
                &[self.image_dim],
            ));
        }
        Ok(Sample {
            id: record.id.clone(),
            label,
            image: record.image_embedding.clone(),
            clinical: encode(&record.clinical, self.vocab)?,
        })
    }

    pub fn encode_all(&self, records: &[SampleRecord]) -> Result<Vec<Sample>> {
        records.iter().map(|r| self.encode(r)).collect()
    }
}

pub fn header(image_dim: usize) -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..image_dim).map(|i| format!("e{i}")))
        .collect()
}

/// Reads and validates every row; any bad row fails the whole load with its line number.
pub fn load_dataset(path: &Path, schema: &DatasetSchema<'_>) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let at_line = |line: u64, source: Error| Error::AtLine {
        path: path.to_path_buf(),
        line,
        source: Box::new(source),
    };

    let found = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let expected = schema.header();
    if found.iter().ne(expected.iter().map(String::as_str)) {
        if found.len() != expected.len() && found.iter().take(7).eq(FIXED_COLUMNS) {
            return Err(at_line(
                1,
                Error::dim("header embedding columns", &[found.len() - 7], &[schema.image_dim]),
            ));
        }
        return Err(parse_err(
            1,
            format!("header does not match schema (expected {} columns: id,label,<5 clinical>,e0..)", expected.len()),
        ));
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() < FIXED_COLUMNS.len() {
            return Err(parse_err(line, format!("expected at least {} fields, found {}", FIXED_COLUMNS.len(), row.len())));
        }
        if row.len() != expected.len() {
            return Err(at_line(
                line,
                Error::dim("image embedding", &[row.len() - FIXED_COLUMNS.len()], &[schema.image_dim]),
            ));
        }
        let id = row[0].to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty id".into()));
        }
        let label = row[1].to_string();
        if schema.class_index(&label).is_none() {
            return Err(parse_err(line, format!("unknown label {label:?}")));
        }
        let mut clinical = ClinicalRecord::new();
        for (i, block) in ClinicalBlock::ALL.into_iter().enumerate() {
            let cell = row[2 + i].trim();
            if cell.is_empty() {
                continue;
            }
            if cell.contains('|') {
                return Err(parse_err(line, format!("multi-label value {cell:?} in {block}")));
            }
            schema
                .vocab
                .category_index(block, cell)
                .map_err(|e| at_line(line, e))?;
            clinical.set(block, Some(cell.to_string()));
        }
        let image_embedding = row
            .iter()
            .skip(FIXED_COLUMNS.len())
            .enumerate()
            .map(|(i, cell)| {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line, format!("column e{i}: {cell:?} is not a number")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(line, format!("column e{i}: non-finite value")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        records.push(SampleRecord {
            id,
            label,
            image_embedding,
            clinical,
        });
    }
    Ok(records)
}

/// Serializes records in the format [`load_dataset`] reads.
pub fn dataset_to_string(records: &[SampleRecord], image_dim: usize) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::Persistence(format!("dataset encoding: {e}"));
    writer.write_record(header(image_dim)).map_err(io_err)?;
    for r in records {
        if r.image_embedding.len() != image_dim {
            return Err(Error::dim("image embedding", &[r.image_embedding.len()], &[image_dim]));
        }
        let mut row: Vec<String> = vec![r.id.clone(), r.label.clone()];
        row.extend(
            ClinicalBlock::ALL
                .iter()
                .map(|&b| r.clinical.get(b).unwrap_or("").to_string()),
        );
        row.extend(r.image_embedding.iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(io_err)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Persistence(format!("dataset encoding: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_dataset(path: &Path, records: &[SampleRecord], image_dim: usize) -> Result<()> {
    write_atomic(path, dataset_to_string(records, image_dim)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> Vec<String> {
        ["benign_mass", "malignant_mass", "benign_calcification", "malignant_calcification"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let path = dir.join("data.csv");
        std::fs::write(&path, text).unwrap();
        path
    }

    fn head(dim: usize) -> String {
        header(dim).join(",")
    }

    #[test]
    fn one_mass_row() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = ClinicalVocabulary::default();
        let names = classes();
        let schema = DatasetSchema { vocab: &vocab, class_names: &names, image_dim: 3 };
        let text = format!("{}\nm1,malignant_mass,extremely_dense,irregular,spiculated,,,0.5,-1,2e-3\n", head(3));
        let records = load_dataset(&write(dir.path(), &text), &schema).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.image_embedding, vec![0.5, -1.0, 0.002]);
        assert_eq!(r.clinical.get(ClinicalBlock::MassShape), Some("irregular"));
        assert_eq!(r.clinical.get(ClinicalBlock::CalcificationType), None);
        let sample = schema.encode(r).unwrap();
        assert_eq!(sample.label, 1);
        assert_eq!(sample.clinical.presence(), [true, true, true, false, false]);
    }

    #[test]
    fn empty_cells_are_absent() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = ClinicalVocabulary::default();
        let names = classes();
        let schema = DatasetSchema { vocab: &vocab, class_names: &names, image_dim: 2 };
        let text = format!("{}\nx,benign_mass,,,,,,1,2\n", head(2));
        let records = load_dataset(&write(dir.path(), &text), &schema).unwrap();
        let sample = schema.encode(&records[0]).unwrap();
        assert_eq!(sample.clinical.presence(), [false; 5]);
    }

    #[test]
    fn short_embedding_is_dimension_error_at_line() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = ClinicalVocabulary::default();
        let names = classes();
        let schema = DatasetSchema { vocab: &vocab, class_names: &names, image_dim: 2048 };
        let good: Vec<String> = (0..2048).map(|_| "0.1".to_string()).collect();
        let bad: Vec<String> = (0..2047).map(|_| "0.1".to_string()).collect();
        let text = format!(
            "{}\na,benign_mass,,,,,,{}\nb,benign_mass,,,,,,{}\n",
            head(2048),
            good.join(","),
            bad.join(",")
        );
        let err = load_dataset(&write(dir.path(), &text), &schema).unwrap_err();
        match &err {
            Error::AtLine { line, source, .. } => {
                assert_eq!(*line, 3);
                assert!(matches!(**source, Error::Dimension { .. }));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_rows_fail_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = ClinicalVocabulary::default();
        let names = classes();
        let schema = DatasetSchema { vocab: &vocab, class_names: &names, image_dim: 1 };
        let cases = [
            ("a,benign_mass,,,,,,1\nb,benign_mass,,blob,,,,1\n", 3, "vocab"),
            ("a,benign_mass,,,,,,abc\n", 2, "parse"),
            ("a,nodule,,,,,,1\n", 2, "parse"),
            ("a,benign_mass,,round|oval,,,,1\n", 2, "parse"),
        ];
        for (body, want_line, kind) in cases {
            let text = format!("{}\n{}", head(1), body);
            let err = load_dataset(&write(dir.path(), &text), &schema).unwrap_err();
            match (&err, kind) {
                (Error::AtLine { line, source, .. }, "vocab") => {
                    assert_eq!(*line, want_line);
                    assert!(matches!(**source, Error::Vocabulary { .. }));
                }
                (Error::Parse { line, .. }, "parse") => assert_eq!(*line, want_line, "{err}"),
                _ => panic!("unexpected {err}"),
            }
        }
        let text = "id,label\n";
        assert!(matches!(
            load_dataset(&write(dir.path(), text), &schema),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn write_then_load_preserves_rows() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = ClinicalVocabulary::default();
        let names = classes();
        let schema = DatasetSchema { vocab: &vocab, class_names: &names, image_dim: 2 };
        let records = vec![
            SampleRecord {
                id: "r1".into(),
                label: "benign_calcification".into(),
                image_embedding: vec![0.1 + 0.2, -1e-300],
                clinical: ClinicalRecord::new().with(ClinicalBlock::CalcificationType, "punctate"),
            },
            SampleRecord {
                id: "r2".into(),
                label: "malignant_mass".into(),
                image_embedding: vec![f64::MAX, 3.0],
                clinical: ClinicalRecord::new(),
            },
        ];
        let path = dir.path().join("out.csv");
        write_dataset(&path, &records, 2).unwrap();
        assert_eq!(load_dataset(&path, &schema).unwrap(), records);
    }
}
