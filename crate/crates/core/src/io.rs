//! Dataset files.
//!
//! Features: `b"IKN1"`, `n: u32`, `d: u32`, then `n * d` `f32` values,
//! row-major. Labels: `b"IKL1"`, `n: u32`, `c: u32`, then `n` `u32` class
//! indices. All integers and floats are little-endian.
//!
//! CSV alternates carry one row per line with no header: `d` comma-separated
//! floats for features, a single class index for labels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::ExampleStore;
use crate::error::{Error, Result};
use crate::model::{l2_normalize, EngineConfig, FeatureVector, LabeledExample};

pub const FEATURE_MAGIC: [u8; 4] = *b"IKN1";
pub const LABEL_MAGIC: [u8; 4] = *b"IKL1";
const HEADER_LEN: u64 = 12;

/// Raw (unnormalized) feature rows as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::param(
                "values",
                format!("expected {} values for {rows}x{dim}, got {}", rows * dim, values.len()),
            ));
        }
        Ok(FeatureMatrix { rows, dim, values })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn from_vectors<'a>(rows: impl IntoIterator<Item = &'a FeatureVector>) -> Result<Self> {
        let mut values = Vec::new();
        let mut n = 0;
        let mut dim = None;
        for v in rows {
            match dim {
                None => dim = Some(v.dim()),
                Some(d) if d != v.dim() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        actual: v.dim(),
                    })
                }
                _ => {}
            }
            values.extend(v.as_slice().iter().map(|&x| x as f32));
            n += 1;
        }
        FeatureMatrix::new(n, dim.unwrap_or(0), values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN as usize + 4 * self.values.len());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (n, d) = read_header(bytes, FEATURE_MAGIC)?;
        let expected = n as u64 * d as u64 * 4;
        check_payload(bytes, expected)?;
        let values = bytes[HEADER_LEN as usize..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(FeatureMatrix {
            rows: n as usize,
            dim: d as usize,
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    pub classes: u32,
    pub labels: Vec<u32>,
}

impl LabelVector {
    /// Checks every label against `classes`.
    pub fn new(classes: u32, labels: Vec<u32>) -> Result<Self> {
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange { row, label, classes });
            }
        }
        Ok(LabelVector { classes, labels })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN as usize + 4 * self.labels.len());
        out.extend_from_slice(&LABEL_MAGIC);
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.classes.to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (n, c) = read_header(bytes, LABEL_MAGIC)?;
        check_payload(bytes, n as u64 * 4)?;
        let labels = bytes[HEADER_LEN as usize..]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        LabelVector::new(c, labels)
    }
}

fn read_header(bytes: &[u8], magic: [u8; 4]) -> Result<(u32, u32)> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::SizeMismatch {
            offset: 0,
            expected: HEADER_LEN,
            actual: bytes.len() as u64,
        });
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    let n = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let m = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    Ok((n, m))
}

fn check_payload(bytes: &[u8], expected: u64) -> Result<()> {
    let actual = bytes.len() as u64 - HEADER_LEN;
    if actual != expected {
        return Err(Error::SizeMismatch {
            offset: HEADER_LEN,
            expected,
            actual,
        });
    }
    Ok(())
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    if is_csv(path) {
        return read_features_csv(path);
    }
    FeatureMatrix::from_bytes(&fs::read(path)?)
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    if is_csv(path) {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for i in 0..m.rows {
            w.write_record(m.row(i).iter().map(|x| x.to_string()))?;
        }
        w.flush()?;
        return Ok(());
    }
    fs::File::create(path)?.write_all(&m.to_bytes())?;
    Ok(())
}

fn read_features_csv(path: &Path) -> Result<FeatureMatrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut values = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        match dim {
            None => dim = Some(rec.len()),
            Some(d) if d != rec.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: rec.len(),
                })
            }
            _ => {}
        }
        for field in rec.iter() {
            let v: f32 = field.trim().parse().map_err(|_| {
                Error::param("features", format!("row {row}: cannot parse {field:?} as a float"))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    FeatureMatrix::new(rows, dim.unwrap_or(0), values)
}

/// Reads labels. CSV files carry no class count; `classes` supplies it, or
/// it defaults to `max label + 1`.
pub fn read_labels(path: &Path, classes: Option<u32>) -> Result<LabelVector> {
    if !is_csv(path) {
        let lv = LabelVector::from_bytes(&fs::read(path)?)?;
        if let Some(c) = classes {
            return LabelVector::new(c, lv.labels);
        }
        return Ok(lv);
    }
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut labels = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = rec.get(0).unwrap_or("");
        let v: u32 = field.trim().parse().map_err(|_| {
            Error::param("labels", format!("row {row}: cannot parse {field:?} as a class index"))
        })?;
        labels.push(v);
    }
    let c = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    LabelVector::new(c, labels)
}

pub fn write_labels(path: &Path, l: &LabelVector) -> Result<()> {
    if is_csv(path) {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for v in &l.labels {
            w.write_record([v.to_string()])?;
        }
        w.flush()?;
        return Ok(());
    }
    fs::File::create(path)?.write_all(&l.to_bytes())?;
    Ok(())
}

/// A feature file plus a label file. Files ending in `.csv` use the CSV
/// encoding, anything else the binary one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub features: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub classes: Option<u32>,
}

/// Normalized, labeled rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: u32,
    pub examples: Vec<(FeatureVector, u32)>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.examples.first().map_or(0, |(f, _)| f.dim())
    }

    pub fn private_examples(&self) -> impl Iterator<Item = LabeledExample> + '_ {
        self.examples
            .iter()
            .map(|(f, l)| LabeledExample::private(f.clone(), *l))
    }
}

/// Reads and L2-normalizes a dataset.
pub fn read_dataset(files: &DatasetFiles) -> Result<Dataset> {
    let m = read_features(&files.features)?;
    let l = read_labels(&files.labels, files.classes)?;
    if l.labels.len() != m.rows {
        return Err(Error::SizeMismatch {
            offset: 4,
            expected: m.rows as u64,
            actual: l.labels.len() as u64,
        });
    }
    let mut examples = Vec::with_capacity(m.rows);
    for (i, &label) in l.labels.iter().enumerate() {
        let row: Vec<f64> = m.row(i).iter().map(|&x| x as f64).collect();
        examples.push((l2_normalize(&row, i)?, label));
    }
    Ok(Dataset {
        classes: l.classes,
        examples,
    })
}

/// Loads a dataset into a fresh store.
pub fn load_dataset(files: &DatasetFiles, config: EngineConfig) -> Result<ExampleStore> {
    let ds = read_dataset(files)?;
    ExampleStore::from_examples(config, ds.classes as usize, ds.private_examples())
}

/// Writes `(feature, label)` rows to a feature/label file pair.
pub fn write_dataset(files: &DatasetFiles, classes: u32, rows: &[(FeatureVector, u32)]) -> Result<()> {
    let m = FeatureMatrix::from_vectors(rows.iter().map(|(f, _)| f))?;
    let l = LabelVector::new(classes, rows.iter().map(|(_, l)| *l).collect())?;
    write_features(&files.features, &m)?;
    write_labels(&files.labels, &l)
}
