//! Univariate time-series classification datasets.
//!
//! Datasets are immutable once built. Raw UCR archive files are read with
//! [`load_ucr_tsv`]; the crate's own persisted form is a JSON document
//! written by [`Dataset::save`].

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PERSIST_FORMAT: &str = "pertcard-dataset";
const PERSIST_VERSION: u32 = 1;

/// Guard used by [`znormalize`] for (near-)constant series.
pub const ZNORM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::argument(format!(
                "unknown split {other:?} (expected train or test)"
            ))),
        }
    }
}

/// Inclusive range of time points known to carry the class signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevantWindow {
    pub start: usize,
    pub end: usize,
}

impl RelevantWindow {
    pub fn contains(&self, i: usize) -> bool {
        (self.start..=self.end).contains(&i)
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub num_classes: usize,
    /// Original label value of each dense class index, ascending.
    pub label_map: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Ground-truth relevant window for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant_window: Option<RelevantWindow>,
}

impl Dataset {
    /// Builds a dataset and checks shape, label and finiteness invariants.
    pub fn new(
        name: impl Into<String>,
        split: Split,
        num_classes: usize,
        samples: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            split,
            num_classes,
            label_map: (0..num_classes).map(|c| c as f64).collect(),
            samples,
            labels,
            relevant_window: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Validation("dataset has no samples".into()));
        }
        if self.samples.len() != self.labels.len() {
            return Err(Error::Validation(format!(
                "{} samples but {} labels",
                self.samples.len(),
                self.labels.len()
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Validation("dataset declares zero classes".into()));
        }
        if self.label_map.len() != self.num_classes {
            return Err(Error::Validation(format!(
                "label map has {} entries for {} classes",
                self.label_map.len(),
                self.num_classes
            )));
        }
        let m = self.samples[0].len();
        if m == 0 {
            return Err(Error::Validation("series length must be at least 1".into()));
        }
        for (i, (s, &l)) in self.samples.iter().zip(&self.labels).enumerate() {
            if s.len() != m {
                return Err(Error::Validation(format!(
                    "sample {i} has length {}, expected {m}",
                    s.len()
                )));
            }
            if let Some(j) = s.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "sample {i} has a non-finite value at position {j}"
                )));
            }
            if l >= self.num_classes {
                return Err(Error::Validation(format!(
                    "sample {i} has label {l}, but there are only {} classes",
                    self.num_classes
                )));
            }
        }
        if let Some(w) = self.relevant_window {
            if w.start > w.end || w.end >= m {
                return Err(Error::Validation(format!(
                    "relevant window {}..={} out of range for length {m}",
                    w.start, w.end
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn series_length(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    /// Same metadata, new values. Used for perturbed copies.
    pub fn with_samples(&self, samples: Vec<Vec<f64>>) -> Result<Self> {
        let ds = Dataset {
            samples,
            ..self.clone()
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PersistedDataset {
            format: PERSIST_FORMAT.into(),
            version: PERSIST_VERSION,
            dataset: self.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PersistedDataset = serde_json::from_str(text)?;
        if doc.format != PERSIST_FORMAT {
            return Err(Error::Format(format!(
                "expected format {PERSIST_FORMAT:?}, found {:?}",
                doc.format
            )));
        }
        if doc.version != PERSIST_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {}",
                doc.version
            )));
        }
        doc.dataset.validate()?;
        Ok(doc.dataset)
    }
}

#[derive(Serialize, Deserialize)]
struct PersistedDataset {
    format: String,
    version: u32,
    #[serde(flatten)]
    dataset: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub global_min: f64,
    pub global_max: f64,
    pub global_mean: f64,
    pub per_sample_means: Vec<f64>,
}

impl DatasetStats {
    pub fn range(&self) -> f64 {
        self.global_max - self.global_min
    }
}

/// Reads a UCR archive file: one record per line, the class label first,
/// then the series values. Tab or comma delimited, detected from the first
/// record. Labels are remapped to `0..C` in ascending order of their
/// original value.
pub fn load_ucr_tsv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .map(|s| {
            s.trim_end_matches("_TRAIN")
                .trim_end_matches("_TEST")
                .to_string()
        })
        .unwrap_or_else(|| "dataset".into());
    let split = match path.file_stem().and_then(|s| s.to_str()) {
        Some(s) if s.ends_with("_TEST") => Split::Test,
        _ => Split::Train,
    };
    parse_ucr(&text, path, name, split)
}

pub(crate) fn parse_ucr(text: &str, path: &Path, name: String, split: Split) -> Result<Dataset> {
    let mut delimiter = None;
    let mut raw_labels = Vec::new();
    let mut samples: Vec<Vec<f64>> = Vec::new();
    let mut width = None;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let delim = *delimiter.get_or_insert(if line.contains('\t') { '\t' } else { ',' });
        let mut fields = Vec::new();
        for token in line.split(delim) {
            let token = token.trim();
            let v: f64 = token.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                token: token.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    token: token.to_string(),
                });
            }
            fields.push(v);
        }
        let expected = *width.get_or_insert(fields.len());
        if fields.len() != expected || fields.len() < 2 {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                line: lineno,
                expected: expected.saturating_sub(1).max(1),
                found: fields.len().saturating_sub(1),
            });
        }
        raw_labels.push(fields[0]);
        samples.push(fields[1..].to_vec());
    }

    if samples.is_empty() {
        return Err(Error::EmptyInput {
            path: path.to_path_buf(),
        });
    }

    let mut label_map = raw_labels.clone();
    label_map.sort_by(f64::total_cmp);
    label_map.dedup();
    let labels = raw_labels
        .iter()
        .map(|l| {
            label_map
                .binary_search_by(|probe| probe.total_cmp(l))
                .expect("label present in its own map")
        })
        .collect();

    let ds = Dataset {
        name,
        split,
        num_classes: label_map.len(),
        label_map,
        samples,
        labels,
        relevant_window: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Per-sample z-normalization with population standard deviation.
pub fn znormalize(ds: &Dataset) -> Dataset {
    let samples = ds.samples.iter().map(|s| znormalize_series(s)).collect();
    Dataset {
        samples,
        ..ds.clone()
    }
}

pub fn znormalize_series(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ZNORM_EPSILON {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let mut global_min = f64::INFINITY;
    let mut global_max = f64::NEG_INFINITY;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut per_sample_means = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let mut sum = 0.0;
        for &v in s {
            global_min = global_min.min(v);
            global_max = global_max.max(v);
            sum += v;
        }
        total += sum;
        count += s.len();
        per_sample_means.push(sum / s.len() as f64);
    }
    // Rounding can push the mean a hair outside [min, max] for constant data.
    let global_mean = (total / count as f64).clamp(global_min, global_max);
    DatasetStats {
        global_min,
        global_max,
        global_mean,
        per_sample_means,
    }
}

pub const SPIKE_AMPLITUDE: f64 = 2.0;
pub const SPIKE_NOISE_SIGMA: f64 = 0.1;

/// Binary benchmark with a known relevant window.
///
/// Every sample is gaussian noise (σ = 0.1). Class 1 carries an upward spike
/// of height 2.0 over positions `m/4 ..= m/4 + m/20`; class 0 carries the
/// same spike pointing down. Classes alternate so the split is balanced.
pub fn synthetic_spike_dataset(n: usize, m: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::argument(format!("need at least 2 samples, got {n}")));
    }
    if m < 8 {
        return Err(Error::argument(format!("need length at least 8, got {m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SPIKE_NOISE_SIGMA).expect("valid sigma");
    let window = RelevantWindow {
        start: m / 4,
        end: m / 4 + m / 20,
    };

    // Shuffle the class order so labels are not trivially periodic.
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }

    let samples = labels
        .iter()
        .map(|&label| {
            let sign = if label == 1 { 1.0 } else { -1.0 };
            (0..m)
                .map(|t| {
                    let base = noise.sample(&mut rng);
                    if window.contains(t) {
                        base + sign * SPIKE_AMPLITUDE
                    } else {
                        base
                    }
                })
                .collect()
        })
        .collect();

    let ds = Dataset {
        name: "synthetic-spike".into(),
        split: Split::Train,
        num_classes: 2,
        label_map: vec![0.0, 1.0],
        samples,
        labels,
        relevant_window: Some(window),
    };
    ds.validate()?;
    Ok(ds)
}
