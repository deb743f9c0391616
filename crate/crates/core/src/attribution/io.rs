//! Attribution files.
//!
//! ```text
//! # {"format":"pertcard-attributions","version":1,"technique":"saliency",...,"n":2,"m":3}
//! 1.5e-1,-2e0,3.25e0
//! 0e0,1e0,-7.5e-1
//! ```
//!
//! The first line is a `# ` prefixed JSON header; every following line is
//! one sample's comma-separated attributions. Values are written in
//! shortest round-trip form. Files produced elsewhere (for example
//! DeepLift runs) may omit `external`, `params`, `target` and `targets`;
//! a missing `external` means the map is external.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttributionMap, TARGET_PREDICTED_LOGIT};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub const ATTRIBUTION_FORMAT: &str = "pertcard-attributions";
const ATTRIBUTION_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    technique: String,
    #[serde(default)]
    params: serde_json::Value,
    dataset: String,
    #[serde(default = "default_target")]
    target: String,
    #[serde(default = "default_external")]
    external: bool,
    #[serde(default)]
    targets: Option<Vec<usize>>,
    n: usize,
    m: usize,
}

fn default_target() -> String {
    TARGET_PREDICTED_LOGIT.to_string()
}

fn default_external() -> bool {
    true
}

pub fn export_attributions(map: &AttributionMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_text(map)?)?;
    Ok(())
}

pub fn to_text(map: &AttributionMap) -> Result<String> {
    let header = Header {
        format: ATTRIBUTION_FORMAT.into(),
        version: ATTRIBUTION_VERSION,
        technique: map.technique.clone(),
        params: map.params.clone(),
        dataset: map.dataset.clone(),
        target: map.target.clone(),
        external: map.external,
        targets: map.targets.clone(),
        n: map.values.len(),
        m: map.values.first().map_or(0, Vec::len),
    };
    let mut out = format!("# {}\n", serde_json::to_string(&header)?);
    for row in &map.values {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:e}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses an attribution file without checking it against a dataset.
pub fn read_attributions(path: impl AsRef<Path>) -> Result<AttributionMap> {
    from_text(&fs::read_to_string(path)?)
}

pub(crate) fn from_text(text: &str) -> Result<AttributionMap> {
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| Error::Format("attribution file must start with a '# {json}' header".into()))?;
    let header: Header = serde_json::from_str(header_line)
        .map_err(|e| Error::Format(format!("attribution header: {e}")))?;
    if header.format != ATTRIBUTION_FORMAT {
        return Err(Error::Format(format!(
            "expected format {ATTRIBUTION_FORMAT:?}, found {:?}",
            header.format
        )));
    }
    if header.version != ATTRIBUTION_VERSION {
        return Err(Error::Format(format!(
            "unsupported attribution file version {}",
            header.version
        )));
    }
    let mut values = Vec::with_capacity(header.n);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(j, tok)| {
                tok.trim().parse::<f64>().map_err(|_| {
                    Error::Format(format!(
                        "attribution row {i}, position {j}: cannot parse {:?}",
                        tok.trim()
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        values.push(row);
    }
    if values.len() != header.n {
        return Err(Error::Validation(format!(
            "attribution file declares n = {} but has {} rows",
            header.n,
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|r| r.len() != header.m) {
        return Err(Error::Validation(format!(
            "attribution row {i} has {} values, header declares m = {}",
            values[i].len(),
            header.m
        )));
    }
    Ok(AttributionMap {
        technique: header.technique,
        params: header.params,
        dataset: header.dataset,
        target: header.target,
        external: header.external,
        targets: header.targets,
        values,
    })
}

/// Reads an attribution file and validates it against `ds`.
pub fn import_attributions(path: impl AsRef<Path>, ds: &Dataset) -> Result<AttributionMap> {
    let map = read_attributions(path)?;
    map.validate_against(ds)?;
    if let Some(targets) = &map.targets {
        if let Some(i) = targets.iter().position(|&t| t >= ds.num_classes) {
            return Err(Error::Validation(format!(
                "attribution target {} of sample {i} is not a class of {}",
                targets[i], ds.name
            )));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;

    fn sample_map() -> AttributionMap {
        AttributionMap {
            technique: "saliency".into(),
            params: serde_json::json!({ "abs": false }),
            dataset: "toy".into(),
            target: TARGET_PREDICTED_LOGIT.into(),
            external: false,
            targets: Some(vec![0, 1]),
            values: vec![vec![0.1, -2.0, 1e-300], vec![std::f64::consts::PI, 0.0, -0.0]],
        }
    }

    fn toy_ds() -> Dataset {
        Dataset::new("toy", Split::Train, 2, vec![vec![0.0; 3]; 2], vec![0, 1]).unwrap()
    }

    #[test]
    fn export_import_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.attr");
        let map = sample_map();
        export_attributions(&map, &path).unwrap();
        let back = import_attributions(&path, &toy_ds()).unwrap();
        assert_eq!(back, map);
        for (a, b) in back.values.iter().flatten().zip(map.values.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn external_header_defaults() {
        let text = "# {\"format\":\"pertcard-attributions\",\"version\":1,\"technique\":\"deeplift\",\"dataset\":\"toy\",\"n\":2,\"m\":3}\n1,2,3\n4,5,6\n";
        let map = from_text(text).unwrap();
        assert!(map.external);
        assert_eq!(map.technique, "deeplift");
        assert!(map.validate_against(&toy_ds()).is_ok());
    }

    #[test]
    fn row_count_mismatch_names_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.attr");
        let mut map = sample_map();
        map.values.pop();
        map.targets = None;
        export_attributions(&map, &path).unwrap();
        let err = import_attributions(&path, &toy_ds()).unwrap_err().to_string();
        assert!(err.contains("1 rows") && err.contains("n = 2"), "{err}");
    }

    #[test]
    fn nan_cell_names_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.attr");
        let mut map = sample_map();
        map.values[1][2] = f64::NAN;
        export_attributions(&map, &path).unwrap();
        let err = import_attributions(&path, &toy_ds()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("sample 1, position 2"), "{err}");
    }

    #[test]
    fn garbage_header_is_format_error() {
        assert!(matches!(from_text("1,2,3\n"), Err(Error::Format(_))));
        assert!(matches!(from_text("# {}\n"), Err(Error::Format(_))));
    }
}
