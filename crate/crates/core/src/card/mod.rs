//! Perturbation analysis cards.
//!
//! A card condenses one technique × strategy run into five sections:
//! `S` (meta information and the changed/unchanged split), `C` (class
//! changes), `D` (distances between original and perturbed series), `A`
//! (attribution skewness and mean) and `R` (mean raw series of the changed
//! and unchanged subsets). The JSON form is canonical; the SVG form is a
//! view that reads nothing but the [`CardModel`].

mod svg;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{AnalysisResult, ClassCounts, Histogram, SplitHistogram};
use crate::error::{Error, Result};
use crate::perturbation::{subsequence_length, Kind, Strategy};

pub use svg::{render_svg, STYLE};

/// Version of the card JSON layout.
pub const CARD_SCHEMA_VERSION: u32 = 1;

/// Run descriptors that the analysis result does not carry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardMeta {
    pub dataset: String,
    pub technique: String,
    pub strategy: Strategy,
    pub seed: u64,
    /// Hash of the configuration that produced the run, empty if unknown.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionS {
    pub dataset: String,
    pub technique: String,
    pub strategy: String,
    pub seed: u64,
    pub config_hash: String,
    pub n: usize,
    pub m: usize,
    pub num_classes: usize,
    pub changed: usize,
    pub unchanged: usize,
    /// `changed / n`.
    pub changed_ratio: f64,
    pub qm_original: f64,
    pub qm_perturbed: f64,
    /// Window length of subsequence strategies. Windows start `L / 2`
    /// before the selected point and are clipped to the series.
    pub window_length: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionC {
    pub per_class: Vec<ClassCounts>,
    pub change_matrix: Vec<Vec<usize>>,
    pub perturbed_count: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionD {
    pub euclidean: SplitHistogram,
    pub cosine: SplitHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionA {
    pub skewness: SplitHistogram,
    pub mean: SplitHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionR {
    pub changed: Option<Vec<f64>>,
    pub unchanged: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardModel {
    pub schema_version: u32,
    #[serde(rename = "S")]
    pub s: SectionS,
    #[serde(rename = "C")]
    pub c: SectionC,
    #[serde(rename = "D")]
    pub d: SectionD,
    #[serde(rename = "A")]
    pub a: SectionA,
    #[serde(rename = "R")]
    pub r: SectionR,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

/// Assembles a card from a finished analysis. Nothing is recomputed; the
/// result is only checked for internal consistency.
pub fn build_card(result: &AnalysisResult, meta: &CardMeta) -> Result<CardModel> {
    let n = result.n;
    let window_length = match meta.strategy.kind() {
        Kind::Point => None,
        Kind::Subsequence => Some(subsequence_length(result.m)),
    };
    let card = CardModel {
        schema_version: CARD_SCHEMA_VERSION,
        s: SectionS {
            dataset: meta.dataset.clone(),
            technique: meta.technique.clone(),
            strategy: meta.strategy.name(),
            seed: meta.seed,
            config_hash: meta.config_hash.clone(),
            n,
            m: result.m,
            num_classes: result.num_classes,
            changed: result.changed,
            unchanged: result.unchanged,
            changed_ratio: if n == 0 { 0.0 } else { result.changed as f64 / n as f64 },
            qm_original: result.qm_original,
            qm_perturbed: result.qm_perturbed,
            window_length,
        },
        c: SectionC {
            per_class: result.per_class.clone(),
            change_matrix: result.change_matrix.clone(),
            perturbed_count: result.histograms.perturbed_count.clone(),
        },
        d: SectionD {
            euclidean: result.histograms.euclidean.clone(),
            cosine: result.histograms.cosine.clone(),
        },
        a: SectionA {
            skewness: result.histograms.skewness.clone(),
            mean: result.histograms.attr_mean.clone(),
        },
        r: SectionR {
            changed: result.changed_mean_series.clone(),
            unchanged: result.unchanged_mean_series.clone(),
        },
    };
    if result.records.len() != n {
        return Err(integrity(format!(
            "result has {} records, n = {n}",
            result.records.len()
        )));
    }
    card.validate()?;
    Ok(card)
}

fn check_edges(name: &str, edges: &[f64], bins: usize) -> Result<()> {
    if edges.len() != bins + 1 || bins == 0 {
        return Err(integrity(format!(
            "{name}: {} edges for {bins} bins",
            edges.len()
        )));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] > w[1]) {
        return Err(integrity(format!("{name}: edges are not finite and ascending")));
    }
    Ok(())
}

fn check_split(name: &str, h: &SplitHistogram, changed: usize, unchanged: usize) -> Result<()> {
    check_edges(name, &h.edges, h.changed.len())?;
    if h.unchanged.len() != h.changed.len() {
        return Err(integrity(format!("{name}: changed and unchanged bins differ")));
    }
    let (c, u): (usize, usize) = (h.changed.iter().sum(), h.unchanged.iter().sum());
    if c != changed || u != unchanged {
        return Err(integrity(format!(
            "{name}: histogram holds {c}/{u} samples, expected {changed}/{unchanged}"
        )));
    }
    Ok(())
}

fn check_series(name: &str, series: &Option<Vec<f64>>, present: bool, m: usize) -> Result<()> {
    match series {
        Some(s) if !present => Err(integrity(format!("{name} series present without samples"))),
        None if present => Err(integrity(format!("{name} series missing"))),
        Some(s) if s.len() != m || s.iter().any(|v| !v.is_finite()) => Err(integrity(format!(
            "{name} series has length {}, expected m = {m}, or non-finite values",
            s.len()
        ))),
        _ => Ok(()),
    }
}

impl CardModel {
    pub fn validate(&self) -> Result<()> {
        let s = &self.s;
        if self.schema_version != CARD_SCHEMA_VERSION {
            return Err(integrity(format!(
                "card schema version {}, this library reads {CARD_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if s.changed + s.unchanged != s.n {
            return Err(integrity(format!(
                "changed {} + unchanged {} != n {}",
                s.changed, s.unchanged, s.n
            )));
        }
        for (name, v) in [
            ("changed_ratio", s.changed_ratio),
            ("qm_original", s.qm_original),
            ("qm_perturbed", s.qm_perturbed),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(integrity(format!("{name} = {v} outside [0, 1]")));
            }
        }
        let c = &self.c;
        if c.per_class.len() != s.num_classes {
            return Err(integrity(format!(
                "{} per-class entries for {} classes",
                c.per_class.len(),
                s.num_classes
            )));
        }
        if c.per_class.iter().enumerate().any(|(i, pc)| pc.class != i) {
            return Err(integrity("per-class entries are not in class order"));
        }
        let changed: usize = c.per_class.iter().map(|pc| pc.changed).sum();
        let unchanged: usize = c.per_class.iter().map(|pc| pc.unchanged).sum();
        if changed != s.changed || unchanged != s.unchanged {
            return Err(integrity(format!(
                "per-class counts sum to {changed}/{unchanged}, S holds {}/{}",
                s.changed, s.unchanged
            )));
        }
        if c.change_matrix.len() != s.num_classes
            || c.change_matrix.iter().any(|row| row.len() != s.num_classes)
        {
            return Err(integrity("change matrix is not num_classes square"));
        }
        for (from, row) in c.change_matrix.iter().enumerate() {
            if row[from] != 0 {
                return Err(integrity(format!("change matrix counts {from} -> {from}")));
            }
            if row.iter().sum::<usize>() != c.per_class[from].changed {
                return Err(integrity(format!(
                    "change matrix row {from} disagrees with per-class changed count"
                )));
            }
        }
        let pc = &c.perturbed_count;
        check_edges("perturbed_count", &pc.edges, pc.counts.len())?;
        if pc.counts.iter().sum::<usize>() != s.changed {
            return Err(integrity("perturbed_count histogram does not cover the changed samples"));
        }
        check_split("euclidean", &self.d.euclidean, s.changed, s.unchanged)?;
        check_split("cosine", &self.d.cosine, s.changed, s.unchanged)?;
        check_split("skewness", &self.a.skewness, s.changed, s.unchanged)?;
        check_split("mean", &self.a.mean, s.changed, s.unchanged)?;
        check_series("changed", &self.r.changed, s.changed > 0, s.m)?;
        check_series("unchanged", &self.r.unchanged, s.unchanged > 0, s.m)?;
        Ok(())
    }
}

/// Canonical JSON: keys sorted, floats in scientific notation with 17
/// significant digits, integers verbatim, no insignificant whitespace
/// beyond one trailing newline.
pub fn emit_json(card: &CardModel) -> String {
    let value = serde_json::to_value(card).expect("cards serialize");
    let mut out = String::new();
    write_canonical(&value, &mut out);
    out.push('\n');
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_u64() {
                out.push_str(&i.to_string());
            } else if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else {
                let f = n.as_f64().expect("numbers are u64, i64 or f64");
                out.push_str(&format!("{f:.16e}"));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
    }
}

/// Parses and validates a card document.
pub fn parse_card_json(text: &str) -> Result<CardModel> {
    let card: CardModel = serde_json::from_str(text)?;
    card.validate()?;
    Ok(card)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{aggregate, SweepRecord};
    use crate::dataset::{Dataset, Split};

    fn record(i: usize, label: usize, changed: bool) -> SweepRecord {
        SweepRecord {
            sample_index: i,
            true_label: label,
            changed,
            original_class: label,
            new_class: if changed { 1 - label } else { label },
            flip_percentile: changed.then_some(80),
            perturbed_count: if changed { 4 + i % 5 } else { 12 },
            euclidean_dist: 0.5 + i as f64 * 0.01,
            cosine_dist: 0.1 + (i % 7) as f64 * 0.02,
            cosine_degenerate: false,
            attr_skewness: (i as f64 * 0.3).sin(),
            attr_mean: (i as f64 * 0.7).cos() * 0.01,
        }
    }

    fn result(changed: impl Fn(usize) -> bool) -> AnalysisResult {
        sized_result(30, changed)
    }

    fn sized_result(n: usize, changed: impl Fn(usize) -> bool) -> AnalysisResult {
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..16).map(|t| ((i + t) as f64 * 0.2).sin()).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let ds = Dataset::new("toy", Split::Test, 2, samples, labels.clone()).unwrap();
        let records = (0..n).map(|i| record(i, labels[i], changed(i))).collect();
        aggregate(records, &ds).unwrap()
    }

    fn meta() -> CardMeta {
        CardMeta {
            dataset: "toy".into(),
            technique: "saliency".into(),
            strategy: "sub-oodlow".parse().unwrap(),
            seed: 7,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn s_counts_match_c_and_ratio() {
        let card = build_card(&result(|i| i % 3 != 0), &meta()).unwrap();
        let sum: usize = card.c.per_class.iter().map(|c| c.changed).sum();
        assert_eq!(sum, card.s.changed);
        assert_eq!(card.s.changed, 20);
        assert!((card.s.changed_ratio - 20.0 / 30.0).abs() < 1e-15);
        assert_eq!(card.s.window_length, Some(2));
    }

    #[test]
    fn json_is_canonical_and_round_trips() {
        let card = build_card(&result(|i| i % 4 == 1), &meta()).unwrap();
        let a = emit_json(&card);
        assert_eq!(a, emit_json(&card));
        let back = parse_card_json(&a).unwrap();
        assert_eq!(back, card);
        let v: Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["schema_version"], CARD_SCHEMA_VERSION);
        assert!(a.contains("\"qm_original\":1.0000000000000000e0"));
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["A", "C", "D", "R", "S", "schema_version"]);
    }

    #[test]
    fn zero_changed_is_valid() {
        let card = build_card(&result(|_| false), &meta()).unwrap();
        assert_eq!(card.s.changed, 0);
        assert!(card.r.changed.is_none());
        assert_eq!(card.c.perturbed_count.counts.iter().sum::<usize>(), 0);
    }

    #[test]
    fn inconsistent_result_is_integrity_error() {
        let mut r = result(|i| i % 2 == 0);
        r.per_class[0].changed += 1;
        assert!(matches!(build_card(&r, &meta()), Err(Error::Integrity(_))));

        let mut r = result(|i| i % 2 == 0);
        r.unchanged_mean_series.as_mut().unwrap().pop();
        assert!(matches!(build_card(&r, &meta()), Err(Error::Integrity(_))));

        let mut r = result(|i| i % 2 == 0);
        r.histograms.cosine.edges.pop();
        assert!(matches!(build_card(&r, &meta()), Err(Error::Integrity(_))));
    }

    #[test]
    fn tampered_document_is_rejected() {
        let card = build_card(&result(|i| i % 2 == 0), &meta()).unwrap();
        let text = emit_json(&card).replacen("\"changed\":15", "\"changed\":16", 1);
        assert!(parse_card_json(&text).is_err());
    }

    fn svg_doc(svg: &str) -> roxmltree::Document<'_> {
        roxmltree::Document::parse(svg).expect("well-formed svg")
    }

    #[test]
    fn ratio_of_flip_example_renders_two_decimals() {
        let r = sized_result(3601, |i| i < 2088);
        let card = build_card(&r, &meta()).unwrap();
        assert_eq!(card.s.changed, 2088);
        assert_eq!(card.s.unchanged, 1513);
        let svg = render_svg(&card);
        assert!(svg.contains("ratio 0.58"), "{svg}");
    }

    #[test]
    fn svg_sections_in_order_with_two_series() {
        let card = build_card(&result(|i| i % 3 == 0), &meta()).unwrap();
        let svg = render_svg(&card);
        assert_eq!(svg, render_svg(&card));
        let doc = svg_doc(&svg);
        let ids: Vec<&str> = doc
            .root_element()
            .children()
            .filter(|n| n.has_tag_name("g"))
            .filter_map(|n| n.attribute("id"))
            .collect();
        assert_eq!(ids, ["section-S", "section-C", "section-D", "section-A", "section-R"]);
        let polylines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
        assert_eq!(polylines.len(), 2);
        assert!(polylines
            .iter()
            .all(|p| p.ancestors().any(|a| a.attribute("id") == Some("section-R"))));
    }

    #[test]
    fn svg_labels_come_from_the_card() {
        let card = build_card(&result(|i| i % 3 == 0), &meta()).unwrap();
        let svg = render_svg(&card);
        let doc = svg_doc(&svg);
        let labels: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
        let first = card.d.euclidean.edges[0];
        let last = *card.d.euclidean.edges.last().unwrap();
        assert!(labels.contains(&first.to_string().as_str()));
        assert!(labels.contains(&last.to_string().as_str()));
        let json: Value = serde_json::from_str(&emit_json(&card)).unwrap();
        let parsed = json["D"]["euclidean"]["edges"][0].as_f64().unwrap();
        assert_eq!(parsed.to_string(), first.to_string());
    }

    #[test]
    fn zero_changed_svg_marks_empty_panels() {
        let card = build_card(&result(|_| false), &meta()).unwrap();
        let svg = render_svg(&card);
        let doc = svg_doc(&svg);
        let c = doc
            .descendants()
            .find(|n| n.attribute("id") == Some("section-C"))
            .unwrap();
        let changed_bars = c
            .descendants()
            .filter(|n| n.attribute("fill") == Some(STYLE.changed))
            .filter(|n| n.has_tag_name("rect"))
            .count();
        assert_eq!(changed_bars, 0);
        let empties = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("empty"))
            .count();
        // D, A panels, R changed series, C histogram and change list
        assert!(empties >= 7, "{empties}");
    }
}
