//! Attribution-driven perturbation strategies.
//!
//! A strategy replaces the time points whose attribution lies strictly
//! above a per-sample percentile threshold. Point strategies touch only
//! those positions; subsequence strategies grow each selected position into
//! a window of 10% of the series length first.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{sample_seed, AttributionMap};
use crate::dataset::{Dataset, DatasetStats};
use crate::error::{Error, Result};

/// Subsequence window length as a fraction of the series length.
pub const WINDOW_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Point,
    Subsequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Zero,
    SampleMean,
    SubsequenceMean,
    Inverse,
    DatasetMean,
    DatasetMax,
    DatasetMin,
    OodHigh,
    OodLow,
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Strategy {
    kind: Kind,
    fill: Fill,
}

const POINT_FILLS: [(Fill, &str); 9] = [
    (Fill::Zero, "zero"),
    (Fill::SampleMean, "mean"),
    (Fill::Inverse, "inverse"),
    (Fill::DatasetMean, "dsmean"),
    (Fill::DatasetMax, "dsmax"),
    (Fill::DatasetMin, "dsmin"),
    (Fill::OodHigh, "oodhigh"),
    (Fill::OodLow, "oodlow"),
    (Fill::UniformRandom, "random"),
];

const SUBSEQUENCE_FILLS: [(Fill, &str); 7] = [
    (Fill::Zero, "zero"),
    (Fill::SubsequenceMean, "mean"),
    (Fill::DatasetMean, "dsmean"),
    (Fill::Inverse, "inverse"),
    (Fill::OodHigh, "oodhigh"),
    (Fill::OodLow, "oodlow"),
    (Fill::UniformRandom, "random"),
];

impl Strategy {
    /// Only the 16 legal combinations are accepted.
    pub fn new(kind: Kind, fill: Fill) -> Result<Self> {
        let legal = match kind {
            Kind::Point => POINT_FILLS.iter().any(|(f, _)| *f == fill),
            Kind::Subsequence => SUBSEQUENCE_FILLS.iter().any(|(f, _)| *f == fill),
        };
        if !legal {
            return Err(Error::argument(format!("{fill:?} is not a {kind:?} strategy")));
        }
        Ok(Strategy { kind, fill })
    }

    pub fn all() -> Vec<Strategy> {
        POINT_FILLS
            .iter()
            .map(|(f, _)| Strategy {
                kind: Kind::Point,
                fill: *f,
            })
            .chain(SUBSEQUENCE_FILLS.iter().map(|(f, _)| Strategy {
                kind: Kind::Subsequence,
                fill: *f,
            }))
            .collect()
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn fill(&self) -> Fill {
        self.fill
    }

    /// Stable identifier such as `point-zero` or `sub-oodlow`.
    pub fn name(&self) -> String {
        let (prefix, table): (&str, &[(Fill, &str)]) = match self.kind {
            Kind::Point => ("point", &POINT_FILLS),
            Kind::Subsequence => ("sub", &SUBSEQUENCE_FILLS),
        };
        let suffix = table
            .iter()
            .find(|(f, _)| *f == self.fill)
            .map(|(_, s)| *s)
            .expect("constructed strategies are legal");
        format!("{prefix}-{suffix}")
    }

    pub fn valid_names() -> Vec<String> {
        Strategy::all().iter().map(Strategy::name).collect()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::all()
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::argument(format!(
                    "unknown strategy {s:?}; valid names: {}",
                    Strategy::valid_names().join(", ")
                ))
            })
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.name()
    }
}

/// Attribution percentile in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ThresholdSpec(f64);

impl ThresholdSpec {
    pub fn new(percentile: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&percentile) {
            return Err(Error::argument(format!(
                "percentile {percentile} outside [0, 100]"
            )));
        }
        Ok(ThresholdSpec(percentile))
    }

    pub fn percentile(&self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedInstance {
    pub values: Vec<f64>,
    /// Sorted positions that were replaced.
    pub mask: Vec<usize>,
    pub strategy: Strategy,
    /// Attribution threshold, when the mask came from one.
    pub threshold: Option<f64>,
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Positions whose attribution is strictly above the sample's own
/// `spec`-percentile. Returns the threshold and the ascending positions.
pub fn threshold_mask(attr: &[f64], spec: ThresholdSpec) -> (f64, Vec<usize>) {
    let t = percentile(attr, spec.percentile());
    let mask = attr
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > t)
        .map(|(i, _)| i)
        .collect();
    (t, mask)
}

pub fn subsequence_length(m: usize) -> usize {
    ((WINDOW_FRACTION * m as f64).round() as usize).max(1)
}

/// Window of length `len` around `center`, starting `len / 2` to the left
/// (so even lengths lean left) and clipped to `0..m`.
pub fn window_around(center: usize, len: usize, m: usize) -> std::ops::Range<usize> {
    let start = center as isize - (len / 2) as isize;
    let end = start + len as isize;
    (start.max(0) as usize)..(end.min(m as isize) as usize)
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Distance from the global extremes used by the OOD fills.
pub fn ood_offset(stats: &DatasetStats) -> f64 {
    let range = stats.range();
    if range > 0.0 {
        range
    } else {
        1.0
    }
}

pub fn ood_high(stats: &DatasetStats) -> f64 {
    stats.global_max + ood_offset(stats)
}

pub fn ood_low(stats: &DatasetStats) -> f64 {
    stats.global_min - ood_offset(stats)
}

/// Value written at position `i` for fills that do not depend on a window.
fn point_value<R: Rng>(fill: Fill, ts: &[f64], i: usize, sample: (f64, f64, f64), stats: &DatasetStats, rng: &mut R) -> f64 {
    let (mean, lo, hi) = sample;
    match fill {
        Fill::Zero => 0.0,
        Fill::SampleMean => mean,
        Fill::Inverse => (hi + lo) - ts[i],
        Fill::DatasetMean => stats.global_mean,
        Fill::DatasetMax => stats.global_max,
        Fill::DatasetMin => stats.global_min,
        Fill::OodHigh => ood_high(stats),
        Fill::OodLow => ood_low(stats),
        Fill::UniformRandom => rng.random_range(stats.global_min..=stats.global_max),
        Fill::SubsequenceMean => unreachable!("window fill handled by apply_subsequence"),
    }
}

fn sample_summary(ts: &[f64]) -> (f64, f64, f64) {
    let (lo, hi) = min_max(ts);
    (ts.iter().sum::<f64>() / ts.len() as f64, lo, hi)
}

pub fn apply_point<R: Rng>(
    ts: &[f64],
    mask: &[usize],
    strategy: Strategy,
    stats: &DatasetStats,
    rng: &mut R,
) -> PerturbedInstance {
    debug_assert_eq!(strategy.kind, Kind::Point);
    let summary = sample_summary(ts);
    let mut values = ts.to_vec();
    let mut mask = mask.to_vec();
    mask.sort_unstable();
    mask.dedup();
    for &i in &mask {
        values[i] = point_value(strategy.fill, ts, i, summary, stats, rng);
    }
    PerturbedInstance {
        values,
        mask,
        strategy,
        threshold: None,
    }
}

pub fn apply_subsequence<R: Rng>(
    ts: &[f64],
    mask: &[usize],
    strategy: Strategy,
    stats: &DatasetStats,
    rng: &mut R,
) -> PerturbedInstance {
    debug_assert_eq!(strategy.kind, Kind::Subsequence);
    let m = ts.len();
    let len = subsequence_length(m);
    let mut seeds = mask.to_vec();
    seeds.sort_unstable();
    seeds.dedup();

    let mut covered = vec![false; m];
    let mut values = ts.to_vec();
    if strategy.fill == Fill::SubsequenceMean {
        // Means come from the original data; later windows win on overlaps.
        for &c in &seeds {
            let w = window_around(c, len, m);
            let mean = ts[w.clone()].iter().sum::<f64>() / w.len() as f64;
            for i in w {
                values[i] = mean;
                covered[i] = true;
            }
        }
    } else {
        for &c in &seeds {
            for i in window_around(c, len, m) {
                covered[i] = true;
            }
        }
        let summary = sample_summary(ts);
        for i in 0..m {
            if covered[i] {
                values[i] = point_value(strategy.fill, ts, i, summary, stats, rng);
            }
        }
    }
    PerturbedInstance {
        values,
        mask: (0..m).filter(|&i| covered[i]).collect(),
        strategy,
        threshold: None,
    }
}

/// Thresholds one sample's attributions and applies `strategy`.
pub fn perturb_sample<R: Rng>(
    ts: &[f64],
    attr: &[f64],
    strategy: Strategy,
    spec: ThresholdSpec,
    stats: &DatasetStats,
    rng: &mut R,
) -> PerturbedInstance {
    let (threshold, mask) = threshold_mask(attr, spec);
    let mut inst = match strategy.kind {
        Kind::Point => apply_point(ts, &mask, strategy, stats, rng),
        Kind::Subsequence => apply_subsequence(ts, &mask, strategy, stats, rng),
    };
    inst.threshold = Some(threshold);
    inst
}

/// Random stream for one sample at one sweep step.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(seed, index))
}

#[derive(Debug, Clone)]
pub struct PerturbedDataset {
    pub dataset: Dataset,
    pub instances: Vec<PerturbedInstance>,
}

/// Applies `strategy` at percentile `spec` to every sample.
pub fn perturb_dataset(
    ds: &Dataset,
    attrs: &AttributionMap,
    strategy: Strategy,
    spec: ThresholdSpec,
    stats: &DatasetStats,
    seed: u64,
) -> Result<PerturbedDataset> {
    attrs.validate_against(ds)?;
    let instances: Vec<PerturbedInstance> = ds
        .samples
        .par_iter()
        .zip(&attrs.values)
        .enumerate()
        .map(|(i, (ts, attr))| perturb_sample(ts, attr, strategy, spec, stats, &mut sample_rng(seed, i)))
        .collect();
    let dataset = ds.with_samples(instances.iter().map(|p| p.values.clone()).collect())?;
    Ok(PerturbedDataset { dataset, instances })
}
