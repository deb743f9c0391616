//! KernelSHAP over individual time points.
//!
//! A coalition `z ∈ {0,1}^m` keeps `x_i` where `z_i = 1` and takes the
//! baseline value elsewhere. Shapley values are the solution of a weighted
//! least-squares fit of `F(z) − F(baseline)` on `z`, weighted by the Shapley
//! kernel and constrained so the values sum to `F(x) − F(baseline)`. The
//! constraint is enforced exactly by eliminating the last feature.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Classifier;

/// Largest feature count for which exhaustive enumeration is attempted.
pub const MAX_EXACT_FEATURES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelShapMode {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelShapOutput {
    pub values: Vec<f64>,
    pub mode: KernelShapMode,
}

/// Shapley kernel weight of a coalition of size `s` out of `m` features.
pub fn shapley_kernel_weight(m: usize, s: usize) -> f64 {
    debug_assert!(s > 0 && s < m);
    (m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub fn kernel_shap<M: Classifier + ?Sized>(
    model: &M,
    x: &[f64],
    baseline: &[f64],
    n_coalitions: usize,
    ridge: f64,
    seed: u64,
) -> Result<KernelShapOutput> {
    let m = x.len();
    if baseline.len() != m {
        return Err(Error::argument(format!(
            "baseline has length {}, series has {m}",
            baseline.len()
        )));
    }
    if n_coalitions == 0 {
        return Err(Error::argument("kernel SHAP needs at least one coalition"));
    }
    let class = model.predict_label(x)?;
    let f_x = model.logits(x)?[class];
    let f_base = model.logits(baseline)?[class];
    let total = f_x - f_base;
    if m == 1 {
        return Ok(KernelShapOutput {
            values: vec![total],
            mode: KernelShapMode::Exact,
        });
    }

    let exact = m <= MAX_EXACT_FEATURES && n_coalitions >= (1usize << m) - 2;
    let (coalitions, weights) = if exact {
        enumerate_coalitions(m)
    } else {
        sample_coalitions(m, n_coalitions, seed)
    };

    let mut masked = vec![0.0; m];
    let mut outcomes = Vec::with_capacity(coalitions.len());
    for z in &coalitions {
        for i in 0..m {
            masked[i] = if z[i] { x[i] } else { baseline[i] };
        }
        outcomes.push(model.logits(&masked)?[class] - f_base);
    }

    let values = solve_constrained(&coalitions, &weights, &outcomes, total, ridge)?;
    Ok(KernelShapOutput {
        values,
        mode: if exact {
            KernelShapMode::Exact
        } else {
            KernelShapMode::Sampled
        },
    })
}

fn enumerate_coalitions(m: usize) -> (Vec<Vec<bool>>, Vec<f64>) {
    let mut coalitions = Vec::with_capacity((1 << m) - 2);
    let mut weights = Vec::with_capacity((1 << m) - 2);
    for bits in 1u32..(1u32 << m) - 1 {
        let z: Vec<bool> = (0..m).map(|i| bits >> i & 1 == 1).collect();
        let s = bits.count_ones() as usize;
        coalitions.push(z);
        weights.push(shapley_kernel_weight(m, s));
    }
    (coalitions, weights)
}

/// Draws coalition sizes in proportion to the total kernel mass of each
/// size, then a uniform subset of that size, so every draw carries equal
/// weight.
fn sample_coalitions(m: usize, n: usize, seed: u64) -> (Vec<Vec<bool>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size_mass: Vec<f64> = (1..m).map(|s| 1.0 / (s * (m - s)) as f64).collect();
    let mass_total: f64 = size_mass.iter().sum();
    let mut coalitions = Vec::with_capacity(n);
    while coalitions.len() < n {
        let mut target = rng.random::<f64>() * mass_total;
        let mut size = m - 1;
        for (s, w) in (1..m).zip(&size_mass) {
            if target < *w {
                size = s;
                break;
            }
            target -= w;
        }
        let mut z = vec![false; m];
        for i in index::sample(&mut rng, m, size) {
            z[i] = true;
        }
        coalitions.push(z);
    }
    let weights = vec![1.0; coalitions.len()];
    (coalitions, weights)
}

fn solve_constrained(
    coalitions: &[Vec<bool>],
    weights: &[f64],
    outcomes: &[f64],
    total: f64,
    ridge: f64,
) -> Result<Vec<f64>> {
    let m = coalitions[0].len();
    let k = m - 1;
    let last = m - 1;
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for ((z, &w), &y) in coalitions.iter().zip(weights).zip(outcomes) {
        let z_last = if z[last] { 1.0 } else { 0.0 };
        for j in 0..k {
            row[j] = (if z[j] { 1.0 } else { 0.0 }) - z_last;
        }
        let target = y - z_last * total;
        for a in 0..k {
            if row[a] == 0.0 {
                continue;
            }
            rhs[a] += w * row[a] * target;
            for b in 0..k {
                gram[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for j in 0..k {
        gram[(j, j)] += ridge;
    }
    let solution = gram
        .cholesky()
        .map(|c| c.solve(&rhs))
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| {
            Error::Numerical(format!(
                "singular weighted least-squares system ({} coalitions for {m} features); \
                 use more coalitions or set a positive KernelSHAP ridge",
                coalitions.len()
            ))
        })?;
    let mut values: Vec<f64> = solution.iter().copied().collect();
    let head: f64 = values.iter().sum();
    values.push(total - head);
    Ok(values)
}
