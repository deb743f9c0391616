#![allow(dead_code)]

use pertcard::dataset::{synthetic_spike_dataset, Dataset, Split};
use pertcard::model::{init_model, predict_batch, train, Classifier, ModelConfig, ModelParams, TrainConfig};
use pertcard::Result;

/// Spike benchmark at the size the fidelity checks use.
pub const N: usize = 200;
pub const M: usize = 96;
pub const SEED: u64 = 11;

pub struct Trained {
    pub train: Dataset,
    pub test: Dataset,
    pub model: ModelParams,
    pub train_accuracy: f64,
    pub loss_history: Vec<f64>,
}

pub fn trained_spike_model(epochs: usize) -> Trained {
    let train_ds = synthetic_spike_dataset(N, M, SEED).unwrap();
    let mut test = synthetic_spike_dataset(N, M, SEED + 1).unwrap();
    test.split = Split::Test;
    let params = init_model(&ModelConfig::plain(M, 2), SEED).unwrap();
    let tc = TrainConfig {
        epochs,
        seed: SEED,
        ..TrainConfig::default()
    };
    let report = train(&params, &train_ds, &tc).unwrap();
    let train_accuracy = predict_batch(&report.params, &train_ds).unwrap().accuracy;
    Trained {
        train: train_ds,
        test,
        model: report.params,
        train_accuracy,
        loss_history: report.loss_history,
    }
}

/// Smooth two-class function: `F_0 = q(x)`, `F_1 = −q(x)` with
/// `q(x) = Σ a_i x_i + Σ_{i<j} b_ij x_i x_j + sin(c · x)`.
pub struct SmoothFn {
    pub m: usize,
    pub a: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

impl SmoothFn {
    pub fn q(&self, x: &[f64]) -> f64 {
        let mut v = 0.0;
        let mut dot = 0.0;
        for i in 0..self.m {
            v += self.a[i] * x[i];
            dot += self.c[i] * x[i];
            for j in i + 1..self.m {
                v += self.b[i][j] * x[i] * x[j];
            }
        }
        v + dot.sin()
    }

    fn dq(&self, x: &[f64]) -> Vec<f64> {
        let dot: f64 = self.c.iter().zip(x).map(|(c, x)| c * x).sum();
        (0..self.m)
            .map(|k| {
                let mut g = self.a[k] + self.c[k] * dot.cos();
                for j in 0..self.m {
                    if j > k {
                        g += self.b[k][j] * x[j];
                    } else if j < k {
                        g += self.b[j][k] * x[j];
                    }
                }
                g
            })
            .collect()
    }
}

impl Classifier for SmoothFn {
    fn input_length(&self) -> usize {
        self.m
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let q = self.q(x);
        Ok(vec![q, -q])
    }

    fn logit_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        let g = self.dq(x);
        Ok(if class == 0 { g } else { g.iter().map(|v| -v).collect() })
    }
}

/// Exact Shapley values by enumerating every subset.
pub fn brute_force_shapley<M: Classifier>(model: &M, x: &[f64], baseline: &[f64], class: usize) -> Vec<f64> {
    let m = x.len();
    let value = |mask: u32| {
        let z: Vec<f64> = (0..m)
            .map(|i| if mask >> i & 1 == 1 { x[i] } else { baseline[i] })
            .collect();
        model.logits(&z).unwrap()[class]
    };
    let values: Vec<f64> = (0..1u32 << m).map(value).collect();
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        for s in 0..1u32 << m {
            if s >> i & 1 == 1 {
                continue;
            }
            let size = s.count_ones() as usize;
            let w = fact(size) * fact(m - size - 1) / fact(m);
            *p += w * (values[(s | 1 << i) as usize] - values[s as usize]);
        }
    }
    phi
}

/// Linear-interpolation percentile, written independently of the library.
pub fn oracle_percentile(values: &[f64], p: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (s.len() - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= s.len() {
        return s[s.len() - 1];
    }
    s[i] + (pos - i as f64) * (s[i + 1] - s[i])
}

pub fn oracle_mask(attr: &[f64], p: f64) -> Vec<usize> {
    let t = oracle_percentile(attr, p);
    (0..attr.len()).filter(|&i| attr[i] > t).collect()
}
