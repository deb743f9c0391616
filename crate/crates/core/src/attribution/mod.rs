//! Per-time-point attribution techniques.
//!
//! Every technique explains the pre-softmax logit of the class the model
//! predicts for the unperturbed series. Gradient techniques use the
//! model's exact input gradient; Occlusion and KernelSHAP only need
//! forward passes.

mod io;
mod kernel_shap;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{dataset_stats, Dataset};
use crate::error::{Error, Result};
use crate::model::Classifier;

pub use io::{
    export_attributions, import_attributions, read_attributions, to_text as attributions_to_text,
    ATTRIBUTION_FORMAT,
};
pub use kernel_shap::{kernel_shap, shapley_kernel_weight, KernelShapMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Technique {
    Saliency,
    InputXGradient,
    IntegratedGradients,
    GradientShap,
    Occlusion,
    KernelShap,
    /// Uniform random scores; the uninformed control.
    Random,
}

impl Technique {
    /// The six model-based techniques.
    pub const NATIVE: [Technique; 6] = [
        Technique::Saliency,
        Technique::InputXGradient,
        Technique::IntegratedGradients,
        Technique::GradientShap,
        Technique::Occlusion,
        Technique::KernelShap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Technique::Saliency => "saliency",
            Technique::InputXGradient => "input-x-gradient",
            Technique::IntegratedGradients => "integrated-gradients",
            Technique::GradientShap => "gradient-shap",
            Technique::Occlusion => "occlusion",
            Technique::KernelShap => "kernel-shap",
            Technique::Random => "random",
        }
    }

    pub fn valid_names() -> Vec<&'static str> {
        Technique::NATIVE
            .iter()
            .chain(&[Technique::Random])
            .map(|t| t.name())
            .collect()
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let found = Technique::NATIVE
            .iter()
            .chain(&[Technique::Random])
            .find(|t| t.name() == s);
        match found {
            Some(t) => Ok(*t),
            None => {
                let hint = if s.starts_with("deeplift") || s.starts_with("deep-lift") {
                    " (DeepLift-style attributions are computed externally; provide them as an attribution file via the import path)"
                } else {
                    ""
                };
                Err(Error::argument(format!(
                    "unknown technique {s:?}; valid names: {}{hint}",
                    Technique::valid_names().join(", ")
                )))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Constant series at the dataset's global mean.
    GlobalMean,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub ig_steps: usize,
    pub gradshap_samples: usize,
    pub gradshap_noise_sigma: f64,
    pub occlusion_window: usize,
    pub occlusion_fill: f64,
    /// `None` means twice the series length.
    pub kernelshap_coalitions: Option<usize>,
    /// Added to the diagonal of the KernelSHAP normal equations.
    pub kernelshap_ridge: f64,
    pub baseline: Baseline,
    pub saliency_abs: bool,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            ig_steps: 50,
            gradshap_samples: 20,
            gradshap_noise_sigma: 0.1,
            occlusion_window: 1,
            occlusion_fill: 0.0,
            kernelshap_coalitions: None,
            kernelshap_ridge: 0.0,
            baseline: Baseline::GlobalMean,
            saliency_abs: true,
            seed: 0,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ig_steps == 0 || self.gradshap_samples == 0 || self.occlusion_window == 0 {
            return Err(Error::argument("attribution counts must be at least 1"));
        }
        if self.kernelshap_coalitions == Some(0) {
            return Err(Error::argument("kernelshap_coalitions must be at least 1"));
        }
        if !(self.gradshap_noise_sigma >= 0.0) || !(self.kernelshap_ridge >= 0.0) {
            return Err(Error::argument("sigma and ridge must be non-negative"));
        }
        Ok(())
    }

    /// Parameters that influence `technique`, for the map's metadata.
    fn record(&self, technique: Technique, m: usize) -> serde_json::Value {
        use serde_json::json;
        match technique {
            Technique::Saliency => json!({ "abs": self.saliency_abs }),
            Technique::InputXGradient => json!({}),
            Technique::IntegratedGradients => json!({ "steps": self.ig_steps, "baseline": self.baseline }),
            Technique::GradientShap => json!({
                "samples": self.gradshap_samples,
                "noise_sigma": self.gradshap_noise_sigma,
                "seed": self.seed,
            }),
            Technique::Occlusion => json!({ "window": self.occlusion_window, "fill": self.occlusion_fill }),
            Technique::KernelShap => json!({
                "coalitions": self.kernelshap_coalitions.unwrap_or(2 * m),
                "ridge": self.kernelshap_ridge,
                "baseline": self.baseline,
                "seed": self.seed,
            }),
            Technique::Random => json!({ "seed": self.seed }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub technique: String,
    pub params: serde_json::Value,
    pub dataset: String,
    /// What was explained, e.g. `"predicted-class logit"`.
    pub target: String,
    pub external: bool,
    /// Class explained for each sample, when known.
    pub targets: Option<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

pub const TARGET_PREDICTED_LOGIT: &str = "predicted-class logit";

impl AttributionMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Checks the map is finite and shaped like `ds`.
    pub fn validate_against(&self, ds: &Dataset) -> Result<()> {
        if self.values.len() != ds.len() {
            return Err(Error::Validation(format!(
                "attribution map has {} rows, expected n = {}",
                self.values.len(),
                ds.len()
            )));
        }
        let m = ds.series_length();
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Validation(format!(
                    "attribution row {i} has {} values, expected m = {m}",
                    row.len()
                )));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite attribution at sample {i}, position {j}"
                )));
            }
        }
        if let Some(t) = &self.targets {
            if t.len() != ds.len() {
                return Err(Error::Validation(format!(
                    "attribution map lists {} targets, expected n = {}",
                    t.len(),
                    ds.len()
                )));
            }
        }
        Ok(())
    }
}

fn target_logit<M: Classifier + ?Sized>(model: &M, x: &[f64], class: usize) -> Result<f64> {
    Ok(model.logits(x)?[class])
}

pub fn saliency<M: Classifier + ?Sized>(model: &M, x: &[f64], abs: bool) -> Result<Vec<f64>> {
    let class = model.predict_label(x)?;
    let mut g = model.logit_gradient(x, class)?;
    if abs {
        g.iter_mut().for_each(|v| *v = v.abs());
    }
    Ok(g)
}

pub fn input_x_gradient<M: Classifier + ?Sized>(model: &M, x: &[f64]) -> Result<Vec<f64>> {
    let g = saliency(model, x, false)?;
    Ok(g.iter().zip(x).map(|(g, v)| g * v).collect())
}

/// Midpoint Riemann sum of the path integral from `baseline` to `x`.
pub fn integrated_gradients<M: Classifier + ?Sized>(
    model: &M,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Vec<f64>> {
    if baseline.len() != x.len() {
        return Err(Error::argument(format!(
            "baseline has length {}, series has {}",
            baseline.len(),
            x.len()
        )));
    }
    if steps == 0 {
        return Err(Error::argument("integrated gradients needs at least one step"));
    }
    let class = model.predict_label(x)?;
    let diff: Vec<f64> = x.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mut total = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        for ((p, b), d) in point.iter_mut().zip(baseline).zip(&diff) {
            *p = b + alpha * d;
        }
        let g = model.logit_gradient(&point, class)?;
        for (t, g) in total.iter_mut().zip(g) {
            *t += g;
        }
    }
    Ok(total
        .iter()
        .zip(&diff)
        .map(|(t, d)| d * t / steps as f64)
        .collect())
}

/// Expected gradients with noisy interpolation points.
///
/// Each draw picks a baseline `b` from `pool`, `u ~ U[0, 1]` and gaussian
/// noise `ε ~ N(0, σ²)` per time point, and evaluates
/// `(x − b) ⊙ ∇F(b + u(x − b) + ε)`. The result is the mean over draws.
pub fn gradient_shap<M: Classifier + ?Sized>(
    model: &M,
    x: &[f64],
    pool: &[Vec<f64>],
    n_samples: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::argument("gradient SHAP needs a non-empty baseline pool"));
    }
    if n_samples == 0 {
        return Err(Error::argument("gradient SHAP needs at least one sample"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::argument("noise sigma must be non-negative"));
    }
    if let Some(b) = pool.iter().find(|b| b.len() != x.len()) {
        return Err(Error::argument(format!(
            "baseline of length {} for a series of length {}",
            b.len(),
            x.len()
        )));
    }
    let class = model.predict_label(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    let mut total = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for _ in 0..n_samples {
        let b = &pool[rng.random_range(0..pool.len())];
        let u: f64 = rng.random();
        for ((p, &xi), &bi) in point.iter_mut().zip(x).zip(b) {
            let eps = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            *p = bi + u * (xi - bi) + eps;
        }
        let g = model.logit_gradient(&point, class)?;
        for (((t, g), &xi), &bi) in total.iter_mut().zip(g).zip(x).zip(b) {
            *t += (xi - bi) * g;
        }
    }
    Ok(total.into_iter().map(|t| t / n_samples as f64).collect())
}

/// Sliding-window occlusion with stride 1. Position `i` scores
/// `F(x)` minus the mean of `F` over all occluded copies whose window
/// covers `i`.
pub fn occlusion<M: Classifier + ?Sized>(model: &M, x: &[f64], window: usize, fill: f64) -> Result<Vec<f64>> {
    let m = x.len();
    if window == 0 || window > m {
        return Err(Error::argument(format!(
            "occlusion window {window} outside 1..={m}"
        )));
    }
    let class = model.predict_label(x)?;
    let full = target_logit(model, x, class)?;
    let mut occluded_scores = Vec::with_capacity(m - window + 1);
    let mut buf = x.to_vec();
    for start in 0..=m - window {
        buf[start..start + window].fill(fill);
        occluded_scores.push(target_logit(model, &buf, class)?);
        buf[start..start + window].copy_from_slice(&x[start..start + window]);
    }
    Ok((0..m)
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let hi = i.min(m - window);
            let covering = &occluded_scores[lo..=hi];
            full - covering.iter().sum::<f64>() / covering.len() as f64
        })
        .collect())
}

pub fn random_attribution(m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| rng.random::<f64>()).collect()
}

pub fn baseline_series(ds: &Dataset, kind: Baseline) -> Vec<f64> {
    let value = match kind {
        Baseline::GlobalMean => dataset_stats(ds).global_mean,
        Baseline::Zero => 0.0,
    };
    vec![value; ds.series_length()]
}

/// Seed of the per-sample random stream.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Runs `technique` over every sample of `ds`. `pool` supplies GradientSHAP
/// baselines (usually the training samples). Samples are processed in
/// parallel on the current rayon pool; results do not depend on scheduling.
pub fn attribute_dataset<M: Classifier + ?Sized>(
    model: &M,
    ds: &Dataset,
    technique: Technique,
    cfg: &AttributionConfig,
    pool: &[Vec<f64>],
) -> Result<AttributionMap> {
    cfg.validate()?;
    let m = ds.series_length();
    let baseline = baseline_series(ds, cfg.baseline);
    let coalitions = cfg.kernelshap_coalitions.unwrap_or(2 * m);

    let rows = ds
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let seed = sample_seed(cfg.seed, i);
            let target = model.predict_label(x)?;
            let values = match technique {
                Technique::Saliency => saliency(model, x, cfg.saliency_abs)?,
                Technique::InputXGradient => input_x_gradient(model, x)?,
                Technique::IntegratedGradients => integrated_gradients(model, x, &baseline, cfg.ig_steps)?,
                Technique::GradientShap => {
                    gradient_shap(model, x, pool, cfg.gradshap_samples, cfg.gradshap_noise_sigma, seed)?
                }
                Technique::Occlusion => occlusion(model, x, cfg.occlusion_window, cfg.occlusion_fill)?,
                Technique::KernelShap => {
                    kernel_shap(model, x, &baseline, coalitions, cfg.kernelshap_ridge, seed)?.values
                }
                Technique::Random => random_attribution(m, seed),
            };
            Ok((target, values))
        })
        .collect::<Result<Vec<_>>>()?;

    let (targets, values): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let map = AttributionMap {
        technique: technique.name().to_string(),
        params: cfg.record(technique, m),
        dataset: ds.name.clone(),
        target: TARGET_PREDICTED_LOGIT.to_string(),
        external: false,
        targets: Some(targets),
        values,
    };
    map.validate_against(ds)?;
    Ok(map)
}


#[cfg(test)]
mod tests {
    use super::toy::*;
    use super::*;
    use crate::dataset::{synthetic_spike_dataset, Split};
    use crate::model::{init_model, ModelConfig};
    use proptest::prelude::*;

    fn linear() -> Linear {
        Linear {
            w: vec![0.5, -1.5, 2.0, 3.0],
            b: 0.25,
        }
    }

    #[test]
    fn saliency_linear() {
        let x = [1.0, 2.0, -3.0, 0.5];
        assert_eq!(saliency(&linear(), &x, false).unwrap(), linear().w);
        assert_eq!(saliency(&linear(), &x, true).unwrap(), vec![0.5, 1.5, 2.0, 3.0]);
    }

    #[test]
    fn saliency_equals_grad_input_of_argmax() {
        let p = init_model(&ModelConfig::plain(64, 3), 3).unwrap();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 / 5.0).cos()).collect();
        let class = p.predict_label(&x).unwrap();
        assert_eq!(saliency(&p, &x, false).unwrap(), p.grad_input(&x, class).unwrap());
    }

    #[test]
    fn input_x_gradient_linear_and_zero() {
        let x = [1.0, 2.0, -3.0, 0.5];
        assert_eq!(input_x_gradient(&linear(), &x).unwrap(), vec![0.5, -3.0, -6.0, 1.5]);
        assert_eq!(input_x_gradient(&linear(), &[0.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn ig_linear_is_exact_for_any_steps() {
        let x = [1.0, 2.0, -3.0, 0.5];
        for steps in [1, 2, 7, 50] {
            let ig = integrated_gradients(&linear(), &x, &[0.0; 4], steps).unwrap();
            assert_eq!(ig, vec![0.5, -3.0, -6.0, 1.5]);
        }
    }

    #[test]
    fn ig_square_matches_integral() {
        let ig = integrated_gradients(&Square(1), &[2.0], &[0.0], 200).unwrap();
        assert!((ig[0] - 4.0).abs() < 0.01);
    }

    #[test]
    fn gradient_shap_linear_zero_baseline() {
        let x = [1.0, 2.0, -3.0, 0.5];
        for n in [1, 5, 33] {
            let g = gradient_shap(&linear(), &x, &[vec![0.0; 4]], n, 0.0, 3).unwrap();
            for (a, b) in g.iter().zip([0.5, -3.0, -6.0, 1.5]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_shap_monte_carlo_converges() {
        let x = [1.0, 2.0, -3.0, 0.5];
        let pool = vec![vec![0.2, -0.2, 0.2, -0.2], vec![-0.2, 0.2, -0.2, 0.2]];
        let g = gradient_shap(&linear(), &x, &pool, 2000, 0.0, 17).unwrap();
        for ((a, w), xi) in g.iter().zip(&linear().w).zip(x) {
            let expected = w * xi;
            assert!((a - expected).abs() <= 0.05 * expected.abs(), "{a} vs {expected}");
        }
    }

    #[test]
    fn gradient_shap_deterministic_and_pool_checked() {
        let p = init_model(&ModelConfig::plain(64, 2), 1).unwrap();
        let ds = synthetic_spike_dataset(6, 64, 2).unwrap();
        let a = gradient_shap(&p, &ds.samples[0], &ds.samples, 10, 0.1, 5).unwrap();
        let b = gradient_shap(&p, &ds.samples[0], &ds.samples, 10, 0.1, 5).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            gradient_shap(&p, &ds.samples[0], &[], 10, 0.1, 5),
            Err(Error::Argument(_))
        ));
    }

    struct Sum(usize);
    impl Classifier for Sum {
        fn input_length(&self) -> usize {
            self.0
        }
        fn num_classes(&self) -> usize {
            1
        }
        fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![x.iter().sum()])
        }
        fn logit_gradient(&self, x: &[f64], _class: usize) -> Result<Vec<f64>> {
            Ok(vec![1.0; x.len()])
        }
    }

    #[test]
    fn occlusion_examples() {
        let x = [1.0, -2.0, 3.5, 0.25];
        assert_eq!(occlusion(&Sum(4), &x, 1, 0.0).unwrap(), x.to_vec());
        assert_eq!(occlusion(&Constant(4), &x, 2, 0.0).unwrap(), vec![0.0; 4]);
        let full = occlusion(&Sum(4), &x, 4, 0.5).unwrap();
        let expected = x.iter().sum::<f64>() - 2.0;
        assert!(full.iter().all(|&v| v == expected));
        assert!(matches!(occlusion(&Sum(4), &x, 0, 0.0), Err(Error::Argument(_))));
        assert!(matches!(occlusion(&Sum(4), &x, 5, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn technique_names_round_trip() {
        for t in Technique::NATIVE.iter().chain(&[Technique::Random]) {
            assert_eq!(t.name().parse::<Technique>().unwrap(), *t);
        }
        let err = "deeplift".parse::<Technique>().unwrap_err().to_string();
        assert!(err.contains("import"), "{err}");
        assert!(err.contains("saliency"));
    }

    #[test]
    fn attribute_dataset_records_metadata() {
        let ds = synthetic_spike_dataset(6, 64, 2).unwrap();
        let p = init_model(&ModelConfig::plain(64, 2), 1).unwrap();
        let cfg = AttributionConfig {
            seed: 4,
            ..AttributionConfig::default()
        };
        for t in Technique::NATIVE.iter().chain(&[Technique::Random]) {
            let map = attribute_dataset(&p, &ds, *t, &cfg, &ds.samples).unwrap();
            assert_eq!(map.values.len(), 6);
            assert_eq!(map.technique, t.name());
            assert_eq!(map.target, TARGET_PREDICTED_LOGIT);
            let again = attribute_dataset(&p, &ds, *t, &cfg, &ds.samples).unwrap();
            assert_eq!(map, again);
        }
    }

    #[test]
    fn validate_against_reports_shape() {
        let ds = Dataset::new("v", Split::Train, 1, vec![vec![0.0; 3]; 2], vec![0, 0]).unwrap();
        let mut map = AttributionMap {
            technique: "x".into(),
            params: serde_json::Value::Null,
            dataset: "v".into(),
            target: TARGET_PREDICTED_LOGIT.into(),
            external: true,
            targets: None,
            values: vec![vec![0.0; 3]],
        };
        let err = map.validate_against(&ds).unwrap_err().to_string();
        assert!(err.contains("1 rows") && err.contains("n = 2"), "{err}");
        map.values = vec![vec![0.0; 3], vec![0.0, f64::NAN, 0.0]];
        let err = map.validate_against(&ds).unwrap_err().to_string();
        assert!(err.contains("sample 1, position 1"), "{err}");
    }

    proptest! {
        #[test]
        fn input_x_gradient_is_saliency_times_input(seed in 0u64..1000, scale in 0.1f64..3.0) {
            let p = init_model(&ModelConfig::custom(
                vec![crate::model::LayerSpec::Conv { out_channels: 3, kernel: 3 },
                     crate::model::LayerSpec::Relu,
                     crate::model::LayerSpec::Dense { outputs: 2 }],
                None, 10, 2), seed).unwrap();
            let x: Vec<f64> = (0..10).map(|i| scale * ((i as f64) + seed as f64).sin()).collect();
            let s = saliency(&p, &x, false).unwrap();
            let ixg = input_x_gradient(&p, &x).unwrap();
            for ((a, b), c) in ixg.iter().zip(&s).zip(&x) {
                prop_assert_eq!(*a, b * c);
            }
        }
    }
}
