use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pertcard::attribution::{AttributionConfig, Technique};
use pertcard::model::TrainConfig;
use pertcard::perturbation::Strategy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for attribution and evaluation; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attribution: AttributionSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Ucr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: Source,
    /// Synthetic sizes.
    pub n_train: usize,
    pub n_test: usize,
    pub length: usize,
    /// UCR files; the test path defaults to the train path with `_TRAIN`
    /// replaced by `_TEST`.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Z-normalize every UCR series.
    pub normalize: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: Source::Synthetic,
            n_train: 200,
            n_test: 200,
            length: 96,
            train: None,
            test: None,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureName {
    #[default]
    Plain,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub architecture: ArchitectureName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportSpec {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionSection {
    pub techniques: Vec<Technique>,
    /// Externally computed attribution files evaluated alongside.
    pub imports: Vec<ImportSpec>,
    #[serde(flatten)]
    pub params: AttributionConfig,
}

impl Default for AttributionSection {
    fn default() -> Self {
        AttributionSection {
            techniques: Technique::NATIVE.to_vec(),
            imports: Vec::new(),
            params: AttributionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub strategies: Vec<Strategy>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            strategies: Strategy::all(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub dataset: Option<String>,
    pub seed: Option<u64>,
    pub techniques: Option<String>,
    pub strategies: Option<String>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

pub fn parse_techniques(list: &str) -> anyhow::Result<Vec<Technique>> {
    if list.trim() == "all" {
        return Ok(Technique::NATIVE.to_vec());
    }
    list.split(',')
        .map(|s| s.trim().parse::<Technique>().map_err(|e| UsageError(e.to_string()).into()))
        .collect()
}

pub fn parse_strategies(list: &str) -> anyhow::Result<Vec<Strategy>> {
    if list.trim() == "all" {
        return Ok(Strategy::all());
    }
    list.split(',')
        .map(|s| s.trim().parse::<Strategy>().map_err(|e| UsageError(e.to_string()).into()))
        .collect()
}

impl Config {
    pub fn load(path: Option<&Path>, ov: &Overrides) -> anyhow::Result<Config> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let mut cfg: Config = toml::from_str(&text)
                    .map_err(|e| UsageError(format!("config {}: {e}", p.display())))?;
                // Relative dataset paths are relative to the config file.
                let base = p.parent().unwrap_or(Path::new(""));
                for slot in [&mut cfg.dataset.train, &mut cfg.dataset.test] {
                    if let Some(f) = slot {
                        if f.is_relative() {
                            *f = base.join(&*f);
                        }
                    }
                }
                for imp in &mut cfg.attribution.imports {
                    if imp.path.is_relative() {
                        imp.path = base.join(&imp.path);
                    }
                }
                cfg
            }
            None => toml::from_str("").expect("empty config is valid"),
        };
        if let Some(d) = &ov.dataset {
            if d == "synthetic" || d == "synthetic-spike" {
                cfg.dataset.source = Source::Synthetic;
            } else {
                cfg.dataset.source = Source::Ucr;
                cfg.dataset.train = Some(PathBuf::from(d));
                cfg.dataset.test = None;
            }
        }
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(t) = &ov.techniques {
            cfg.attribution.techniques = parse_techniques(t)?;
        }
        if let Some(s) = &ov.strategies {
            cfg.evaluate.strategies = parse_strategies(s)?;
        }
        if let Some(w) = ov.workers {
            cfg.workers = w;
        }
        if let Some(o) = &ov.out_dir {
            cfg.out_dir = o.clone();
        }
        // One seed drives every stage.
        cfg.train.seed = cfg.seed;
        cfg.attribution.params.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> anyhow::Result<()> {
        match self.dataset.source {
            Source::Ucr if self.dataset.train.is_none() => {
                bail!(UsageError(
                    "UCR dataset needs a train path (dataset.train or --dataset)".into()
                ))
            }
            Source::Synthetic if self.dataset.n_train < 2 || self.dataset.n_test < 2 => {
                bail!(UsageError("synthetic dataset needs at least 2 samples per split".into()))
            }
            _ => {}
        }
        self.train
            .validate()
            .map_err(|e| UsageError(format!("[train] {e}")))?;
        self.attribution
            .params
            .validate()
            .map_err(|e| UsageError(format!("[attribution] {e}")))?;
        let mut names: Vec<String> = self.technique_names();
        names.sort();
        names.dedup();
        if names.len() != self.attribution.techniques.len() + self.attribution.imports.len() {
            bail!(UsageError("technique and import names must be unique".into()));
        }
        Ok(())
    }

    pub fn test_path(&self) -> Option<PathBuf> {
        if let Some(t) = &self.dataset.test {
            return Some(t.clone());
        }
        let train = self.dataset.train.as_ref()?;
        let name = train.file_name()?.to_str()?;
        name.contains("_TRAIN")
            .then(|| train.with_file_name(name.replacen("_TRAIN", "_TEST", 1)))
    }

    /// Native techniques followed by imported ones, in configured order.
    pub fn technique_names(&self) -> Vec<String> {
        self.attribution
            .techniques
            .iter()
            .map(|t| t.name().to_string())
            .chain(self.attribution.imports.iter().map(|i| i.name.clone()))
            .collect()
    }

    /// Canonical JSON of the resolved configuration. The output directory
    /// and worker count do not change any artifact, so they are left out.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let obj = value.as_object_mut().expect("config is an object");
        obj.remove("out_dir");
        obj.remove("workers");
        value.to_string()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
